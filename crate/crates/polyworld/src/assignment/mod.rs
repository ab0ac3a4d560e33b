//! Score matrices, differentiable Sinkhorn normalization, exact Hungarian
//! assignment, and the clockwise/counterclockwise score combination.

mod hungarian;

pub use hungarian::hungarian;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::PermutationMatrix;

/// Real N×N pairwise connection scores.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    n: usize,
    s: Tensor,
}

impl ScoreMatrix {
    pub fn new(s: Tensor) -> Result<Self> {
        if s.shape().len() != 2 || s.shape()[0] != s.shape()[1] {
            return Err(Error::contract(format!(
                "score matrix must be square, got {:?}",
                s.shape()
            )));
        }
        let n = s.shape()[0];
        if s.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("score matrix has non-finite entries"));
        }
        Ok(ScoreMatrix { n, s })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        if flat.len() != n * n {
            return Err(Error::contract("ragged score matrix"));
        }
        ScoreMatrix::new(Tensor::from_vec(vec![n, n], flat)?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tensor(&self) -> &Tensor {
        &self.s
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s.data()[i * self.n + j]
    }
}

/// Doubly stochastic relaxation of a permutation: every row and column sums
/// to 1 (within Sinkhorn tolerance). `log_p` carries the same values in log
/// space on the same tape, which is what the matching loss consumes.
#[derive(Debug, Clone)]
pub struct SoftAssignment {
    n: usize,
    p: Tensor,
    log_p: Tensor,
}

impl SoftAssignment {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn probabilities(&self) -> &Tensor {
        &self.p
    }

    pub fn log_probabilities(&self) -> &Tensor {
        &self.log_p
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p.data()[i * self.n + j]
    }
}

/// `S = S_clock + S_countᵀ`: the two directed score heads must agree under
/// transposition for a connection to score high. Differentiable.
pub fn combine_scores(s_clock: &ScoreMatrix, s_count: &ScoreMatrix) -> Result<ScoreMatrix> {
    if s_clock.n != s_count.n {
        return Err(Error::contract(format!(
            "score matrix sizes differ: {} vs {}",
            s_clock.n, s_count.n
        )));
    }
    ScoreMatrix::new(s_clock.s.add(&s_count.s.transpose()))
}

/// Log-domain Sinkhorn normalization: `iterations` rounds of row then
/// column log-sum-exp subtraction on the score matrix, then exponentiate.
///
/// The plain exp-then-normalize formulation overflows for trained score
/// magnitudes; working in log space is exact and keeps every iteration on
/// the tape, so gradients flow through the whole schedule.
pub fn sinkhorn(scores: &ScoreMatrix, iterations: usize) -> Result<SoftAssignment> {
    if iterations < 1 {
        return Err(Error::contract("sinkhorn needs at least one iteration"));
    }
    let n = scores.n;
    let mut z = scores.s.clone();
    for _ in 0..iterations {
        z = z.sub_lse_rows();
        z = z.sub_lse_cols();
    }
    Ok(SoftAssignment {
        n,
        p: z.exp(),
        log_p: z,
    })
}

/// Row-argmax hardening of a soft assignment.
///
/// Cheap readout for analysis and ablations; `bijective` is false when two
/// rows claim the same column, in which case callers must fall back to
/// [`hungarian`]. Ties go to the lowest column index.
#[derive(Debug, Clone)]
pub struct Harden {
    pub mapping: Vec<usize>,
    pub bijective: bool,
}

impl Harden {
    pub fn into_permutation(self) -> Option<PermutationMatrix> {
        if self.bijective {
            PermutationMatrix::new(self.mapping).ok()
        } else {
            None
        }
    }
}

pub fn harden(p: &SoftAssignment) -> Harden {
    let n = p.n;
    let d = p.p.data();
    let mut mapping = Vec::with_capacity(n);
    let mut used = vec![false; n];
    let mut bijective = true;
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                arg = j;
            }
        }
        if used[arg] {
            bijective = false;
        }
        used[arg] = true;
        mapping.push(arg);
    }
    Harden { mapping, bijective }
}
