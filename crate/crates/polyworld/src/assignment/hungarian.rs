//! Exact linear sum assignment (maximization) via the Jonker-Volgenant
//! shortest augmenting path scheme, O(n³).
//!
//! Scores are negated into a min-cost problem. The dual potentials returned
//! by the solve certify optimality: any perfect matching restricted to
//! tight edges (zero reduced cost) is optimal, so the final answer is the
//! lexicographically smallest such matching — ties break to the lowest
//! column index, deterministically.

use super::ScoreMatrix;
use crate::geometry::PermutationMatrix;

/// Permutation maximizing `Σ_i s[i, σ(i)]`.
pub fn hungarian(scores: &ScoreMatrix) -> PermutationMatrix {
    let n = scores.n();
    if n == 0 {
        return PermutationMatrix::identity(0);
    }
    let s = scores.tensor().data();
    // Min-cost convention.
    let cost: Vec<f64> = s.iter().map(|v| -v).collect();
    drop(s);

    let (assign, u, v) = solve_min_cost(&cost, n);

    // Tight-edge graph under the optimal duals. The tolerance scales with
    // each entry's own magnitude so that mixed-magnitude matrices (e.g.
    // distance costs next to large forbidden sentinels) do not smear
    // genuinely distinct edges into false ties.
    let mut tight: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            let c = cost[i * n + j];
            let tol = 1e-9 * (1.0 + c.abs() + u[i].abs() + v[j].abs());
            if (c - u[i] - v[j]).abs() <= tol {
                tight[i].push(j);
            }
        }
    }

    let mapping = lex_smallest_on_tight(&tight, assign);
    PermutationMatrix::new(mapping).expect("assignment is a bijection")
}

/// Jonker-Volgenant with potentials; returns (row → column, u, v) where the
/// duals satisfy `cost[i][j] - u[i] - v[j] >= 0` with equality on matched
/// edges.
fn solve_min_cost(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    const INF: f64 = f64::INFINITY;
    // 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row matched to column j (0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let u_out: Vec<f64> = (1..=n).map(|i| u[i]).collect();
    let v_out: Vec<f64> = (1..=n).map(|j| v[j]).collect();
    (assign, u_out, v_out)
}

/// Lexicographically smallest perfect matching on the tight graph, starting
/// from a known perfect matching. For each row in order, try to commit the
/// smallest tight column by re-augmenting the displaced row.
fn lex_smallest_on_tight(tight: &[Vec<usize>], mut matching: Vec<usize>) -> Vec<usize> {
    let n = tight.len();
    let mut col_owner: Vec<usize> = vec![usize::MAX; n];
    for (i, &j) in matching.iter().enumerate() {
        col_owner[j] = i;
    }
    // Columns locked by earlier (smaller) rows cannot move again.
    let mut locked_col = vec![false; n];
    for i in 0..n {
        for &c in &tight[i] {
            if c >= matching[i] {
                break; // tight lists are ascending; nothing smaller remains
            }
            if locked_col[c] {
                continue;
            }
            // Try to steal column c: the displaced row must re-augment
            // through unlocked columns.
            let displaced = col_owner[c];
            let old = matching[i];
            matching[i] = c;
            col_owner[c] = i;
            col_owner[old] = usize::MAX;
            let mut visited = vec![false; n];
            visited[c] = true;
            if try_augment(displaced, tight, &mut matching, &mut col_owner, &locked_col, &mut visited) {
                break; // committed to c
            }
            // Roll back.
            matching[i] = old;
            col_owner[old] = i;
            matching[displaced] = c;
            col_owner[c] = displaced;
        }
        locked_col[matching[i]] = true;
    }
    matching
}

fn try_augment(
    row: usize,
    tight: &[Vec<usize>],
    matching: &mut [usize],
    col_owner: &mut [usize],
    locked_col: &[bool],
    visited: &mut [bool],
) -> bool {
    for &c in &tight[row] {
        if visited[c] || locked_col[c] {
            continue;
        }
        visited[c] = true;
        let owner = col_owner[c];
        if owner == usize::MAX
            || try_augment(owner, tight, matching, col_owner, locked_col, visited)
        {
            matching[row] = c;
            col_owner[c] = row;
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sm(n: usize, data: Vec<f64>) -> ScoreMatrix {
        ScoreMatrix::new(Tensor::from_vec(vec![n, n], data).unwrap()).unwrap()
    }

    /// Brute force over all permutations in lexicographic order, keeping
    /// strict improvements (so ties resolve to the lexicographically
    /// smallest optimum, matching the documented tie rule).
    fn brute_force(scores: &ScoreMatrix) -> (Vec<usize>, f64) {
        let n = scores.n();
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut perm: Vec<usize> = (0..n).collect();
        permute(&mut perm, 0, &mut |p| {
            let total: f64 = p.iter().enumerate().map(|(i, &j)| scores.get(i, j)).sum();
            match &best {
                Some((_, t)) if total <= *t => {}
                _ => best = Some((p.to_vec(), total)),
            }
        });
        best.unwrap()
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        // Lexicographic enumeration: choose the k-th element among the
        // remaining values in ascending order.
        let mut rest: Vec<usize> = v[k..].to_vec();
        rest.sort_unstable();
        for &x in &rest {
            let pos = v[k..].iter().position(|&y| y == x).unwrap() + k;
            v.swap(k, pos);
            permute(v, k + 1, f);
            // restore order of the tail
            let mut tail: Vec<usize> = v[k + 1..].to_vec();
            tail.sort_unstable();
            v[k + 1..].copy_from_slice(&tail);
            let pos = v[k..].iter().position(|&y| y == x).unwrap() + k;
            v.swap(k, pos);
        }
    }

    #[test]
    fn identity_dominant() {
        let n = 4;
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            s[i * n + i] = 10.0;
        }
        let p = hungarian(&sm(n, s));
        assert!(p.is_identity());
    }

    #[test]
    fn two_by_two_swap() {
        let p = hungarian(&sm(2, vec![1.0, 2.0, 2.0, 1.0]));
        assert_eq!(p.targets(), &[1, 0]);
    }

    #[test]
    fn all_equal_ties_break_to_identity() {
        let p = hungarian(&sm(3, vec![5.0; 9]));
        assert!(p.is_identity());
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for trial in 0..100 {
            let n = rng.random_range(1..=7);
            let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let scores = sm(n, data);
            let (bf_map, bf_total) = brute_force(&scores);
            let hung = hungarian(&scores);
            let total: f64 = hung
                .targets()
                .iter()
                .enumerate()
                .map(|(i, &j)| scores.get(i, j))
                .sum();
            assert!(
                (total - bf_total).abs() <= 1e-9 * (1.0 + bf_total.abs()),
                "trial {trial}: totals differ: {total} vs {bf_total}"
            );
            assert_eq!(hung.targets(), &bf_map[..], "trial {trial}");
        }
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(321);
        for _ in 0..50 {
            let n = rng.random_range(2..=6);
            // Integer-valued scores force many exact ties.
            let data: Vec<f64> = (0..n * n)
                .map(|_| rng.random_range(0..3) as f64)
                .collect();
            let scores = sm(n, data);
            let (bf_map, bf_total) = brute_force(&scores);
            let hung = hungarian(&scores);
            let total: f64 = hung
                .targets()
                .iter()
                .enumerate()
                .map(|(i, &j)| scores.get(i, j))
                .sum();
            assert!((total - bf_total).abs() <= 1e-9);
            assert_eq!(hung.targets(), &bf_map[..]);
        }
    }

    #[test]
    fn large_instance_runs_and_is_bijective() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let n = 64;
        let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-20.0..20.0)).collect();
        let p = hungarian(&sm(n, data));
        assert_eq!(p.size(), n);
        assert!(p.compose(&p.transpose()).is_identity());
    }
}
