//! Tensor primitives with analytic backward passes.
//!
//! Shape mismatches are caller bugs and panic with a `contract violation`
//! message. Every primitive here is covered by the central finite-difference
//! oracle in the test module below.

use rayon::prelude::*;

use super::Tensor;

// Work threshold below which matmul stays single-threaded.
const PAR_FLOPS: usize = 1 << 17;

impl Tensor {
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        // local derivative given (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::result(self.shape().to_vec(), data, self.tape.clone());
        if out.tape.is_some() {
            let a = self.inner();
            let o = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = o.grad_read() else { return };
                let od = o.data.borrow();
                let ad = a.data.borrow();
                a.accumulate(|ag| {
                    for i in 0..g.len() {
                        ag[i] += g[i] * df(ad[i], od[i]);
                    }
                });
            });
        }
        out
    }

    fn binary(
        &self,
        other: &Tensor,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        // derivatives given (a, b, out)
        dfa: impl Fn(f64, f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "contract violation: {name} shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let tape = Tensor::merge_tapes(&[self, other]);
        let out = Tensor::result(self.shape().to_vec(), data, tape);
        if out.tape.is_some() {
            let a = self.inner();
            let b = other.inner();
            let o = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = o.grad_read() else { return };
                let od = o.data.borrow();
                let ad = a.data.borrow();
                let bd = b.data.borrow();
                a.accumulate(|ag| {
                    for i in 0..g.len() {
                        ag[i] += g[i] * dfa(ad[i], bd[i], od[i]);
                    }
                });
                b.accumulate(|bg| {
                    for i in 0..g.len() {
                        bg[i] += g[i] * dfb(ad[i], bd[i], od[i]);
                    }
                });
            });
        }
        out
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, "add", |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b, _| 1.0 / b,
            |_, b, out| -out / b,
        )
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Tensor {
        self.binary(
            other,
            "maximum",
            f64::max,
            |a, b, _| if a >= b { 1.0 } else { 0.0 },
            |a, b, _| if a >= b { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise `atan2(self, x)` (self plays the role of y).
    ///
    /// The gradient denominator is floored at 1e-12: at the origin the
    /// function is not differentiable and a zero-ish subgradient is safer
    /// than NaN (a rasterized vertex can land exactly on a pixel center).
    pub fn atan2(&self, x: &Tensor) -> Tensor {
        self.binary(
            x,
            "atan2",
            f64::atan2,
            |y, x, _| x / (x * x + y * y).max(1e-12),
            |y, x, _| -y / (x * x + y * y).max(1e-12),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|v| v + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(move |v| v * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamp to `[lo, hi]`; the gradient passes only strictly inside the
    /// interval (the bounded activation used by the offset head).
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |v| v.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(
            self.shape().len() == 2 && other.shape().len() == 2,
            "contract violation: matmul requires 2-D tensors"
        );
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(
            k, k2,
            "contract violation: matmul inner dims {k} vs {k2} differ"
        );
        let a = self.data();
        let b = other.data();
        let mut data = vec![0.0; m * n];
        matmul_into(&a, &b, &mut data, m, k, n);
        drop(a);
        drop(b);
        let tape = Tensor::merge_tapes(&[self, other]);
        let out = Tensor::result(vec![m, n], data, tape);
        if out.tape.is_some() {
            let ai = self.inner();
            let bi = other.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                let ad = ai.data.borrow();
                let bd = bi.data.borrow();
                // dA += G * B^T
                ai.accumulate(|ag| {
                    matmul_nt_acc(&g, &bd, ag, m, n, k);
                });
                // dB += A^T * G
                bi.accumulate(|bg| {
                    matmul_tn_acc(&ad, &g, bg, m, k, n);
                });
            });
        }
        out
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "contract violation: transpose is 2-D");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        let out = Tensor::result(vec![n, m], data, self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                ai.accumulate(|ag| {
                    for i in 0..m {
                        for j in 0..n {
                            ag[i * n + j] += g[j * m + i];
                        }
                    }
                });
            });
        }
        out
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "contract violation: reshape changes element count"
        );
        let out = Tensor::result(shape, self.to_vec(), self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                ai.accumulate(|ag| {
                    for i in 0..g.len() {
                        ag[i] += g[i];
                    }
                });
            });
        }
        out
    }

    /// Row-major softmax over each row of a 2-D tensor.
    pub fn softmax_rows(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "contract violation: softmax_rows is 2-D");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &a[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                data[i * n + j] /= z;
            }
        }
        drop(a);
        let out = Tensor::result(vec![m, n], data, self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                let p = oi.data.borrow();
                ai.accumulate(|ag| {
                    for i in 0..m {
                        let pr = &p[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = pr.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                        for j in 0..n {
                            ag[i * n + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                });
            });
        }
        out
    }

    /// `log(sum(exp(row)))` per row of a 2-D tensor, shape `[m, 1]`.
    pub fn logsumexp_rows(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "contract violation: logsumexp_rows is 2-D");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut data = vec![0.0; m];
        for i in 0..m {
            data[i] = logsumexp(&a[i * n..(i + 1) * n]);
        }
        drop(a);
        let out = Tensor::result(vec![m, 1], data, self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                let lse = oi.data.borrow();
                let ad = ai.data.borrow();
                ai.accumulate(|ag| {
                    for i in 0..m {
                        for j in 0..n {
                            ag[i * n + j] += g[i] * (ad[i * n + j] - lse[i]).exp();
                        }
                    }
                });
            });
        }
        out
    }

    /// `log(sum(exp(col)))` per column of a 2-D tensor, shape `[1, n]`.
    pub fn logsumexp_cols(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "contract violation: logsumexp_cols is 2-D");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut data = vec![0.0; n];
        for j in 0..n {
            let col: Vec<f64> = (0..m).map(|i| a[i * n + j]).collect();
            data[j] = logsumexp(&col);
        }
        drop(a);
        let out = Tensor::result(vec![1, n], data, self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                let lse = oi.data.borrow();
                let ad = ai.data.borrow();
                ai.accumulate(|ag| {
                    for i in 0..m {
                        for j in 0..n {
                            ag[i * n + j] += g[j] * (ad[i * n + j] - lse[j]).exp();
                        }
                    }
                });
            });
        }
        out
    }

    /// Fused `z - lse_rows(z)·1ᵀ`: row-wise log normalization in one node
    /// (a Sinkhorn half-step).
    pub fn sub_lse_rows(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "contract violation: sub_lse_rows is 2-D");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let l = logsumexp(&a[i * n..(i + 1) * n]);
            for j in 0..n {
                data[i * n + j] = a[i * n + j] - l;
            }
        }
        drop(a);
        let out = Tensor::result(vec![m, n], data, self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                let od = oi.data.borrow();
                ai.accumulate(|ag| {
                    // dz = g - softmax(z) ⊙ rowsum(g); softmax(z) = exp(out).
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let or = &od[i * n..(i + 1) * n];
                        let rs: f64 = gr.iter().sum();
                        for j in 0..n {
                            ag[i * n + j] += gr[j] - or[j].exp() * rs;
                        }
                    }
                });
            });
        }
        out
    }

    /// Fused `z - 1·lse_cols(z)`: column-wise log normalization in one node.
    pub fn sub_lse_cols(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "contract violation: sub_lse_cols is 2-D");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut data = vec![0.0; m * n];
        let mut lse = vec![0.0; n];
        for (j, l) in lse.iter_mut().enumerate() {
            let col: Vec<f64> = (0..m).map(|i| a[i * n + j]).collect();
            *l = logsumexp(&col);
        }
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = a[i * n + j] - lse[j];
            }
        }
        drop(a);
        let out = Tensor::result(vec![m, n], data, self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                let od = oi.data.borrow();
                ai.accumulate(|ag| {
                    for j in 0..n {
                        let mut cs = 0.0;
                        for i in 0..m {
                            cs += g[i * n + j];
                        }
                        for i in 0..m {
                            ag[i * n + j] += g[i * n + j] - od[i * n + j].exp() * cs;
                        }
                    }
                });
            });
        }
        out
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let out = Tensor::result(vec![1], vec![s], self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                ai.accumulate(|ag| {
                    for v in ag.iter_mut() {
                        *v += g[0];
                    }
                });
            });
        }
        out
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Maximum element; the gradient flows to the first argmax.
    pub fn max_all(&self) -> Tensor {
        let d = self.data();
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0usize);
        for (i, &v) in d.iter().enumerate() {
            if v > best {
                best = v;
                arg = i;
            }
        }
        drop(d);
        let out = Tensor::result(vec![1], vec![best], self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                ai.accumulate(|ag| ag[arg] += g[0]);
            });
        }
        out
    }

    /// Sum a 2-D tensor over `axis` (0 → `[1, n]`, 1 → `[m, 1]`).
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2, "contract violation: sum_axis is 2-D");
        assert!(axis < 2, "contract violation: axis out of range");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let (shape, data) = if axis == 0 {
            let mut d = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    d[j] += a[i * n + j];
                }
            }
            (vec![1, n], d)
        } else {
            let mut d = vec![0.0; m];
            for i in 0..m {
                d[i] = a[i * n..(i + 1) * n].iter().sum();
            }
            (vec![m, 1], d)
        };
        drop(a);
        let out = Tensor::result(shape, data, self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                ai.accumulate(|ag| {
                    for i in 0..m {
                        for j in 0..n {
                            ag[i * n + j] += if axis == 0 { g[j] } else { g[i] };
                        }
                    }
                });
            });
        }
        out
    }

    /// Add a `[1, n]` (or `[n]`) bias row to every row of a 2-D tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "contract violation: add_bias is 2-D");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        assert_eq!(
            bias.numel(),
            n,
            "contract violation: bias length {} for {} columns",
            bias.numel(),
            n
        );
        let a = self.data();
        let b = bias.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = a[i * n + j] + b[j];
            }
        }
        drop(a);
        drop(b);
        let tape = Tensor::merge_tapes(&[self, bias]);
        let out = Tensor::result(vec![m, n], data, tape);
        if out.tape.is_some() {
            let ai = self.inner();
            let bi = bias.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                ai.accumulate(|ag| {
                    for i in 0..g.len() {
                        ag[i] += g[i];
                    }
                });
                bi.accumulate(|bg| {
                    for i in 0..m {
                        for j in 0..n {
                            bg[j] += g[i * n + j];
                        }
                    }
                });
            });
        }
        out
    }

    /// Contiguous 2-D slice along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2, "contract violation: narrow is 2-D");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let (om, on, r0, c0) = match axis {
            0 => {
                assert!(start + len <= m, "contract violation: narrow range");
                (len, n, start, 0)
            }
            1 => {
                assert!(start + len <= n, "contract violation: narrow range");
                (m, len, 0, start)
            }
            _ => panic!("contract violation: narrow axis out of range"),
        };
        let a = self.data();
        let mut data = vec![0.0; om * on];
        for i in 0..om {
            for j in 0..on {
                data[i * on + j] = a[(r0 + i) * n + (c0 + j)];
            }
        }
        drop(a);
        let out = Tensor::result(vec![om, on], data, self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                ai.accumulate(|ag| {
                    for i in 0..om {
                        for j in 0..on {
                            ag[(r0 + i) * n + (c0 + j)] += g[i * on + j];
                        }
                    }
                });
            });
        }
        out
    }

    /// Concatenate two 2-D tensors along columns.
    pub fn concat_cols(&self, other: &Tensor) -> Tensor {
        assert!(
            self.shape().len() == 2 && other.shape().len() == 2,
            "contract violation: concat_cols is 2-D"
        );
        let (m, p) = (self.shape()[0], self.shape()[1]);
        let (m2, q) = (other.shape()[0], other.shape()[1]);
        assert_eq!(m, m2, "contract violation: concat_cols row mismatch");
        let a = self.data();
        let b = other.data();
        let n = p + q;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            data[i * n..i * n + p].copy_from_slice(&a[i * p..(i + 1) * p]);
            data[i * n + p..(i + 1) * n].copy_from_slice(&b[i * q..(i + 1) * q]);
        }
        drop(a);
        drop(b);
        let tape = Tensor::merge_tapes(&[self, other]);
        let out = Tensor::result(vec![m, n], data, tape);
        if out.tape.is_some() {
            let ai = self.inner();
            let bi = other.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                ai.accumulate(|ag| {
                    for i in 0..m {
                        for j in 0..p {
                            ag[i * p + j] += g[i * n + j];
                        }
                    }
                });
                bi.accumulate(|bg| {
                    for i in 0..m {
                        for j in 0..q {
                            bg[i * q + j] += g[i * n + p + j];
                        }
                    }
                });
            });
        }
        out
    }

    /// Concatenate two 2-D tensors along rows.
    pub fn concat_rows(&self, other: &Tensor) -> Tensor {
        assert!(
            self.shape().len() == 2 && other.shape().len() == 2,
            "contract violation: concat_rows is 2-D"
        );
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let (m2, n2) = (other.shape()[0], other.shape()[1]);
        assert_eq!(n, n2, "contract violation: concat_rows column mismatch");
        let mut data = self.to_vec();
        data.extend_from_slice(&other.data());
        let tape = Tensor::merge_tapes(&[self, other]);
        let out = Tensor::result(vec![m + m2, n], data, tape);
        if out.tape.is_some() {
            let ai = self.inner();
            let bi = other.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                ai.accumulate(|ag| {
                    for i in 0..m * n {
                        ag[i] += g[i];
                    }
                });
                bi.accumulate(|bg| {
                    for i in 0..m2 * n {
                        bg[i] += g[m * n + i];
                    }
                });
            });
        }
        out
    }

    /// Gather rows of a 2-D tensor; duplicate indices accumulate gradient.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), 2, "contract violation: gather_rows is 2-D");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        for &i in idx {
            assert!(i < m, "contract violation: gather_rows index {i} >= {m}");
        }
        let a = self.data();
        let mut data = vec![0.0; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            data[r * n..(r + 1) * n].copy_from_slice(&a[i * n..(i + 1) * n]);
        }
        drop(a);
        let out = Tensor::result(vec![idx.len(), n], data, self.tape.clone());
        if out.tape.is_some() {
            let ai = self.inner();
            let oi = out.inner();
            let idx = idx.to_vec();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                ai.accumulate(|ag| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            ag[i * n + j] += g[r * n + j];
                        }
                    }
                });
            });
        }
        out
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx.is_infinite() {
        return mx;
    }
    let s: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

/// out = A(m×k) · B(k×n), overwriting out.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let body = |i: usize, row: &mut [f64]| {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// acc += G(m×n) · B(k×n)^T, i.e. dA for C = A·B.
fn matmul_nt_acc(g: &[f64], b: &[f64], acc: &mut [f64], m: usize, n: usize, k: usize) {
    let body = |i: usize, row: &mut [f64]| {
        let grow = &g[i * n..(i + 1) * n];
        for (kk, o) in row.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            *o += s;
        }
    };
    if m * k * n >= PAR_FLOPS {
        acc.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in acc.chunks_mut(k).enumerate() {
            body(i, row);
        }
    }
}

/// acc += A(m×k)^T · G(m×n), i.e. dB for C = A·B.
fn matmul_tn_acc(a: &[f64], g: &[f64], acc: &mut [f64], m: usize, k: usize, n: usize) {
    let body = |kk: usize, row: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        acc.par_chunks_mut(n)
            .enumerate()
            .for_each(|(kk, row)| body(kk, row));
    } else {
        for (kk, row) in acc.chunks_mut(n).enumerate() {
            body(kk, row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::check::{assert_grad_close, finite_difference};
    use super::super::{backward, Tape, Tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// FD-check a scalar-valued tensor function at `x0`.
    fn fd_check(x0: Vec<f64>, shape: Vec<usize>, f: impl Fn(&Tensor) -> Tensor) {
        let x = Tensor::param(shape.clone(), x0.clone()).unwrap();
        let tape = Tape::new();
        let loss = f(&tape.watch(&x));
        assert_eq!(loss.numel(), 1, "fd_check target must be scalar");
        backward(&loss).unwrap();
        let analytic = x.grad().unwrap();
        let numeric = finite_difference(
            |v| {
                let t = Tensor::from_vec(shape.clone(), v.to_vec()).unwrap();
                f(&t).value()
            },
            &x0,
            1e-5,
        );
        assert_grad_close(&analytic, &numeric, 1e-4);
    }

    fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn elementwise_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a0 = rand_vec(&mut rng, 12, -1.5, 1.5);
        let b0 = rand_vec(&mut rng, 12, 0.4, 2.0);
        let b = Tensor::from_vec(vec![3, 4], b0).unwrap();
        fd_check(a0.clone(), vec![3, 4], |x| x.add(&b).sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.sub(&b).sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.mul(&b).sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.div(&b).sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.mul(&b).maximum(&b).sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.exp().sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.sigmoid().sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.add_scalar(2.0).log().sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.mul_scalar(-1.7).sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.atan2(&b).sum_all());
        // Keep relu/abs/clamp away from their kinks.
        let shifted: Vec<f64> = a0.iter().map(|v| v + 3.0).collect();
        fd_check(shifted.clone(), vec![3, 4], |x| x.relu().sum_all());
        fd_check(shifted.clone(), vec![3, 4], |x| x.abs().sum_all());
        fd_check(shifted, vec![3, 4], |x| x.clamp(0.0, 3.2).mul(&b).sum_all());
    }

    #[test]
    fn both_operands_get_gradients() {
        let a = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param(vec![2], vec![3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let loss = tape.watch(&a).mul(&tape.watch(&b)).sum_all();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn matmul_and_shape_ops_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = Tensor::from_vec(vec![4, 5], rand_vec(&mut rng, 20, -1.0, 1.0)).unwrap();
        let a0 = rand_vec(&mut rng, 12, -1.0, 1.0);
        fd_check(a0.clone(), vec![3, 4], |x| x.matmul(&b).sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| {
            x.matmul(&b).mul(&x.matmul(&b)).sum_all()
        });
        fd_check(a0.clone(), vec![3, 4], |x| x.transpose().matmul(&x).sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| {
            x.reshape(vec![2, 6]).matmul(&x.reshape(vec![6, 2])).sum_all()
        });
        fd_check(a0.clone(), vec![3, 4], |x| x.narrow(1, 1, 2).exp().sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.narrow(0, 2, 1).exp().sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| {
            x.concat_cols(&x.mul(&x)).sum_all()
        });
        fd_check(a0.clone(), vec![3, 4], |x| {
            x.concat_rows(&x.mul_scalar(2.0)).exp().sum_all()
        });
        fd_check(a0.clone(), vec![3, 4], |x| {
            x.gather_rows(&[2, 0, 0, 1]).mul_scalar(0.5).exp().sum_all()
        });
        let bias = Tensor::param(vec![1, 4], rand_vec(&mut rng, 4, -1.0, 1.0)).unwrap();
        fd_check(a0, vec![3, 4], |x| {
            // watch the same bias through the x tape
            x.add_bias(&bias).exp().sum_all()
        });
    }

    #[test]
    fn reductions_and_softmax_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a0 = rand_vec(&mut rng, 12, -2.0, 2.0);
        fd_check(a0.clone(), vec![3, 4], |x| x.sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.mean_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.max_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.sum_axis(0).exp().sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.sum_axis(1).exp().sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| {
            x.softmax_rows().mul(&x.softmax_rows()).sum_all()
        });
        fd_check(a0.clone(), vec![3, 4], |x| x.logsumexp_rows().sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| x.logsumexp_cols().sum_all());
        fd_check(a0.clone(), vec![3, 4], |x| {
            x.sub_lse_rows().mul(&x.sub_lse_rows()).sum_all()
        });
        fd_check(a0.clone(), vec![3, 4], |x| {
            x.sub_lse_cols().exp().mul(&x.sub_lse_cols()).sum_all()
        });
        fd_check(a0, vec![3, 4], |x| {
            x.sub_lse_rows().sub_lse_cols().sub_lse_rows().exp().sum_all()
        });
    }

    #[test]
    fn fused_lse_normalization_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let x = Tensor::from_vec(vec![4, 5], rand_vec(&mut rng, 20, -8.0, 8.0)).unwrap();
        let fused = x.sub_lse_rows();
        let ones = Tensor::full(vec![1, 5], 1.0);
        let composed = x.sub(&x.logsumexp_rows().matmul(&ones));
        for (a, b) in fused.data().iter().zip(composed.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let fused = x.sub_lse_cols();
        let ones = Tensor::full(vec![4, 1], 1.0);
        let composed = x.sub(&ones.matmul(&x.logsumexp_cols()));
        for (a, b) in fused.data().iter().zip(composed.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(vec![5, 7], rand_vec(&mut rng, 35, -30.0, 30.0)).unwrap();
        let p = x.softmax_rows();
        let d = p.data();
        for i in 0..5 {
            let s: f64 = d[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_nll_gradient_identity() {
        // d(-log softmax(x)[t]) / dx = softmax(x) - onehot(t)
        let x0 = vec![0.2, -1.3, 0.7, 0.05];
        let x = Tensor::param(vec![1, 4], x0).unwrap();
        let tape = Tape::new();
        let w = tape.watch(&x);
        let p = w.softmax_rows();
        let target = 2usize;
        let picked = p.narrow(1, target, 1);
        let loss = picked.log().neg().sum_all();
        backward(&loss).unwrap();
        let g = x.grad().unwrap();
        let pd = p.to_vec();
        for j in 0..4 {
            let expect = pd[j] - if j == target { 1.0 } else { 0.0 };
            assert!((g[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn shape_mismatch_panics() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 3]);
        let _ = a.add(&b);
    }
}
