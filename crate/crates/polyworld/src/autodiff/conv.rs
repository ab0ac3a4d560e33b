//! Image-shaped primitives: 2-D convolution, max pooling, nearest-neighbor
//! upsampling, and integer-index pixel gathering.
//!
//! Layout is channel-major: `[C, H, W]` row-major, weights `[O, C, kh, kw]`.

use rayon::prelude::*;

use super::Tensor;

#[inline]
fn ceil_div_nonneg(a: i64, b: i64) -> i64 {
    if a <= 0 {
        0
    } else {
        (a + b - 1) / b
    }
}

/// Valid output range `[lo, hi)` such that `o*s + k - p` lands in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let (s, k, p, in_len) = (s as i64, k as i64, p as i64, in_len as i64);
    let lo = ceil_div_nonneg(p - k, s);
    let hi = ceil_div_nonneg(in_len + p - k, s).min(out_len as i64);
    (lo.min(out_len as i64) as usize, hi.max(lo) as usize)
}

impl Tensor {
    /// 2-D convolution of a `[C, H, W]` input with `[O, C, kh, kw]` weights.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Tensor {
        assert_eq!(self.shape().len(), 3, "contract violation: conv2d input is [C,H,W]");
        assert_eq!(
            weight.shape().len(),
            4,
            "contract violation: conv2d weight is [O,C,kh,kw]"
        );
        assert!(stride >= 1, "contract violation: stride must be >= 1");
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (o_ch, c_w, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        assert_eq!(c_in, c_w, "contract violation: conv2d channel mismatch");
        if let Some(b) = bias {
            assert_eq!(b.numel(), o_ch, "contract violation: conv2d bias length");
        }
        assert!(
            h + 2 * padding >= kh && w + 2 * padding >= kw,
            "contract violation: kernel larger than padded input"
        );
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let x_ref = self.data();
        let x: &[f64] = &x_ref;
        let wt_ref = weight.data();
        let wt: &[f64] = &wt_ref;
        let bs: Option<Vec<f64>> = bias.map(|b| b.to_vec());
        let mut data = vec![0.0; o_ch * oh * ow];
        data.par_chunks_mut(oh * ow).enumerate().for_each(|(o, out)| {
            if let Some(b) = &bs {
                out.fill(b[o]);
            }
            for c in 0..c_in {
                let xc = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    let (r_lo, r_hi) = valid_range(oh, h, stride, ky, padding);
                    for kx in 0..kw {
                        let wv = wt[((o * c_in + c) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (q_lo, q_hi) = valid_range(ow, w, stride, kx, padding);
                        if q_lo >= q_hi {
                            continue;
                        }
                        for r in r_lo..r_hi {
                            let iy = r * stride + ky - padding;
                            let xrow = &xc[iy * w..(iy + 1) * w];
                            let orow = &mut out[r * ow..(r + 1) * ow];
                            if stride == 1 {
                                // Contiguous axpy: ix = q + kx - padding.
                                let base = q_lo + kx - padding;
                                let xs = &xrow[base..base + (q_hi - q_lo)];
                                for (ov, &xv) in orow[q_lo..q_hi].iter_mut().zip(xs) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for q in q_lo..q_hi {
                                    let ix = q * stride + kx - padding;
                                    orow[q] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        });
        drop(x_ref);
        drop(wt_ref);

        let mut inputs: Vec<&Tensor> = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let tape = Tensor::merge_tapes(&inputs);
        let out = Tensor::result(vec![o_ch, oh, ow], data, tape);
        if out.tape.is_some() {
            let xi = self.inner();
            let wi = weight.inner();
            let bi = bias.map(|b| b.inner());
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                let g: &[f64] = &g;
                let x_ref = xi.data.borrow();
                let x: &[f64] = &x_ref;
                let wt_ref = wi.data.borrow();
                let wt: &[f64] = &wt_ref;
                // dX: every input channel gathers from all output channels.
                xi.accumulate(|dx| {
                    dx.par_chunks_mut(h * w).enumerate().for_each(|(c, dxc)| {
                        for o in 0..o_ch {
                            let go = &g[o * oh * ow..(o + 1) * oh * ow];
                            for ky in 0..kh {
                                let (r_lo, r_hi) = valid_range(oh, h, stride, ky, padding);
                                for kx in 0..kw {
                                    let wv = wt[((o * c_in + c) * kh + ky) * kw + kx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let (q_lo, q_hi) = valid_range(ow, w, stride, kx, padding);
                                    if q_lo >= q_hi {
                                        continue;
                                    }
                                    for r in r_lo..r_hi {
                                        let iy = r * stride + ky - padding;
                                        let grow = &go[r * ow..(r + 1) * ow];
                                        let drow = &mut dxc[iy * w..(iy + 1) * w];
                                        if stride == 1 {
                                            let base = q_lo + kx - padding;
                                            let ds = &mut drow[base..base + (q_hi - q_lo)];
                                            for (dv, &gv) in
                                                ds.iter_mut().zip(&grow[q_lo..q_hi])
                                            {
                                                *dv += wv * gv;
                                            }
                                        } else {
                                            for q in q_lo..q_hi {
                                                let ix = q * stride + kx - padding;
                                                drow[ix] += wv * grow[q];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                });
                // dW: each output channel owns its weight slice.
                wi.accumulate(|dw| {
                    dw.par_chunks_mut(c_in * kh * kw)
                        .enumerate()
                        .for_each(|(o, dwo)| {
                            let go = &g[o * oh * ow..(o + 1) * oh * ow];
                            for c in 0..c_in {
                                let xc = &x[c * h * w..(c + 1) * h * w];
                                for ky in 0..kh {
                                    let (r_lo, r_hi) = valid_range(oh, h, stride, ky, padding);
                                    for kx in 0..kw {
                                        let (q_lo, q_hi) =
                                            valid_range(ow, w, stride, kx, padding);
                                        if q_lo >= q_hi {
                                            continue;
                                        }
                                        let mut s = 0.0;
                                        for r in r_lo..r_hi {
                                            let iy = r * stride + ky - padding;
                                            let xrow = &xc[iy * w..(iy + 1) * w];
                                            let grow = &go[r * ow..(r + 1) * ow];
                                            if stride == 1 {
                                                let base = q_lo + kx - padding;
                                                let xs = &xrow[base..base + (q_hi - q_lo)];
                                                for (&gv, &xv) in
                                                    grow[q_lo..q_hi].iter().zip(xs)
                                                {
                                                    s += gv * xv;
                                                }
                                            } else {
                                                for q in q_lo..q_hi {
                                                    let ix = q * stride + kx - padding;
                                                    s += grow[q] * xrow[ix];
                                                }
                                            }
                                        }
                                        dwo[(c * kh + ky) * kw + kx] += s;
                                    }
                                }
                            }
                        });
                });
                if let Some(bi) = &bi {
                    bi.accumulate(|db| {
                        for o in 0..o_ch {
                            db[o] += g[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                        }
                    });
                }
            });
        }
        out
    }

    /// Max pooling over `kernel`×`kernel` windows; ties keep the first
    /// element in scan order so the backward routing is deterministic.
    pub fn maxpool2d(&self, kernel: usize, stride: usize) -> Tensor {
        assert_eq!(self.shape().len(), 3, "contract violation: maxpool2d input is [C,H,W]");
        assert!(kernel >= 1 && stride >= 1, "contract violation: bad pool config");
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert!(h >= kernel && w >= kernel, "contract violation: pool kernel too large");
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let x = self.data();
        let mut data = vec![0.0; c_in * oh * ow];
        let mut argmax = vec![0usize; c_in * oh * ow];
        for c in 0..c_in {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0usize;
                    for ky in 0..kernel {
                        let iy = r * stride + ky;
                        for kx in 0..kernel {
                            let ix = q * stride + kx;
                            let v = xc[iy * w + ix];
                            if v > best {
                                best = v;
                                arg = iy * w + ix;
                            }
                        }
                    }
                    data[(c * oh + r) * ow + q] = best;
                    argmax[(c * oh + r) * ow + q] = c * h * w + arg;
                }
            }
        }
        drop(x);
        let out = Tensor::result(vec![c_in, oh, ow], data, self.tape.clone());
        if out.tape.is_some() {
            let xi = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                xi.accumulate(|dx| {
                    for (i, &src) in argmax.iter().enumerate() {
                        dx[src] += g[i];
                    }
                });
            });
        }
        out
    }

    /// Nearest-neighbor 2× upsampling of a `[C, H, W]` tensor.
    pub fn upsample_nearest2(&self) -> Tensor {
        assert_eq!(self.shape().len(), 3, "contract violation: upsample input is [C,H,W]");
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.data();
        let mut data = vec![0.0; c_in * oh * ow];
        for c in 0..c_in {
            for r in 0..oh {
                let src = &x[(c * h + r / 2) * w..(c * h + r / 2 + 1) * w];
                let dst = &mut data[(c * oh + r) * ow..(c * oh + r + 1) * ow];
                for q in 0..ow {
                    dst[q] = src[q / 2];
                }
            }
        }
        drop(x);
        let out = Tensor::result(vec![c_in, oh, ow], data, self.tape.clone());
        if out.tape.is_some() {
            let xi = self.inner();
            let oi = out.inner();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                xi.accumulate(|dx| {
                    for c in 0..c_in {
                        for r in 0..oh {
                            for q in 0..ow {
                                dx[(c * h + r / 2) * w + q / 2] += g[(c * oh + r) * ow + q];
                            }
                        }
                    }
                });
            });
        }
        out
    }

    /// Gather per-position feature columns: `[C, H, W]` × N integer
    /// coordinates → `[N, C]`. The backward pass scatters gradients back to
    /// the sampled cells (duplicates accumulate).
    pub fn gather_pixels(&self, coords: &[(usize, usize)]) -> Tensor {
        assert_eq!(self.shape().len(), 3, "contract violation: gather input is [C,H,W]");
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        for &(r, q) in coords {
            assert!(
                r < h && q < w,
                "contract violation: pixel ({r},{q}) outside {h}x{w}"
            );
        }
        let x = self.data();
        let n = coords.len();
        let mut data = vec![0.0; n * c_in];
        for (i, &(r, q)) in coords.iter().enumerate() {
            for c in 0..c_in {
                data[i * c_in + c] = x[(c * h + r) * w + q];
            }
        }
        drop(x);
        let out = Tensor::result(vec![n, c_in], data, self.tape.clone());
        if out.tape.is_some() {
            let xi = self.inner();
            let oi = out.inner();
            let coords = coords.to_vec();
            Tensor::record(&out.tape, move || {
                let Some(g) = oi.grad_read() else { return };
                xi.accumulate(|dx| {
                    for (i, &(r, q)) in coords.iter().enumerate() {
                        for c in 0..c_in {
                            dx[(c * h + r) * w + q] += g[i * c_in + c];
                        }
                    }
                });
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::check::{assert_grad_close, finite_difference};
    use super::super::{backward, Tape, Tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(shape: Vec<usize>, x0: Vec<f64>, f: impl Fn(&Tensor) -> Tensor) {
        let x = Tensor::param(shape.clone(), x0.clone()).unwrap();
        let tape = Tape::new();
        let loss = f(&tape.watch(&x));
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

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv2d_matches_hand_case() {
        // 1 channel, 3x3 input, identity-ish 1x1 kernel with scale 2.
        let x = Tensor::from_vec(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = x.conv2d(&w, None, 1, 0);
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.to_vec(), (1..=9).map(|v| 2.0 * f64::from(v)).collect::<Vec<_>>());
    }

    #[test]
    fn conv2d_padding_and_stride_shapes() {
        let x = Tensor::zeros(vec![2, 8, 6]);
        let w = Tensor::zeros(vec![4, 2, 3, 3]);
        assert_eq!(x.conv2d(&w, None, 1, 1).shape(), &[4, 8, 6]);
        assert_eq!(x.conv2d(&w, None, 2, 1).shape(), &[4, 4, 3]);
    }

    #[test]
    fn conv2d_fd_input_weight_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w0 = rand_vec(&mut rng, 2 * 2 * 3 * 3);
        let b0 = rand_vec(&mut rng, 2);
        let x0 = rand_vec(&mut rng, 2 * 5 * 4);

        // d/dx
        let w = Tensor::from_vec(vec![2, 2, 3, 3], w0.clone()).unwrap();
        let b = Tensor::from_vec(vec![2], b0.clone()).unwrap();
        fd_check(vec![2, 5, 4], x0.clone(), |x| {
            x.conv2d(&w, Some(&b), 1, 1).sigmoid().sum_all()
        });
        // strided
        fd_check(vec![2, 5, 4], x0.clone(), |x| {
            x.conv2d(&w, Some(&b), 2, 1).sigmoid().sum_all()
        });
        // d/dw
        let xc = Tensor::from_vec(vec![2, 5, 4], x0.clone()).unwrap();
        fd_check(vec![2, 2, 3, 3], w0, |w| {
            xc.conv2d(w, Some(&b), 1, 1).sigmoid().sum_all()
        });
        // d/db
        fd_check(vec![2], b0, |b| {
            xc.conv2d(&w, Some(b), 2, 0).sigmoid().sum_all()
        });
    }

    #[test]
    fn maxpool_upsample_gather_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x0 = rand_vec(&mut rng, 2 * 4 * 4);
        fd_check(vec![2, 4, 4], x0.clone(), |x| {
            x.maxpool2d(2, 2).sigmoid().sum_all()
        });
        fd_check(vec![2, 4, 4], x0.clone(), |x| {
            x.upsample_nearest2().sigmoid().sum_all()
        });
        fd_check(vec![2, 4, 4], x0, |x| {
            x.gather_pixels(&[(0, 0), (3, 2), (3, 2), (1, 3)])
                .sigmoid()
                .sum_all()
        });
    }

    #[test]
    fn gather_pixels_returns_feature_columns() {
        let x = Tensor::from_vec(vec![2, 2, 2], vec![
            1.0, 2.0, 3.0, 4.0, // channel 0
            5.0, 6.0, 7.0, 8.0, // channel 1
        ])
        .unwrap();
        let g = x.gather_pixels(&[(0, 0), (1, 1), (1, 1)]);
        assert_eq!(g.shape(), &[3, 2]);
        assert_eq!(g.to_vec(), vec![1.0, 5.0, 4.0, 8.0, 4.0, 8.0]);
    }

    #[test]
    fn maxpool_tie_breaks_to_first_in_scan_order() {
        let x = Tensor::param(vec![1, 2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        let tape = Tape::new();
        let y = tape.watch(&x).maxpool2d(2, 2);
        assert_eq!(y.to_vec(), vec![3.0]);
        backward(&y.sum_all()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }
}
