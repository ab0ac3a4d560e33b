//! Small residual encoder-decoder backbone.
//!
//! Preserves spatial resolution end to end: an encoder of pooled stages, a
//! mirrored nearest-upsampled decoder with skip connections, a linear 3×3
//! feature head producing the D-channel descriptor map, and a 1×1 sigmoid
//! head producing the vertex detection heatmap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// Channel width per resolution stage; stage 0 runs at full resolution
    /// and each later stage halves it.
    pub channels: Vec<usize>,
    /// Descriptor dimension D of the output feature map.
    pub descriptor_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![12, 24],
            descriptor_dim: 64,
        }
    }
}

impl BackboneConfig {
    /// Number of pooling stages; input sides must divide by `2^depth()`.
    pub fn depth(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::contract("backbone needs at least one stage"));
        }
        if self.channels.iter().any(|&c| c == 0) || self.descriptor_dim == 0 {
            return Err(Error::contract("backbone widths must be positive"));
        }
        Ok(())
    }
}

pub(crate) struct Conv {
    pub w: Tensor,
    pub b: Tensor,
    kernel: usize,
}

impl Conv {
    pub fn new(rng: &mut impl Rng, out_ch: usize, in_ch: usize, kernel: usize) -> Conv {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let w: Vec<f64> = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Conv {
            w: Tensor::param(vec![out_ch, in_ch, kernel, kernel], w).unwrap(),
            b: Tensor::param(vec![out_ch], vec![0.0; out_ch]).unwrap(),
            kernel,
        }
    }

    pub fn forward(&self, x: &Tensor, tape: Option<&Tape>) -> Tensor {
        let (w, b) = match tape {
            Some(t) => (t.watch(&self.w), t.watch(&self.b)),
            None => (self.w.clone(), self.b.clone()),
        };
        x.conv2d(&w, Some(&b), 1, self.kernel / 2)
    }
}

pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv,
    res0: Conv,
    down: Vec<Conv>,
    res: Vec<Conv>,
    up: Vec<Conv>,
    feat: Conv,
    head: Conv,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Backbone> {
        config.validate()?;
        let ch = &config.channels;
        let d = config.depth();
        let stem = Conv::new(rng, ch[0], 3, 3);
        let res0 = Conv::new(rng, ch[0], ch[0], 3);
        let mut down = Vec::new();
        let mut res = Vec::new();
        for i in 1..=d {
            down.push(Conv::new(rng, ch[i], ch[i - 1], 3));
            res.push(Conv::new(rng, ch[i], ch[i], 3));
        }
        let mut up = Vec::new();
        for i in (1..=d).rev() {
            up.push(Conv::new(rng, ch[i - 1], ch[i], 3));
        }
        let feat = Conv::new(rng, config.descriptor_dim, ch[0], 3);
        let head = Conv::new(rng, 1, config.descriptor_dim, 1);
        Ok(Backbone {
            config,
            stem,
            res0,
            down,
            res,
            up,
            feat,
            head,
        })
    }

    /// Named parameters, stable order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |name: String, conv: &Conv| {
            out.push((format!("{name}.w"), conv.w.clone()));
            out.push((format!("{name}.b"), conv.b.clone()));
        };
        push("backbone.stem".into(), &self.stem);
        push("backbone.res0".into(), &self.res0);
        for (i, c) in self.down.iter().enumerate() {
            push(format!("backbone.down{i}"), c);
        }
        for (i, c) in self.res.iter().enumerate() {
            push(format!("backbone.res{}", i + 1), c);
        }
        for (i, c) in self.up.iter().enumerate() {
            push(format!("backbone.up{i}"), c);
        }
        push("backbone.feat".into(), &self.feat);
        push("backbone.head".into(), &self.head);
        out
    }

    /// `[3, H, W]` image → (`[D, H, W]` features, `[H, W]` heatmap in (0,1)).
    pub fn forward(&self, image: &Tensor, tape: Option<&Tape>) -> Result<(Tensor, Tensor)> {
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(Error::contract(format!(
                "backbone expects a [3, H, W] image, got {:?}",
                image.shape()
            )));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let d = self.config.depth();
        let div = 1usize << d;
        if h % div != 0 || w % div != 0 {
            return Err(Error::contract(format!(
                "image sides {h}x{w} must divide by 2^{d}"
            )));
        }
        let mut x = self.stem.forward(image, tape).relu();
        x = x.add(&self.res0.forward(&x, tape).relu());
        let mut skips = vec![x.clone()];
        for i in 0..d {
            x = x.maxpool2d(2, 2);
            x = self.down[i].forward(&x, tape).relu();
            x = x.add(&self.res[i].forward(&x, tape).relu());
            skips.push(x.clone());
        }
        for (j, i) in (1..=d).rev().enumerate() {
            x = x.upsample_nearest2();
            x = self.up[j].forward(&x, tape).relu();
            x = x.add(&skips[i - 1]);
        }
        let features = self.feat.forward(&x, tape);
        let logits = self.head.forward(&features, tape);
        let heatmap = logits.reshape(vec![h, w]).sigmoid();
        Ok((features, heatmap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Backbone {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Backbone::new(
            BackboneConfig {
                channels: vec![4, 6],
                descriptor_dim: 8,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn shapes_and_range_on_zero_image() {
        let bb = tiny();
        let img = Tensor::zeros(vec![3, 16, 12]);
        let (f, y) = bb.forward(&img, None).unwrap();
        assert_eq!(f.shape(), &[8, 16, 12]);
        assert_eq!(y.shape(), &[16, 12]);
        for &v in y.data().iter() {
            assert!(v.is_finite() && v > 0.0 && v < 1.0);
        }
        for &v in f.data().iter() {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn rejects_bad_divisibility() {
        let bb = tiny();
        let img = Tensor::zeros(vec![3, 15, 16]);
        assert!(matches!(
            bb.forward(&img, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn deterministic_given_fixed_seed_and_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let img = Tensor::from_vec(
            vec![3, 8, 8],
            (0..3 * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let run = || {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            let bb = Backbone::new(
                BackboneConfig {
                    channels: vec![4],
                    descriptor_dim: 6,
                },
                &mut r,
            )
            .unwrap();
            let (f, y) = bb.forward(&img, None).unwrap();
            (f.to_vec(), y.to_vec())
        };
        let (f1, y1) = run();
        let (f2, y2) = run();
        assert!(f1.iter().zip(&f2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(y1.iter().zip(&y2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
