//! Convolutional feature extractor and the global / pose-guided poolings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{conv_multiply_adds, ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::heatmaps::NUM_GROUPS;
use crate::params::{push_batch_norm, Branch, Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels per convolution block; the last one is `c`.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    /// Batch normalization between each convolution and its rectifier.
    pub batch_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { channels: vec![16, 32, 64, 64], strides: vec![2, 2, 2, 1], kernel: 3, batch_norm: true }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::config("backbone needs one stride per convolution block"));
        }
        if self.kernel % 2 == 0 || self.strides.iter().any(|&s| s == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("backbone kernel must be odd, strides and channels positive"));
        }
        if self.out_channels() % NUM_GROUPS != 0 {
            return Err(Error::config(format!("feature channels {} not divisible by {NUM_GROUPS} part groups", self.out_channels())));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    fn geometries(&self, height: usize, width: usize) -> Vec<(ConvGeometry, usize)> {
        let (mut c, mut h, mut w) = (3, height, width);
        let mut out = Vec::new();
        for (&co, &s) in self.channels.iter().zip(&self.strides) {
            let g = ConvGeometry { in_channels: c, height: h, width: w, kernel: self.kernel, stride: s, padding: self.kernel / 2 };
            (c, h, w) = (co, g.out_height(), g.out_width());
            out.push((g, co));
        }
        out
    }

    /// Feature-map size `(h, w)` for an input image size.
    pub fn feature_size(&self, height: usize, width: usize) -> (usize, usize) {
        let (g, _) = *self.geometries(height, width).last().expect("non-empty");
        (g.out_height(), g.out_width())
    }

    /// Multiply-adds of one forward pass over a single image.
    pub fn multiply_adds(&self, height: usize, width: usize) -> u64 {
        self.geometries(height, width).iter().map(|(g, co)| conv_multiply_adds(g, *co)).sum()
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let mut cin = 3;
        for (i, &co) in self.channels.iter().enumerate() {
            let fan_in = cin * self.kernel * self.kernel;
            let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let w = Tensor::from_fn(&[co, cin, self.kernel, self.kernel], |_| T::lit(he.sample(rng)));
            store.push(format!("backbone.conv{i}.weight"), Branch::Backbone, true, w);
            store.push(format!("backbone.conv{i}.bias"), Branch::Backbone, true, Tensor::from_fn(&[co], |_| T::lit(rng.random_range(0.0..0.01))));
            if self.batch_norm {
                push_batch_norm(store, &format!("backbone.bn{i}"), Branch::Backbone, co);
            }
            cin = co;
        }
    }
}

/// `[N, 3, H, W]` images to `[N, c, h, w]` feature maps: conv (+ BN) + ReLU
/// blocks.
pub fn backbone_forward<T: Scalar>(g: &mut Graph<'_, T>, config: &BackboneConfig, images: Var, image_size: (usize, usize)) -> Result<Var> {
    let shape = g.tape.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != 3 || (shape[2], shape[3]) != image_size {
        return Err(Error::shape(format!("expected [N, 3, {}, {}] images, got {shape:?}", image_size.0, image_size.1)));
    }
    let mut x = images;
    for (i, &s) in config.strides.iter().enumerate() {
        let w = g.param(&format!("backbone.conv{i}.weight"))?;
        let b = g.param(&format!("backbone.conv{i}.bias"))?;
        let mut y = g.tape.conv2d(x, w, b, s, config.kernel / 2);
        if config.batch_norm {
            y = g.batch_norm(y, &format!("backbone.bn{i}"))?;
        }
        x = g.tape.relu(y);
    }
    Ok(x)
}

/// `f_G`: spatial mean per channel, `[N, c, h, w] -> [N, c]`.
pub fn global_pool<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Var {
    tape.spatial_mean(f)
}

/// Part features `f_lk = g(F ⊙ H_k)` as `[N, K, c]`, and their mean `f_L`
/// as `[N, c]`. `heatmaps` is `[N, K, h, w]`.
pub fn part_pool<T: Scalar>(tape: &mut Tape<T>, f: Var, heatmaps: Var) -> Result<(Var, Var)> {
    let (fs, hs) = (tape.shape(f).to_vec(), tape.shape(heatmaps).to_vec());
    if fs.len() != 4 || hs.len() != 4 || fs[0] != hs[0] || fs[2..] != hs[2..] {
        return Err(Error::shape(format!("heatmaps {hs:?} do not match feature map {fs:?}")));
    }
    let scale = T::one() / T::from_usize_lossy(fs[2] * fs[3]);
    let parts = tape.weighted_spatial_pool(f, heatmaps, scale);
    let mean = tape.mean_axis(parts, 1);
    Ok((parts, mean))
}
