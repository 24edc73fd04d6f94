//! Patch-level conditional discriminator.
//!
//! The source image and a segmentation map are concatenated on the channel
//! axis and passed through five 4×4 convolutions. The first four are followed
//! by a leaky ReLU; the last one produces a single-channel grid of patch
//! scores, squashed by a logistic function unless disabled.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, leaky_relu, Conv2d, ParamStore};
use crate::rng::SeededRng;
use crate::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub paddings: Vec<usize>,
    pub leaky_slope: f64,
    pub in_channels: usize,
    pub sigmoid: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 512, 1],
            kernel: 4,
            strides: vec![2, 2, 2, 2, 1],
            paddings: vec![2, 2, 2, 2, 2],
            leaky_slope: 0.2,
            in_channels: 1 + NUM_CLASSES,
            sigmoid: true,
        }
    }
}

impl DiscriminatorConfig {
    /// Alternative stride schedule with the last two layers at stride 1.
    pub fn pix2pix_strides() -> Self {
        Self {
            strides: vec![2, 2, 2, 1, 1],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.strides.len() != n || self.paddings.len() != n {
            return Err(Error::InvalidConfig(
                "discriminator channels, strides and paddings must have equal, non-zero length".into(),
            ));
        }
        if self.kernel == 0 || self.strides.contains(&0) || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("kernel, strides and channels must be positive".into()));
        }
        Ok(())
    }

    /// Output side for an input side `n`: `floor((n + 2p - k) / s) + 1` per layer.
    pub fn output_side(&self, mut n: usize) -> Option<usize> {
        for (&s, &p) in self.strides.iter().zip(&self.paddings) {
            let padded = n + 2 * p;
            if padded < self.kernel {
                return None;
            }
            n = (padded - self.kernel) / s + 1;
        }
        Some(n)
    }

    /// Side of the input window seen by one output score.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for &s in &self.strides {
            rf += (self.kernel - 1) * jump;
            jump *= s;
        }
        rf
    }
}

#[derive(Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    store: ParamStore,
    layers: Vec<Conv2d>,
}

pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64, device: &Device) -> Result<Discriminator> {
    cfg.validate()?;
    let mut rng = SeededRng::derived(seed, 0xD15C);
    let mut store = ParamStore::new();
    let mut layers = Vec::with_capacity(cfg.channels.len());
    let mut in_ch = cfg.in_channels;
    for (k, &out_ch) in cfg.channels.iter().enumerate() {
        layers.push(Conv2d::new(
            &mut store,
            &format!("conv{}", k + 1),
            in_ch,
            out_ch,
            cfg.kernel,
            cfg.strides[k],
            cfg.paddings[k],
            true,
            &mut rng,
            device,
        )?);
        in_ch = out_ch;
    }
    Ok(Discriminator { cfg: cfg.clone(), store, layers })
}

impl Discriminator {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn layer_weight(&self, k: usize) -> &Tensor {
        self.layers[k].weight()
    }

    /// Runs the stack on an already concatenated `N × (1+C) × H × W` input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if k < last {
                h = leaky_relu(&h, self.cfg.leaky_slope)?;
            }
        }
        if self.cfg.sigmoid {
            h = nn::sigmoid(&h)?;
        }
        Ok(h)
    }

    /// Patch scores for `(image, segmentation map)` pairs: `images` is
    /// `N × 1 × H × W`, `segmaps` is `N × C × H × W`.
    pub fn score(&self, images: &Tensor, segmaps: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = images.dims4()?;
        let (n2, c, h2, w2) = segmaps.dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(shape_err((n, h, w), (n2, h2, w2)));
        }
        let expect = self.cfg.in_channels;
        if images.dim(1)? + c != expect {
            return Err(shape_err(expect, images.dim(1)? + c));
        }
        self.forward(&Tensor::cat(&[images, segmaps], 1)?)
    }
}

/// Mean of a patch-score map, the scalar decision statistic.
pub fn decision(scores: &Tensor) -> Result<f32> {
    Ok(scores.mean_all()?.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_arithmetic_default_schedule() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.output_side(128), Some(10));
        assert_eq!(cfg.receptive_field(), 94);
        assert_eq!(DiscriminatorConfig::pix2pix_strides().output_side(128), Some(19));
    }

    #[test]
    fn zero_weights_score_half() {
        let dev = Device::Cpu;
        let d = build_discriminator(&DiscriminatorConfig::default(), 0, &dev).unwrap();
        for p in d.params().params() {
            p.var.set(&p.var.zeros_like().unwrap()).unwrap();
        }
        let img = Tensor::rand(0f32, 1f32, (1, 1, 32, 32), &dev).unwrap();
        let seg = Tensor::rand(0f32, 1f32, (1, 4, 32, 32), &dev).unwrap();
        let s = d.score(&img, &seg).unwrap();
        let v = s.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn score_rejects_mismatched_pairs() {
        let dev = Device::Cpu;
        let d = build_discriminator(&DiscriminatorConfig::default(), 0, &dev).unwrap();
        let img = Tensor::zeros((1, 1, 32, 32), candle_core::DType::F32, &dev).unwrap();
        let seg = Tensor::zeros((1, 4, 16, 16), candle_core::DType::F32, &dev).unwrap();
        assert!(d.score(&img, &seg).is_err());
        let seg = Tensor::zeros((1, 3, 32, 32), candle_core::DType::F32, &dev).unwrap();
        assert!(d.score(&img, &seg).is_err());
    }
}
