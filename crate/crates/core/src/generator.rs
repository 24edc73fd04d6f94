//! Nested U-shape generator with dense skip connections.
//!
//! Node `(i, j)` sits at level `i` (spatial size `side / 2^i`) and column `j`.
//! Column-zero nodes form the encoder: `x(i,0) = block(pool(x(i-1,0)))`.
//! Every other node concatenates all earlier outputs on its level with the
//! up-sampled output of node `(i+1, j-1)`:
//! `x(i,j) = block([x(i,0), …, x(i,j-1), up(x(i+1,j-1))])`.
//! A 1×1 convolution on `x(0, depth-1)` followed by a channel softmax gives the
//! class distribution of every pixel.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, ConvTranspose2x, ParamStore};
use crate::rng::SeededRng;
use crate::{CANVAS, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Channel-preserving bilinear interpolation.
    #[default]
    Bilinear,
    /// Learned 2×2 transposed convolution mapping `f(i+1)` to `f(i)` channels.
    Transposed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub filters: Vec<usize>,
    pub in_channels: usize,
    pub classes: usize,
    pub input_size: usize,
    #[serde(default)]
    pub upsample: UpsampleMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            filters: vec![64, 128, 256, 512, 1024],
            in_channels: 1,
            classes: NUM_CLASSES,
            input_size: CANVAS,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

impl GeneratorConfig {
    pub fn depth(&self) -> usize {
        self.filters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() {
            return Err(Error::InvalidConfig("generator needs at least one level".into()));
        }
        if self.filters.windows(2).any(|w| w[0] >= w[1]) || self.filters[0] == 0 {
            return Err(Error::InvalidConfig(format!(
                "filters {:?} must be strictly increasing and positive",
                self.filters
            )));
        }
        let factor = 1usize << (self.depth() - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::InvalidConfig(format!(
                "input size {} not divisible by {factor}",
                self.input_size
            )));
        }
        if self.in_channels == 0 || self.classes < 2 {
            return Err(Error::InvalidConfig("need ≥1 input channel and ≥2 classes".into()));
        }
        Ok(())
    }

    /// Spatial side length of the feature maps at `level`.
    pub fn side_at(&self, level: usize) -> usize {
        self.input_size >> level
    }
}

/// Channel counts of one nested block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodePlan {
    pub level: usize,
    pub column: usize,
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
}

/// Channel plan of node `(level, column)`.
///
/// Max-pooling keeps `f(i-1)` channels on the way down; bilinear up-sampling
/// keeps `f(i+1)` channels on the way up. With transposed up-sampling the
/// up-sampled tensor carries `f(i)` channels instead.
pub fn channel_plan(level: usize, column: usize, cfg: &GeneratorConfig) -> Result<NodePlan> {
    let depth = cfg.depth();
    if level >= depth || column >= depth - level {
        return Err(Error::NodeOutOfRange { level, column, depth });
    }
    let f = &cfg.filters;
    let in_ch = match (level, column) {
        (0, 0) => cfg.in_channels,
        (i, 0) => f[i - 1],
        (i, j) => {
            let up = match cfg.upsample {
                UpsampleMode::Bilinear => f[i + 1],
                UpsampleMode::Transposed => f[i],
            };
            f[i] * j + up
        }
    };
    Ok(NodePlan {
        level,
        column,
        in_ch,
        mid_ch: f[level],
        out_ch: f[level],
    })
}

/// All nodes in evaluation order (column by column, top to bottom).
pub fn node_order(depth: usize) -> Vec<(usize, usize)> {
    (0..depth)
        .flat_map(|j| (0..depth - j).map(move |i| (i, j)))
        .collect()
}

/// Two stages of 3×3 convolution, batch normalization and ReLU.
#[derive(Clone, Debug)]
struct NestedBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl NestedBlock {
    fn new(store: &mut ParamStore, name: &str, plan: &NodePlan, rng: &mut SeededRng, dev: &Device) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), plan.in_ch, plan.mid_ch, 3, 1, 1, true, rng, dev)?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), plan.mid_ch, dev)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), plan.mid_ch, plan.out_ch, 3, 1, 1, true, rng, dev)?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), plan.out_ch, dev)?;
        Ok(Self { conv1, bn1, conv2, bn2 })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn1.forward_relu(&self.conv1.forward(x)?, train)?;
        self.bn2.forward_relu(&self.conv2.forward(&x)?, train)
    }
}

#[derive(Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    /// Indexed `[level][column]`.
    blocks: Vec<Vec<NestedBlock>>,
    /// Indexed `[level]` for levels `0..depth-1`; empty in bilinear mode.
    up_convs: Vec<ConvTranspose2x>,
    head: Conv2d,
    plans: Vec<NodePlan>,
}

pub fn build_generator(cfg: &GeneratorConfig, seed: u64, device: &Device) -> Result<Generator> {
    cfg.validate()?;
    let depth = cfg.depth();
    let mut rng = SeededRng::derived(seed, 0x6E6E);
    let mut store = ParamStore::new();
    let mut plans = Vec::new();
    let mut blocks: Vec<Vec<NestedBlock>> = (0..depth).map(|_| Vec::new()).collect();
    for (i, j) in node_order(depth) {
        let plan = channel_plan(i, j, cfg)?;
        check_node_inputs(cfg, &plan)?;
        blocks[i].push(NestedBlock::new(&mut store, &format!("x{i}_{j}"), &plan, &mut rng, device)?);
        plans.push(plan);
    }
    let mut up_convs = Vec::new();
    if cfg.upsample == UpsampleMode::Transposed {
        for i in 0..depth - 1 {
            up_convs.push(ConvTranspose2x::new(
                &mut store,
                &format!("up{i}"),
                cfg.filters[i + 1],
                cfg.filters[i],
                &mut rng,
                device,
            )?);
        }
    }
    let head = Conv2d::new(&mut store, "head", cfg.filters[0], cfg.classes, 1, 1, 0, true, &mut rng, device)?;
    Ok(Generator {
        cfg: cfg.clone(),
        store,
        blocks,
        up_convs,
        head,
        plans,
    })
}

/// Checks that every tensor concatenated into a node has the node's spatial
/// size and that the channel total matches the plan.
fn check_node_inputs(cfg: &GeneratorConfig, plan: &NodePlan) -> Result<()> {
    let (i, j) = (plan.level, plan.column);
    let side = cfg.side_at(i);
    let mut parts: Vec<(usize, usize)> = Vec::new();
    if j == 0 {
        if i == 0 {
            parts.push((cfg.in_channels, cfg.input_size));
        } else {
            parts.push((cfg.filters[i - 1], cfg.side_at(i - 1) / 2));
        }
    } else {
        for _ in 0..j {
            parts.push((cfg.filters[i], side));
        }
        let up_ch = match cfg.upsample {
            UpsampleMode::Bilinear => cfg.filters[i + 1],
            UpsampleMode::Transposed => cfg.filters[i],
        };
        parts.push((up_ch, cfg.side_at(i + 1) * 2));
    }
    if parts.iter().any(|&(_, s)| s != side) {
        return Err(Error::InvalidConfig(format!("node ({i},{j}) inputs disagree on spatial size")));
    }
    let total: usize = parts.iter().map(|&(c, _)| c).sum();
    if total != plan.in_ch {
        return Err(shape_err(plan.in_ch, total));
    }
    Ok(())
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn plans(&self) -> &[NodePlan] {
        &self.plans
    }

    pub fn node_count(&self) -> usize {
        self.plans.len()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn upsample(&self, x: &Tensor, from_level: usize) -> Result<Tensor> {
        match self.cfg.upsample {
            UpsampleMode::Bilinear => nn::upsample_bilinear2x(x),
            UpsampleMode::Transposed => self.up_convs[from_level - 1].forward(x),
        }
    }

    /// Per-pixel class distribution for an `N × 1 × S × S` batch. In training
    /// mode batch normalization uses batch statistics and updates its
    /// running estimates.
    pub fn forward_t(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.cfg.input_size;
        if (c, h, w) != (self.cfg.in_channels, s, s) {
            return Err(shape_err((self.cfg.in_channels, s, s), (c, h, w)));
        }
        let depth = self.cfg.depth();
        let mut outs: Vec<Vec<Tensor>> = (0..depth).map(|_| Vec::new()).collect();
        for (i, j) in node_order(depth) {
            let input = if j == 0 {
                if i == 0 {
                    images.clone()
                } else {
                    outs[i - 1][0].max_pool2d(2)?
                }
            } else {
                let mut parts: Vec<Tensor> = outs[i][..j].to_vec();
                parts.push(self.upsample(&outs[i + 1][j - 1], i + 1)?);
                Tensor::cat(&parts, 1)?
            };
            let y = self.blocks[i][j].forward(&input, train)?;
            outs[i].push(y);
        }
        let logits = self.head.forward(&outs[0][depth - 1])?;
        nn::softmax_channels(&logits)
    }

    /// Inference-mode forward.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.forward_t(images, false)
    }

    /// Forward on a single `S × S` image given as a flat row-major slice.
    pub fn forward_image(&self, image: &[f32]) -> Result<ProbabilityMap> {
        let s = self.cfg.input_size;
        if image.len() != s * s * self.cfg.in_channels {
            return Err(shape_err(s * s * self.cfg.in_channels, image.len()));
        }
        let x = Tensor::from_slice(image, (1, self.cfg.in_channels, s, s), self.head.weight().device())?;
        let p = self.forward(&x)?;
        ProbabilityMap::from_tensor(&p.squeeze(0)?)
    }
}

/// `C × H × W` class probabilities of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (classes, height, width) = t.dims3()?;
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self {
            classes,
            height,
            width,
            values,
        })
    }

    /// Largest deviation of a per-pixel channel sum from one.
    pub fn max_simplex_error(&self) -> f32 {
        let plane = self.height * self.width;
        (0..plane)
            .map(|p| {
                let s: f32 = (0..self.classes).map(|c| self.values[c * plane + p]).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f32::max)
    }

    /// Per-pixel most probable class (ties to the lowest index).
    pub fn argmax(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.values[c * plane + p] > self.values[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            filters: vec![2, 3, 4],
            input_size: 8,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn plan_examples() {
        let cfg = GeneratorConfig::default();
        let p = channel_plan(0, 0, &cfg).unwrap();
        assert_eq!((p.in_ch, p.mid_ch, p.out_ch), (1, 64, 64));
        let p = channel_plan(2, 0, &cfg).unwrap();
        assert_eq!((p.in_ch, p.mid_ch, p.out_ch), (128, 256, 256));
        let p = channel_plan(0, 4, &cfg).unwrap();
        assert_eq!((p.in_ch, p.mid_ch, p.out_ch), (384, 64, 64));
        assert_eq!(channel_plan(1, 2, &cfg).unwrap().in_ch, 512);
    }

    #[test]
    fn plan_rejects_outside_grid() {
        let cfg = GeneratorConfig::default();
        assert!(matches!(channel_plan(5, 0, &cfg), Err(Error::NodeOutOfRange { .. })));
        assert!(matches!(channel_plan(1, 4, &cfg), Err(Error::NodeOutOfRange { .. })));
        assert!(channel_plan(4, 0, &cfg).is_ok());
    }

    #[test]
    fn transposed_plan_matches_printed_arithmetic() {
        let cfg = GeneratorConfig {
            upsample: UpsampleMode::Transposed,
            ..GeneratorConfig::default()
        };
        assert_eq!(channel_plan(1, 2, &cfg).unwrap().in_ch, 128 * 3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        assert!(cfg.validate().is_ok());
        cfg.filters = vec![4, 3, 5];
        assert!(cfg.validate().is_err());
        cfg = tiny();
        cfg.input_size = 6;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tiny_forward_shapes_and_simplex() {
        let dev = Device::Cpu;
        let cfg = tiny();
        let g = build_generator(&cfg, 1, &dev).unwrap();
        assert_eq!(g.node_count(), 6);
        let x = Tensor::rand(0f32, 1f32, (2, 1, 8, 8), &dev).unwrap();
        let p = g.forward(&x).unwrap();
        assert_eq!(p.dims(), &[2, 4, 8, 8]);
        let pm = ProbabilityMap::from_tensor(&p.get(0).unwrap()).unwrap();
        assert!(pm.max_simplex_error() < 1e-5);
        assert!(g.forward(&Tensor::zeros((1, 1, 4, 4), DType::F32, &dev).unwrap()).is_err());
    }

    #[test]
    fn transposed_variant_runs() {
        let dev = Device::Cpu;
        let cfg = GeneratorConfig {
            upsample: UpsampleMode::Transposed,
            ..tiny()
        };
        let g = build_generator(&cfg, 1, &dev).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 1, 8, 8), &dev).unwrap();
        assert_eq!(g.forward(&x).unwrap().dims(), &[1, 4, 8, 8]);
    }
}
