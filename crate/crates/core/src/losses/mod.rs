//! Training objectives.
//!
//! All functions take an `N × C × H × W` probability tensor and the labels as
//! a flat `N·H·W` slice of class ids, and return a scalar tensor that is
//! differentiable with respect to the probabilities.

mod lovasz;

pub use lovasz::{descending_order, lovasz_grad, lovasz_single, lovasz_softmax};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Smoothing added to numerator and denominator of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;
/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Lovasz,
    Ce,
    WeightedCe,
    Dice,
    WeightedDice,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Ce,
        LossKind::WeightedCe,
        LossKind::Dice,
        LossKind::WeightedDice,
        LossKind::Lovasz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Lovasz => "lovasz",
            LossKind::Ce => "ce",
            LossKind::WeightedCe => "weighted_ce",
            LossKind::Dice => "dice",
            LossKind::WeightedDice => "weighted_dice",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Per-class weights for the weighted variants.
    pub class_weights: Vec<f64>,
    pub kind: LossKind,
    /// Lovász only: average over classes present in the labels.
    pub present_classes_only: bool,
    /// Lovász only: pool all pixels of a batch into one set.
    pub batch_flatten: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            class_weights: vec![1.0; crate::NUM_CLASSES],
            kind: LossKind::Lovasz,
            present_classes_only: false,
            batch_flatten: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda {} must be finite and positive", self.lambda)));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig("class weights must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse pixel-frequency weights normalized to mean one. Classes that never
/// occur are counted as a single pixel.
pub fn inverse_frequency_weights(counts: &[u64]) -> Vec<f64> {
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / (n.max(1) as f64)).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    inv.iter().map(|v| v / mean).collect()
}

pub(crate) fn check_labels(labels: &[u8], n: usize, c: usize, h: usize, w: usize) -> Result<()> {
    if labels.len() != n * h * w {
        return Err(shape_err(n * h * w, labels.len()));
    }
    if let Some(&v) = labels.iter().find(|&&v| usize::from(v) >= c) {
        return Err(Error::InvalidLabel { index: 0, value: v, classes: c });
    }
    Ok(())
}

/// One-hot tensor with the dtype and device of `like` (`N × C × H × W`).
pub fn one_hot_like(labels: &[u8], like: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = like.dims4()?;
    check_labels(labels, n, c, h, w)?;
    let plane = h * w;
    let mut data = vec![0f32; n * c * plane];
    for (b, chunk) in labels.chunks_exact(plane).enumerate() {
        for (p, &y) in chunk.iter().enumerate() {
            data[(b * c + usize::from(y)) * plane + p] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (n, c, h, w), like.device())?.to_dtype(like.dtype())?)
}

fn class_weight_tensor(weights: &[f64], like: &Tensor) -> Result<Tensor> {
    let c = like.dim(1)?;
    if weights.len() != c {
        return Err(shape_err(c, weights.len()));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidConfig("class weights must be positive".into()));
    }
    Ok(Tensor::from_slice(weights, (1, c, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// Mean per-pixel negative log-likelihood of the true class; with `weights`
/// each pixel counts `w[label]` and the sum is normalized by the total weight.
pub fn cross_entropy(probs: &Tensor, labels: &[u8], weights: Option<&[f64]>) -> Result<Tensor> {
    let onehot = one_hot_like(labels, probs)?;
    let p_true = probs.mul(&onehot)?.sum_keepdim(1)?;
    let nll = p_true.maximum(LOG_FLOOR)?.log()?.neg()?;
    match weights {
        None => Ok(nll.mean_all()?),
        Some(w) => {
            let wt = class_weight_tensor(w, probs)?;
            let pixel_w = onehot.broadcast_mul(&wt)?.sum_keepdim(1)?;
            Ok((nll.mul(&pixel_w)?.sum_all()? / pixel_w.sum_all()?)?)
        }
    }
}

/// Soft Dice loss: per image `1 - Σ_c w_c d_c / Σ_c w_c` with
/// `d_c = (2 Σ p q + ε) / (Σ p + Σ q + ε)`, averaged over the batch.
pub fn dice_loss(probs: &Tensor, labels: &[u8], weights: Option<&[f64]>) -> Result<Tensor> {
    let onehot = one_hot_like(labels, probs)?;
    let inter = probs.mul(&onehot)?.sum_keepdim((2, 3))?;
    let sums = (probs.sum_keepdim((2, 3))? + onehot.sum_keepdim((2, 3))?)?;
    let dice = ((inter * 2.0)? + DICE_EPS)?.div(&(sums + DICE_EPS)?)?;
    let per_image = match weights {
        None => dice.mean_keepdim(1)?,
        Some(w) => {
            let wt = class_weight_tensor(w, probs)?;
            let total: f64 = w.iter().sum();
            (dice.broadcast_mul(&wt)?.sum_keepdim(1)? / total)?
        }
    };
    Ok(per_image.affine(-1.0, 1.0)?.mean_all()?)
}

/// Ablation losses: CE, weighted CE, Dice and weighted Dice.
pub fn baseline_loss(probs: &Tensor, labels: &[u8], cfg: &LossConfig) -> Result<Tensor> {
    match cfg.kind {
        LossKind::Ce => cross_entropy(probs, labels, None),
        LossKind::WeightedCe => cross_entropy(probs, labels, Some(&cfg.class_weights)),
        LossKind::Dice => dice_loss(probs, labels, None),
        LossKind::WeightedDice => dice_loss(probs, labels, Some(&cfg.class_weights)),
        LossKind::Lovasz => Err(Error::InvalidConfig("lovasz is not a baseline loss kind".into())),
    }
}

/// Segmentation term selected by `cfg.kind`.
pub fn segmentation_loss(probs: &Tensor, labels: &[u8], cfg: &LossConfig) -> Result<Tensor> {
    match cfg.kind {
        LossKind::Lovasz => lovasz_softmax(probs, labels, cfg),
        _ => baseline_loss(probs, labels, cfg),
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(a.dims(), b.dims()));
    }
    Ok(())
}

/// `mean((real - 1)²) + mean(fake²)`.
pub fn lsgan_d_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    check_same(real_scores, fake_scores)?;
    let real = (real_scores - 1.0)?.sqr()?.mean_all()?;
    let fake = fake_scores.sqr()?.mean_all()?;
    Ok((real + fake)?)
}

/// `mean((fake - 1)²)`.
pub fn lsgan_g_loss(fake_scores: &Tensor) -> Result<Tensor> {
    Ok((fake_scores - 1.0)?.sqr()?.mean_all()?)
}

/// Components of the generator objective.
#[derive(Debug)]
pub struct GeneratorLoss {
    pub total: Tensor,
    pub adversarial: Tensor,
    pub segmentation: Tensor,
}

/// `lsgan_g_loss(fake) + λ · segmentation_loss`. Without a discriminator
/// (`fake_scores = None`) the objective is the segmentation loss alone.
pub fn generator_objective(
    fake_scores: Option<&Tensor>,
    probs: &Tensor,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<GeneratorLoss> {
    let segmentation = segmentation_loss(probs, labels, cfg)?;
    match fake_scores {
        Some(fake) => {
            let adversarial = lsgan_g_loss(fake)?;
            let total = (&adversarial + (&segmentation * cfg.lambda)?)?;
            Ok(GeneratorLoss { total, adversarial, segmentation })
        }
        None => {
            let adversarial = Tensor::zeros((), segmentation.dtype(), segmentation.device())?;
            Ok(GeneratorLoss {
                total: segmentation.clone(),
                adversarial,
                segmentation,
            })
        }
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
