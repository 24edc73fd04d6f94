//! Lovász-Softmax: a convex surrogate of the per-class Jaccard loss.
//!
//! For class `c` every pixel gets an error `m_i = 1 - p_i(c)` if its label is
//! `c` and `m_i = p_i(c)` otherwise. Sorting errors in decreasing order and
//! weighting them by the increments of the Jaccard loss along that order
//! evaluates the Lovász extension of the Jaccard set function at `m`. The
//! sort is stable (ties keep pixel order) and is treated as a constant
//! permutation, so the gradient with respect to `m` is exactly the weight
//! vector.

use candle_core::{DType, Tensor};

use super::{check_labels, LossConfig};
use crate::error::Result;

/// Jaccard-loss increments along a sorted ground-truth indicator.
///
/// With `S = Σ gt`, `I_k = S - cumsum(gt)_k`, `U_k = S + cumsum(1 - gt)_k`
/// and `J_k = 1 - I_k / U_k`, returns `g_1 = J_1`, `g_k = J_k - J_{k-1}`.
pub fn lovasz_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let total: f64 = gt_sorted.iter().sum();
    let mut out = Vec::with_capacity(gt_sorted.len());
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    for &g in gt_sorted {
        cum_fg += g;
        cum_bg += 1.0 - g;
        let intersection = total - cum_fg;
        let union = total + cum_bg;
        let jaccard = 1.0 - intersection / union;
        out.push(jaccard - prev);
        prev = jaccard;
    }
    out
}

/// Indices of `errors` sorted by decreasing value; equal errors keep
/// ascending index order.
pub fn descending_order(errors: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..errors.len()).collect();
    idx.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    idx
}

/// Lovász extension of the Jaccard loss for one class, evaluated on host
/// values. Returns the loss and the per-pixel weights (its gradient).
pub fn lovasz_single(errors: &[f64], fg: &[f64]) -> (f64, Vec<f64>) {
    let order = descending_order(errors);
    let gt_sorted: Vec<f64> = order.iter().map(|&i| fg[i]).collect();
    let g = lovasz_grad(&gt_sorted);
    let mut weights = vec![0.0; errors.len()];
    let mut loss = 0.0;
    for (k, &i) in order.iter().enumerate() {
        weights[i] = g[k];
        loss += errors[i] * g[k];
    }
    (loss, weights)
}

/// Mean Lovász-Softmax loss of an `N × C × H × W` probability tensor.
///
/// By default every image is its own pixel set and the result is the mean
/// over images of the mean over all `C` classes. `cfg.batch_flatten` pools the
/// whole batch into one set; `cfg.present_classes_only` averages only over
/// classes that occur in the labels of the set.
pub fn lovasz_softmax(probs: &Tensor, labels: &[u8], cfg: &LossConfig) -> Result<Tensor> {
    let (n, c, h, w) = probs.dims4()?;
    check_labels(labels, n, c, h, w)?;
    let plane = h * w;
    let values = probs.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let groups: Vec<Vec<usize>> = if cfg.batch_flatten {
        vec![(0..n).collect()]
    } else {
        (0..n).map(|b| vec![b]).collect()
    };
    let mut weights = vec![0f64; n * c * plane];
    let mut onehot = vec![0f64; n * c * plane];
    for (b, chunk) in labels.chunks_exact(plane).enumerate() {
        for (p, &y) in chunk.iter().enumerate() {
            onehot[(b * c + usize::from(y)) * plane + p] = 1.0;
        }
    }
    let group_count = groups.len() as f64;
    for members in &groups {
        let size = members.len() * plane;
        let mut per_class: Vec<(usize, Vec<f64>)> = Vec::with_capacity(c);
        for class in 0..c {
            let mut fg = Vec::with_capacity(size);
            let mut err = Vec::with_capacity(size);
            for &b in members {
                let base = (b * c + class) * plane;
                for p in 0..plane {
                    let y = onehot[base + p];
                    fg.push(y);
                    err.push(if y > 0.5 { 1.0 - values[base + p] } else { values[base + p] });
                }
            }
            if cfg.present_classes_only && fg.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (_, wts) = lovasz_single(&err, &fg);
            per_class.push((class, wts));
        }
        if per_class.is_empty() {
            continue;
        }
        let scale = 1.0 / (per_class.len() as f64 * group_count);
        for (class, wts) in per_class {
            for (k, &b) in members.iter().enumerate() {
                let base = (b * c + class) * plane;
                for p in 0..plane {
                    weights[base + p] = wts[k * plane + p] * scale;
                }
            }
        }
    }
    let dev = probs.device();
    let dtype = probs.dtype();
    let onehot = Tensor::from_vec(onehot, (n, c, h, w), dev)?.to_dtype(dtype)?;
    let weights = Tensor::from_vec(weights, (n, c, h, w), dev)?.to_dtype(dtype)?;
    // m = y + p (1 - 2y): 1 - p on the class, p elsewhere.
    let flip = onehot.affine(-2.0, 1.0)?;
    let errors = (&onehot + probs.mul(&flip)?)?;
    Ok(errors.mul(&weights)?.sum_all()?)
}
