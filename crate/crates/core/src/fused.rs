//! Training-mode batch normalization fused with ReLU.
//!
//! Computes `relu(gamma · (x - mean) / sqrt(var + eps) + beta)` with batch
//! statistics over `(N, H, W)` in a single pass and supplies the analytic
//! gradient for `x`, `gamma` and `beta`. The per-channel mean and biased
//! variance of the last forward call are exposed for running-stat updates.

use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

#[derive(Clone, Debug, Default)]
pub(crate) struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) struct BnRelu {
    pub eps: f64,
    pub stats: Arc<Mutex<BatchStats>>,
}

fn dims(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let d = l.dims();
    if d.len() != 4 {
        candle_core::bail!("bn-relu expects a 4-d input, got {:?}", d);
    }
    Ok((d[0], d[1], d[2] * d[3]))
}

fn slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("bn-relu expects contiguous inputs"),
    }
}

fn channel_stats<T: WithDType>(x: &[T], n: usize, c: usize, hw: usize) -> BatchStats {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += x[base..base + hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            q += x[base..base + hw].iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    BatchStats { mean, var }
}

fn forward<T: WithDType>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    (n, c, hw): (usize, usize, usize),
    eps: f64,
) -> (Vec<T>, BatchStats) {
    let stats = channel_stats(x, n, c, hw);
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..c {
        let scale = gamma[ch].to_f64() / (stats.var[ch] + eps).sqrt();
        let shift = beta[ch].to_f64() - stats.mean[ch] * scale;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for k in base..base + hw {
                y[k] = T::from_f64((x[k].to_f64() * scale + shift).max(0.0));
            }
        }
    }
    (y, stats)
}

impl CustomOp3 for BnRelu {
    fn name(&self) -> &'static str {
        "bn-relu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims(l1)?;
        let (out, stats) = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                let (y, s) = forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, d, self.eps);
                (CpuStorage::F32(y), s)
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                let (y, s) = forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, d, self.eps);
                (CpuStorage::F64(y), s)
            }
            _ => candle_core::bail!("bn-relu supports matching f32 or f64 inputs"),
        };
        if let Ok(mut guard) = self.stats.lock() {
            *guard = stats;
        }
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        y: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let host = |t: &Tensor| t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>();
        let (xv, gv, yv, dy) = (host(x)?, host(gamma)?, host(y)?, host(grad)?);
        let stats = channel_stats(&xv, n, c, hw);
        let count = (n * hw) as f64;
        let mut dx = vec![0.0; xv.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let inv_std = 1.0 / (stats.var[ch] + self.eps).sqrt();
            let m = stats.mean[ch];
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for k in base..base + hw {
                    if yv[k] > 0.0 {
                        sum_g += dy[k];
                        sum_gx += dy[k] * (xv[k] - m) * inv_std;
                    }
                }
            }
            dbeta[ch] = sum_g;
            dgamma[ch] = sum_gx;
            let coef = gv[ch] * inv_std / count;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for k in base..base + hw {
                    let g = if yv[k] > 0.0 { dy[k] } else { 0.0 };
                    let xhat = (xv[k] - m) * inv_std;
                    dx[k] = coef * (count * g - sum_g - xhat * sum_gx);
                }
            }
        }
        let dev = x.device();
        let dt = x.dtype();
        Ok((
            Some(Tensor::from_vec(dx, (n, c, h, w), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dgamma, c, dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dbeta, c, dev)?.to_dtype(dt)?),
        ))
    }
}

/// Returns the activation and the batch statistics used.
pub(crate) fn bn_relu(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<(Tensor, BatchStats)> {
    let stats = Arc::new(Mutex::new(BatchStats::default()));
    let op = BnRelu {
        eps,
        stats: stats.clone(),
    };
    let y = x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    let s = stats.lock().map(|g| g.clone()).unwrap_or_default();
    Ok((y, s))
}
