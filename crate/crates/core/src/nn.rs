//! Minimal layer toolkit on top of `candle-core` tensors.
//!
//! Parameters live in a [`ParamStore`] in registration order, which is also
//! the order used by checkpoints. Initialization mirrors the usual
//! PyTorch defaults (uniform in `±1/sqrt(fan_in)` for conv weights and
//! biases, unit scale and zero shift for batch normalization) but draws from a
//! [`SeededRng`] so that a seed fully determines the initial weights.

use candle_core::{DType, Device, Tensor, Var};

use crate::error::Result;
use crate::rng::SeededRng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub var: Var,
    /// Running statistics are stored but not optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, tensor: Tensor, trainable: bool) -> Result<Var> {
        let var = Var::from_tensor(&tensor)?;
        self.params.push(Param {
            name,
            var: var.clone(),
            trainable,
        });
        Ok(var)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.var.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.var.elem_count())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// FNV-1a digest over every parameter's raw bytes, in order.
    pub fn digest(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                for b in v.to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        Ok(h)
    }
}

fn uniform_tensor(rng: &mut SeededRng, bound: f64, shape: &[usize], device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut SeededRng,
        device: &Device,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let w = uniform_tensor(rng, bound, &[out_ch, in_ch, kernel, kernel], device)?;
        let weight = store.push(format!("{name}.weight"), w, true)?;
        let bias = if bias {
            let b = uniform_tensor(rng, bound, &[out_ch], device)?;
            Some(store.push(format!("{name}.bias"), b, true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding,
            stride,
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.weight.as_tensor()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::im2col::conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => {
                let c = b.dim(0)?;
                Ok(y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }
}

/// Learned 2× up-sampling by a 2×2, stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x {
    weight: Var,
    bias: Var,
}

impl ConvTranspose2x {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut SeededRng,
        device: &Device,
    ) -> Result<Self> {
        let bound = 1.0 / ((out_ch * 4) as f64).sqrt();
        let w = uniform_tensor(rng, bound, &[in_ch, out_ch, 2, 2], device)?;
        let weight = store.push(format!("{name}.weight"), w, true)?;
        let b = uniform_tensor(rng, bound, &[out_ch], device)?;
        let bias = store.push(format!("{name}.bias"), b, true)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), 0, 0, 2, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, device: &Device) -> Result<Self> {
        let gamma = store.push(
            format!("{name}.weight"),
            Tensor::ones(channels, DType::F32, device)?,
            true,
        )?;
        let beta = store.push(
            format!("{name}.bias"),
            Tensor::zeros(channels, DType::F32, device)?,
            true,
        )?;
        let running_mean = store.push(
            format!("{name}.running_mean"),
            Tensor::zeros(channels, DType::F32, device)?,
            false,
        )?;
        let running_var = store.push(
            format!("{name}.running_var"),
            Tensor::ones(channels, DType::F32, device)?,
            false,
        )?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    /// In training mode normalizes with batch statistics and updates the
    /// running estimates (unbiased variance, momentum 0.1).
    fn update_running(&self, mean: &Tensor, var: &Tensor, count: f64) -> Result<()> {
        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let dt = self.running_mean.dtype();
        let new_mean = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
            + (mean.to_dtype(dt)? * BN_MOMENTUM)?)?;
        let new_var = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
            + (var.to_dtype(dt)? * (BN_MOMENTUM * unbiased))?)?;
        self.running_mean.set(&new_mean)?;
        self.running_var.set(&new_var)?;
        Ok(())
    }

    /// `relu(forward(x, train))`, fused into one kernel in training mode.
    pub fn forward_relu(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if !train {
            return Ok(self.forward(x, false)?.relu()?);
        }
        let (n, _, h, w) = x.dims4()?;
        let (y, stats) = crate::fused::bn_relu(x, self.gamma.as_tensor(), self.beta.as_tensor(), BN_EPS)?;
        let dev = x.device();
        let c = stats.mean.len();
        self.update_running(
            &Tensor::from_vec(stats.mean, c, dev)?,
            &Tensor::from_vec(stats.var, c, dev)?,
            (n * h * w) as f64,
        )?;
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.gamma.dim(0)?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let (n, _, h, w) = x.dims4()?;
            let count = (n * h * w) as f64;
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            self.update_running(&mean.detach().flatten_all()?, &var.detach().flatten_all()?, count)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let inv_std = (var + BN_EPS)?.sqrt()?.recip()?;
        let scale = self.gamma.as_tensor().reshape(shape)?.broadcast_mul(&inv_std)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let pos = x.relu()?;
    Ok(((&pos * (1.0 - slope))? + (x * slope)?)?)
}

/// Logistic function as `(tanh(x / 2) + 1) / 2`, which keeps the gradient
/// finite for large negative inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Softmax over the channel axis of an `N × C × H × W` tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `out × in` matrix of 1-D linear interpolation weights with aligned
/// corners, mapping `input` samples to `output` samples.
pub fn interp_matrix(input: usize, output: usize) -> Vec<f32> {
    let mut m = vec![0f32; output * input];
    for o in 0..output {
        let src = if output > 1 && input > 1 {
            o as f64 * (input - 1) as f64 / (output - 1) as f64
        } else {
            0.0
        };
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m[o * input + lo] += (1.0 - frac) as f32;
        if hi != lo {
            m[o * input + hi] += frac as f32;
        }
    }
    m
}

/// Channel-preserving bilinear 2× up-sampling (aligned corners), expressed as
/// two matrix products so that it is differentiable.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dev = x.device();
    let rows = Tensor::from_vec(interp_matrix(h, 2 * h), (2 * h, h), dev)?.to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(interp_matrix(w, 2 * w), (2 * w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let y = x.broadcast_matmul(&cols)?;
    Ok(rows.broadcast_matmul(&y)?)
}

/// Argmax over the channel axis, ties going to the lowest class index.
pub fn argmax_channels(probs: &Tensor) -> Result<Vec<Vec<u8>>> {
    let (n, c, h, w) = probs.dims4()?;
    let data = probs.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    Ok((0..n)
        .map(|b| {
            let base = b * c * plane;
            (0..plane)
                .map(|p| {
                    let mut best = 0usize;
                    let mut best_v = data[base + p];
                    for k in 1..c {
                        let v = data[base + k * plane + p];
                        if v > best_v {
                            best = k;
                            best_v = v;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}
