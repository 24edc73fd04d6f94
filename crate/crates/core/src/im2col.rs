//! Convolution as patch extraction followed by a matrix product.
//!
//! `Im2Col` unfolds `(N, C, H, W)` into `(N, C·k·k, Ho·Wo)` and `Col2Im`
//! folds it back by summing overlapping patches. Each is the adjoint of the
//! other, so both are differentiable and convolution gradients reduce to
//! matrix products.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Calls `f(row, col, src_index)` for every patch entry inside the image.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oi in 0..oh {
                        let i = (oi * self.stride + ki) as isize - self.padding as isize;
                        if i < 0 || i >= self.height as isize {
                            continue;
                        }
                        let base = (c * self.height + i as usize) * self.width;
                        for oj in 0..ow {
                            let j = (oj * self.stride + kj) as isize - self.padding as isize;
                            if j < 0 || j >= self.width as isize {
                                continue;
                            }
                            f(row, oi * ow + oj, base + j as usize);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous input".into())),
    }
}

fn unfold<T: Copy + Default>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let img = g.channels * g.height * g.width;
    let mut dst = vec![T::default(); batch * rows * cols];
    for n in 0..batch {
        let s = &src[n * img..(n + 1) * img];
        let d = &mut dst[n * rows * cols..(n + 1) * rows * cols];
        g.for_each(|r, c, i| d[r * cols + c] = s[i]);
    }
    dst
}

fn fold<T: Copy + Default + std::ops::AddAssign>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let img = g.channels * g.height * g.width;
    let mut dst = vec![T::default(); batch * img];
    for n in 0..batch {
        let s = &src[n * rows * cols..(n + 1) * rows * cols];
        let d = &mut dst[n * img..(n + 1) * img];
        g.for_each(|r, c, i| d[i] += s[r * cols + c]);
    }
    dst
}

pub(crate) struct Im2Col(pub Geometry);
pub(crate) struct Col2Im(pub Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, g.rows(), g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous(v, layout)?, batch, g)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous(v, layout)?, batch, g)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Square-kernel convolution of `x: (N, C, H, W)` with `w: (O, C, k, k)`.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    let g = Geometry {
        channels: c,
        height: h,
        width: wd,
        kernel: k,
        stride,
        padding,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let w2 = w.reshape((o, c * k * k))?;
    w2.broadcast_matmul(&cols)?.reshape((n, o, g.out_h(), g.out_w()))
}
