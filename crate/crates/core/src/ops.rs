//! Tensor building blocks shared by the backbone and the fusion block.
//!
//! The 3×3 convolution lowers to an explicit im2col matrix followed by a
//! plain matmul. Its backward pass is then a matmul plus a col2im scatter,
//! which on CPU is several times faster than the generic convolution
//! gradient path.

use candle_core::{bail, CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};

type CResult<T> = candle_core::Result<T>;

#[derive(Clone, Copy, Debug)]
struct PatchGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl PatchGeometry {
    fn new(dims: (usize, usize, usize, usize), stride: usize) -> Self {
        let (batch, channels, height, width) = dims;
        Self {
            batch,
            channels,
            height,
            width,
            stride,
            out_h: (height + 2 - 3) / stride + 1,
            out_w: (width + 2 - 3) / stride + 1,
        }
    }

    /// Iterates `(patch_row_offset, image_offset)` for one channel plane and
    /// one kernel tap.
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        for oy in 0..self.out_h {
            let iy = (oy * self.stride + ky) as isize - 1;
            if iy < 0 || iy >= self.height as isize {
                continue;
            }
            for ox in 0..self.out_w {
                let ix = (ox * self.stride + kx) as isize - 1;
                if ix < 0 || ix >= self.width as isize {
                    continue;
                }
                f(oy * self.out_w + ox, iy as usize * self.width + ix as usize);
            }
        }
    }

    fn im2col<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let n = self.out_h * self.out_w;
        let k = self.channels * 9;
        let plane = self.height * self.width;
        let mut out = vec![T::default(); self.batch * k * n];
        for b in 0..self.batch {
            for c in 0..self.channels {
                let img = &src[(b * self.channels + c) * plane..][..plane];
                for tap in 0..9 {
                    let row = &mut out[(b * k + c * 9 + tap) * n..][..n];
                    self.for_each_tap(tap / 3, tap % 3, |o, i| row[o] = img[i]);
                }
            }
        }
        out
    }

    fn col2im<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let n = self.out_h * self.out_w;
        let k = self.channels * 9;
        let plane = self.height * self.width;
        let mut out = vec![T::default(); self.batch * self.channels * plane];
        for b in 0..self.batch {
            for c in 0..self.channels {
                let img = &mut out[(b * self.channels + c) * plane..][..plane];
                for tap in 0..9 {
                    let row = &cols[(b * k + c * 9 + tap) * n..][..n];
                    self.for_each_tap(tap / 3, tap % 3, |o, i| img[i] += row[o]);
                }
            }
        }
        out
    }
}

struct Im2Col(PatchGeometry);
struct Col2Im(PatchGeometry);

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("patch ops expect contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.batch, g.channels * 9, g.out_h * g.out_w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.im2col(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.im2col(contiguous_slice(v, layout)?)),
            _ => bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.col2im(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.col2im(contiguous_slice(v, layout)?)),
            _ => bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 3×3 convolution with zero padding 1 on a `(B, C, H, W)` input.
///
/// `weight` is `(C_out, C_in, 3, 3)` and `bias` is `(C_out)`.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> CResult<Tensor> {
    let geom = PatchGeometry::new(x.dims4()?, stride);
    let c_out = weight.dim(0)?;
    let cols = x.contiguous()?.apply_op1(Im2Col(geom))?;
    let w = weight.reshape((c_out, geom.channels * 9))?;
    let out = bmm(&w.unsqueeze(0)?.repeat((geom.batch, 1, 1))?, &cols)?;
    out.broadcast_add(&bias.reshape((1, c_out, 1))?)?
        .reshape((geom.batch, c_out, geom.out_h, geom.out_w))
}

/// Batched matmul on contiguous operands.
///
/// candle's CPU batched matmul silently produces wrong results when an
/// operand carries a zero batch stride, so broadcasts are materialized here.
pub fn bmm(a: &Tensor, b: &Tensor) -> CResult<Tensor> {
    a.contiguous()?.matmul(&b.contiguous()?)
}

/// Per-token affine map: `x` is `(..., C_in)`, `weight` is `(C_out, C_in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> CResult<Tensor> {
    let dims = x.dims().to_vec();
    let c_in = *dims.last().unwrap_or(&0);
    let rows = x.elem_count() / c_in.max(1);
    let out = x
        .contiguous()?
        .reshape((rows, c_in))?
        .matmul(&weight.t()?)?
        .broadcast_add(bias)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = weight.dim(0)?;
    out.reshape(out_dims)
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> CResult<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    normed.broadcast_mul(gamma)?.broadcast_add(beta)
}

pub fn sigmoid(x: &Tensor) -> CResult<Tensor> {
    // 1 / (1 + exp(-x)), composed so that it stays differentiable
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Linear interpolation matrix `(n_out, n_in)` mapping output index `o` to
/// the input coordinate `o * n_in_span / n_out_span` with pixel centers on
/// integer coordinates, clamped at the last input sample.
fn interp_matrix(n_out: usize, n_in: usize, step: f64) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let x = (o as f64 * step).min((n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        let w1 = x - x0 as f64;
        m[o * n_in + x0] += 1.0 - w1;
        m[o * n_in + x1] += w1;
    }
    m
}

/// Bilinear resize of `(B, C, h, w)` to `(B, C, out_h, out_w)`.
///
/// Output pixel `(i, j)` samples the input at `(i·h/out_h, j·w/out_w)`, the
/// same correspondence a stride-`s` encoder uses between levels.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> CResult<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let dev = x.device();
    let dtype = x.dtype();
    let rx = matrix_tensor(
        interp_matrix(out_w, w, w as f64 / out_w as f64),
        (out_w, w),
        dtype,
        dev,
    )?;
    let ry = matrix_tensor(
        interp_matrix(out_h, h, h as f64 / out_h as f64),
        (out_h, h),
        dtype,
        dev,
    )?;
    let rows = x.contiguous()?.reshape((b * c * h, w))?.matmul(&rx.t()?)?;
    let cols = rows
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&ry.t()?)?;
    cols.reshape((b * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, out_h, out_w))
}

fn matrix_tensor(
    data: Vec<f64>,
    shape: (usize, usize),
    dtype: DType,
    dev: &Device,
) -> CResult<Tensor> {
    Tensor::from_vec(data, shape, dev)?.to_dtype(dtype)
}

/// Keeps every `step`-th row and column starting at index 0.
pub fn subsample(x: &Tensor, step: usize) -> CResult<Tensor> {
    if step == 1 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let dev = x.device();
    let rows: Vec<u32> = (0..h).step_by(step).map(|i| i as u32).collect();
    let cols: Vec<u32> = (0..w).step_by(step).map(|i| i as u32).collect();
    let rows = Tensor::new(rows.as_slice(), dev)?;
    let cols = Tensor::new(cols.as_slice(), dev)?;
    x.index_select(&rows, 2)?.index_select(&cols, 3)
}
