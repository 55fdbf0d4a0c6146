//! Differentiable CPU kernels used by every network in the crate.
//!
//! Convolution is lowered to `im2col` followed by a batched matrix product so
//! that both the forward and the backward passes run through the gemm path.
//! The remaining ops (nearest upsampling, 2x2 max pooling, leaky rectifier)
//! are single-pass kernels with hand-written gradients.

use candle_core::backend::BackendStorage;
use candle_core::{
    bail, CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Tensor, WithDType,
};

fn contiguous_slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("kernel input must be contiguous"),
    }
}

macro_rules! dispatch_float {
    ($storage:expr, $name:expr, |$t:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(_) => {
                type $t = f32;
                $body
            }
            CpuStorage::F64(_) => {
                type $t = f64;
                $body
            }
            other => bail!("{}: unsupported dtype {:?}", $name, other.dtype()),
        }
    };
}

pub(crate) fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy)]
struct Window {
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    fn out(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.kernel, self.stride, self.pad),
            conv_out_dim(w, self.kernel, self.stride, self.pad),
        )
    }
}

/// Visits every (input row span, output row span) pair covered by one kernel
/// tap `(ky, kx)` of channel plane `src`, calling `f(out_offset, in_offset, len)`
/// for stride-1 runs or per element for strided windows.
#[inline]
fn for_each_tap(
    win: Window,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (oh, ow) = win.out(h, w);
    for oy in 0..oh {
        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let iy = iy as usize;
        if win.stride == 1 {
            // ix = ox + kx - pad must land in [0, w)
            let lo = win.pad.saturating_sub(kx);
            let hi = (w + win.pad).saturating_sub(kx).min(ow);
            if hi > lo {
                f(oy * ow + lo, iy * w + lo + kx - win.pad, hi - lo);
            }
        } else {
            for ox in 0..ow {
                let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                if ix >= 0 && (ix as usize) < w {
                    f(oy * ow + ox, iy * w + ix as usize, 1);
                }
            }
        }
    }
}

fn im2col<T: WithDType>(x: &[T], b: usize, c: usize, h: usize, w: usize, win: Window) -> Vec<T> {
    let (oh, ow) = win.out(h, w);
    let k = win.kernel;
    let l = oh * ow;
    let rows = c * k * k;
    let mut out = vec![T::from_f64(0.0); b * rows * l];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut out[(bi * rows + row) * l..(bi * rows + row + 1) * l];
                    for_each_tap(win, h, w, ky, kx, |o, i, n| {
                        dst[o..o + n].copy_from_slice(&plane[i..i + n])
                    });
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(
    cols: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    win: Window,
) -> Vec<T> {
    let (oh, ow) = win.out(h, w);
    let k = win.kernel;
    let l = oh * ow;
    let rows = c * k * k;
    let mut out = vec![T::from_f64(0.0); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[(bi * rows + row) * l..(bi * rows + row + 1) * l];
                    for_each_tap(win, h, w, ky, kx, |o, i, n| {
                        for (d, s) in plane[i..i + n].iter_mut().zip(&src[o..o + n]) {
                            *d += *s;
                        }
                    });
                }
            }
        }
    }
    out
}

struct Im2Col(Window);

struct Col2Im {
    win: Window,
    c: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let (oh, ow) = self.0.out(h, w);
        let k = self.0.kernel;
        let shape = Shape::from((b, c * k * k, oh * ow));
        dispatch_float!(s, "im2col", |T| {
            let x = contiguous_slice::<T>(s, l)?;
            Ok((
                T::to_cpu_storage_owned(im2col(x, b, c, h, w, self.0)),
                shape,
            ))
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im {
            win: self.0,
            c,
            h,
            w,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, _, _) = l.shape().dims3()?;
        let shape = Shape::from((b, self.c, self.h, self.w));
        dispatch_float!(s, "col2im", |T| {
            let cols = contiguous_slice::<T>(s, l)?;
            Ok((
                T::to_cpu_storage_owned(col2im(cols, b, self.c, self.h, self.w, self.win)),
                shape,
            ))
        })
    }
}

/// 2-D convolution, NCHW input and OIHW weight, square kernel, zero padding.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        bail!("conv2d: input has {c} channels, weight expects {ci}");
    }
    if kh != kw {
        bail!("conv2d: only square kernels are supported, got {kh}x{kw}");
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        bail!("conv2d: input {h}x{w} smaller than kernel {kh}x{kw}");
    }
    let win = Window {
        kernel: kh,
        stride,
        pad: padding,
    };
    let (oh, ow) = win.out(h, w);
    let cols = if kh == 1 && stride == 1 && padding == 0 {
        x.reshape((b, c, h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(win))?
    };
    let y = weight.reshape((co, ci * kh * kw))?.broadcast_matmul(&cols)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, co, 1))?)?,
        None => y,
    };
    y.reshape((b, co, oh, ow))
}

struct UpsampleNearest(usize);

struct BlockSum(usize);

impl CustomOp1 for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample-nearest"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let f = self.0;
        let (oh, ow) = (h * f, w * f);
        dispatch_float!(s, "upsample-nearest", |T| {
            let x = contiguous_slice::<T>(s, l)?;
            let mut out = vec![T::from_f64(0.0); b * c * oh * ow];
            for (plane, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
                for y in 0..oh {
                    let src = &plane[(y / f) * w..(y / f + 1) * w];
                    let row = &mut dst[y * ow..(y + 1) * ow];
                    for (x_out, v) in row.iter_mut().enumerate() {
                        *v = src[x_out / f];
                    }
                }
            }
            Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, oh, ow))))
        })
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&BlockSum(self.0))?))
    }
}

impl CustomOp1 for BlockSum {
    fn name(&self) -> &'static str {
        "block-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let f = self.0;
        let (oh, ow) = (h / f, w / f);
        dispatch_float!(s, "block-sum", |T| {
            let x = contiguous_slice::<T>(s, l)?;
            let mut out = vec![T::from_f64(0.0); b * c * oh * ow];
            for (plane, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
                for y in 0..oh * f {
                    let row = &plane[y * w..y * w + ow * f];
                    let acc = &mut dst[(y / f) * ow..(y / f + 1) * ow];
                    for (x_in, v) in row.iter().enumerate() {
                        acc[x_in / f] += *v;
                    }
                }
            }
            Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, oh, ow))))
        })
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    x.contiguous()?.apply_op1(UpsampleNearest(factor))
}

struct MaxPool2;

struct MaxPool2Grad;

fn argmax_2x2<T: WithDType>(plane: &[T], w: usize, oy: usize, ox: usize) -> usize {
    let base = 2 * oy * w + 2 * ox;
    let mut best = base;
    for idx in [base + 1, base + w, base + w + 1] {
        if plane[idx] > plane[best] {
            best = idx;
        }
    }
    best
}

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "max-pool-2x2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        dispatch_float!(s, "max-pool-2x2", |T| {
            let x = contiguous_slice::<T>(s, l)?;
            let mut out = vec![T::from_f64(0.0); b * c * oh * ow];
            for (plane, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = plane[argmax_2x2(plane, w, oy, ox)];
                    }
                }
            }
            Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, oh, ow))))
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(
            &grad.contiguous()?,
            &MaxPool2Grad,
        )?))
    }
}

impl CustomOp2 for MaxPool2Grad {
    fn name(&self) -> &'static str {
        "max-pool-2x2-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        dispatch_float!(s1, "max-pool-2x2-grad", |T| {
            let x = contiguous_slice::<T>(s1, l1)?;
            let g = contiguous_slice::<T>(s2, l2)?;
            let mut out = vec![T::from_f64(0.0); b * c * h * w];
            for ((plane, gp), dst) in x
                .chunks_exact(h * w)
                .zip(g.chunks_exact(oh * ow))
                .zip(out.chunks_exact_mut(h * w))
            {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[argmax_2x2(plane, w, oy, ox)] += gp[oy * ow + ox];
                    }
                }
            }
            Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
        })
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        bail!("max_pool2x2: input {h}x{w} too small");
    }
    x.contiguous()?.apply_op1(MaxPool2)
}

struct LeakyRelu(f64);

struct LeakyReluGrad(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        dispatch_float!(s, "leaky-relu", |T| {
            let x = contiguous_slice::<T>(s, l)?;
            let slope = T::from_f64(self.0);
            let out: Vec<T> = x
                .iter()
                .map(|&v| if v > T::from_f64(0.0) { v } else { v * slope })
                .collect();
            Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(
            &grad.contiguous()?,
            &LeakyReluGrad(self.0),
        )?))
    }
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        dispatch_float!(s1, "leaky-relu-grad", |T| {
            let x = contiguous_slice::<T>(s1, l1)?;
            let g = contiguous_slice::<T>(s2, l2)?;
            let slope = T::from_f64(self.0);
            let out: Vec<T> = x
                .iter()
                .zip(g)
                .map(|(&v, &g)| if v > T::from_f64(0.0) { g } else { g * slope })
                .collect();
            Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
        })
    }
}

/// Leaky rectifier; `slope = 0` gives the plain ReLU.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu(slope))
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    leaky_relu(x, 0.0)
}

/// Logistic sigmoid built from primitive ops so that it differentiates through.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}
