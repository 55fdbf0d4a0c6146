//! Separable image resampling with a bicubic (Keys, a = -0.5) kernel.
//!
//! When shrinking, the kernel is stretched by the inverse scale so that it
//! also acts as an anti-aliasing filter. Borders use symmetric (half-sample)
//! reflection.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::raster::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleKernel {
    #[default]
    Bicubic,
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax < 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Half-sample symmetric reflection of `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Sparse interpolation weights mapping `in_len` samples onto `out_len`.
#[derive(Debug, Clone)]
struct AxisWeights {
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = out_len as f64 / in_len as f64;
        let (kscale, width) = if scale < 1.0 {
            (scale, 4.0 / scale)
        } else {
            (1.0, 4.0)
        };
        let taps = (0..out_len)
            .map(|i| {
                let u = (i as f64 + 0.5) / scale - 0.5;
                let left = (u - width / 2.0).floor() as isize;
                let count = width.ceil() as isize + 2;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(count as usize);
                let mut total = 0.0;
                for j in left..left + count {
                    let w = kscale * cubic(kscale * (u - j as f64));
                    if w == 0.0 {
                        continue;
                    }
                    total += w;
                    let src = reflect(j, in_len);
                    match row.iter_mut().find(|(k, _)| *k == src) {
                        Some(entry) => entry.1 += w,
                        None => row.push((src, w)),
                    }
                }
                for entry in &mut row {
                    entry.1 /= total;
                }
                row
            })
            .collect();
        Self { taps }
    }
}

/// Resizes `img` to `out_h x out_w`.
pub fn resize(img: &Image, out_h: usize, out_w: usize, kernel: ResampleKernel) -> Result<Image> {
    let ResampleKernel::Bicubic = kernel;
    if out_h == 0 || out_w == 0 || img.height() == 0 || img.width() == 0 {
        return Err(shape_err!(
            "cannot resize {}x{} to {out_h}x{out_w}",
            img.height(),
            img.width()
        ));
    }
    let (h, w) = img.dims();
    let wx = AxisWeights::new(w, out_w);
    let wy = AxisWeights::new(h, out_h);
    let c = img.channels();

    let mut horizontal = vec![0.0; c * h * out_w];
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            let dst = &mut horizontal[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (x, taps) in wx.taps.iter().enumerate() {
                dst[x] = taps.iter().map(|&(j, k)| k * src[j]).sum();
            }
        }
    }

    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &horizontal[ch * h * out_w..(ch + 1) * h * out_w];
        for (y, taps) in wy.taps.iter().enumerate() {
            let dst = &mut out[(ch * out_h + y) * out_w..(ch * out_h + y + 1) * out_w];
            for &(i, k) in taps {
                let src = &plane[i * out_w..(i + 1) * out_w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
    }
    Image::new(c, out_h, out_w, out)
}

/// Shrinks by an integer factor; both sides must be divisible by it.
pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    let (h, w) = img.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err!(
            "image {h}x{w} is not divisible by scale {factor}"
        ));
    }
    resize(img, h / factor, w / factor, ResampleKernel::Bicubic)
}

pub fn upsample(img: &Image, factor: usize) -> Result<Image> {
    let (h, w) = img.dims();
    resize(img, h * factor, w * factor, ResampleKernel::Bicubic)
}

pub fn upsample_nearest(img: &Image, factor: usize) -> Image {
    Image::from_fn(
        img.channels(),
        img.height() * factor,
        img.width() * factor,
        |c, y, x| img.get(c, y / factor, x / factor),
    )
}
