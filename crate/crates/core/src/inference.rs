//! Style-controlled super-resolution with a trained generator.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{ColorType, DynamicImage};

use crate::checkpoint::{Checkpoint, Manifest};
use crate::error::{domain, shape_err, Error, Result};
use crate::generator::{Generator, StyleMap};
use crate::raster::Image;
use crate::resample::{resize, ResampleKernel};
use crate::schedules::check_style_value;

/// LR tile side used for memory-bounded inference.
pub const TILE: usize = 256;
/// LR overlap between neighbouring tiles.
pub const TILE_OVERLAP: usize = 32;

/// Where the style map of a request comes from.
#[derive(Debug, Clone)]
pub enum MapSource {
    Scalar(f64),
    File(PathBuf),
    Map(StyleMap),
}

impl MapSource {
    /// The concrete map for an LR image of `lr_dims = (height, width)`.
    pub fn resolve(&self, lr_dims: (usize, usize)) -> Result<StyleMap> {
        let (h, w) = lr_dims;
        match self {
            MapSource::Scalar(t) => {
                check_style_value(*t)?;
                StyleMap::flat(h, w, *t)
            }
            MapSource::File(path) => load_style_map(path, lr_dims),
            MapSource::Map(m) => {
                m.check_matches(h, w)?;
                Ok(m.clone())
            }
        }
    }
}

/// Decodes an 8-bit single-channel raster into a style map (`v / 255`).
pub fn decode_style_map(bytes: &[u8], lr_dims: (usize, usize)) -> Result<StyleMap> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Data(format!("cannot decode style map: {e}")))?;
    style_map_from_dynamic(&img, lr_dims)
}

pub fn load_style_map(path: &Path, lr_dims: (usize, usize)) -> Result<StyleMap> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read style map {}: {e}", path.display())))?;
    style_map_from_dynamic(&img, lr_dims)
}

fn style_map_from_dynamic(img: &DynamicImage, lr_dims: (usize, usize)) -> Result<StyleMap> {
    if img.color() != ColorType::L8 {
        return Err(shape_err!(
            "style map must be an 8-bit single-channel image, got {:?}",
            img.color()
        ));
    }
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if (h, w) != lr_dims {
        return Err(shape_err!(
            "style map is {h}x{w} but the LR image is {}x{}",
            lr_dims.0,
            lr_dims.1
        ));
    }
    StyleMap::new(h, w, gray.as_raw().iter().map(|&v| v as f64 / 255.0).collect())
}

/// Encodes a style map as an 8-bit grayscale PNG (values quantized to 1/255).
pub fn encode_style_map(map: &StyleMap) -> Result<Vec<u8>> {
    let (h, w) = map.dims();
    Image::new(1, h, w, map.values().to_vec())?.encode_png()
}

/// Explicitly resamples a style map to `height x width` (bicubic, clipped to
/// `[0, 1]`). Inference never does this implicitly.
pub fn resize_style_map(map: &StyleMap, height: usize, width: usize) -> Result<StyleMap> {
    let (h, w) = map.dims();
    let img = Image::new(1, h, w, map.values().to_vec())?;
    let out = resize(&img, height, width, ResampleKernel::Bicubic)?;
    StyleMap::from_fn(height, width, |y, x| out.get(0, y, x).clamp(0.0, 1.0))
}

/// File name of the `index`-th image of a sweep at style value `t`.
pub fn sweep_entry_name(index: usize, t: f64) -> String {
    format!("{index:02}_t{t:.4}.png")
}

/// The default sweep `0.0, 0.1, ..., 1.0`.
pub fn default_ts() -> Vec<f64> {
    parse_t_list("0:1:0.1").expect("default list parses")
}

/// Parses `start:end:step` (inclusive, evenly spaced) or a comma-separated list.
pub fn parse_t_list(spec: &str) -> Result<Vec<f64>> {
    let spec = spec.trim();
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| domain!("invalid t value {s:?}"))
    };
    let ts = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(domain!("range {spec:?} must look like start:end:step"));
        }
        let (start, end, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || end < start {
            return Err(domain!("range {spec:?} needs step > 0 and end >= start"));
        }
        let n = ((end - start) / step).round() as usize + 1;
        if n == 1 {
            vec![start]
        } else {
            (0..n)
                .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
                .collect()
        }
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if ts.is_empty() {
        return Err(domain!("empty t list"));
    }
    for &t in &ts {
        check_style_value(t)?;
    }
    Ok(ts)
}

/// A loaded generator ready for inference.
#[derive(Debug, Clone)]
pub struct SrModel {
    id: String,
    manifest: Manifest,
    generator: Generator,
}

impl SrModel {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        Self::from_checkpoint(id, &ck)
    }

    pub fn from_checkpoint(id: String, ck: &Checkpoint) -> Result<Self> {
        let generator = Generator::new(ck.manifest.generator, DType::F32, 0)
            .map_err(|e| Error::Checkpoint(format!("generator config: {e}")))?;
        generator.params().assign(&ck.params(Generator::PREFIX))?;
        Ok(Self {
            id,
            manifest: ck.manifest.clone(),
            generator,
        })
    }

    pub fn from_generator(id: String, generator: Generator, manifest: Manifest) -> Self {
        Self {
            id,
            manifest,
            generator,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn scale(&self) -> usize {
        self.generator.config().scale
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    /// SR output (unclipped) for `lr` under the style map from `source`.
    pub fn super_resolve(&self, lr: &Image, source: &MapSource) -> Result<Image> {
        let map = source.resolve(lr.dims())?;
        self.super_resolve_map(lr, &map)
    }

    pub fn super_resolve_map(&self, lr: &Image, map: &StyleMap) -> Result<Image> {
        if lr.channels() != 3 {
            return Err(shape_err!("LR image must be RGB, got {} channels", lr.channels()));
        }
        map.check_matches(lr.height(), lr.width())?;
        let (h, w) = lr.dims();
        if h <= TILE && w <= TILE {
            return self.run(lr, map);
        }
        self.tiled(lr, map)
    }

    fn run(&self, lr: &Image, map: &StyleMap) -> Result<Image> {
        let dtype = self.generator.dtype();
        let out = self
            .generator
            .infer(&lr.to_tensor(dtype)?, &map.to_tensor(dtype)?)?;
        Image::from_tensor(&out)
    }

    fn tiled(&self, lr: &Image, map: &StyleMap) -> Result<Image> {
        let s = self.scale();
        let (h, w) = lr.dims();
        let ys = tile_starts(h);
        let xs = tile_starts(w);
        let (oh, ow) = (h * s, w * s);
        let mut acc = vec![0.0; 3 * oh * ow];
        let mut weight = vec![0.0; oh * ow];
        for &y0 in &ys {
            let th = TILE.min(h - y0);
            for &x0 in &xs {
                let tw = TILE.min(w - x0);
                let out = self.run(&lr.crop(y0, x0, th, tw)?, &map.crop(y0, x0, th, tw)?)?;
                let wy = feather(th * s, y0 > 0, y0 + th < h, TILE_OVERLAP * s);
                let wx = feather(tw * s, x0 > 0, x0 + tw < w, TILE_OVERLAP * s);
                for y in 0..th * s {
                    let gy = y0 * s + y;
                    for x in 0..tw * s {
                        let gx = x0 * s + x;
                        let k = wy[y] * wx[x];
                        weight[gy * ow + gx] += k;
                        for c in 0..3 {
                            acc[(c * oh + gy) * ow + gx] += k * out.get(c, y, x);
                        }
                    }
                }
            }
        }
        for c in 0..3 {
            for i in 0..oh * ow {
                acc[c * oh * ow + i] /= weight[i];
            }
        }
        Image::new(3, oh, ow, acc)
    }

    /// One output per `t`, in order.
    pub fn sweep(&self, lr: &Image, ts: &[f64]) -> Result<Vec<Image>> {
        ts.iter()
            .map(|&t| self.super_resolve(lr, &MapSource::Scalar(t)))
            .collect()
    }

    /// Batched flat-map inference over several LR images of equal size.
    pub fn super_resolve_batch(&self, lrs: &[Image], t: f64) -> Result<Vec<Image>> {
        check_style_value(t)?;
        let Some(first) = lrs.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = first.dims();
        if h > TILE || w > TILE || lrs.iter().any(|l| l.dims() != (h, w)) {
            return lrs
                .iter()
                .map(|l| self.super_resolve(l, &MapSource::Scalar(t)))
                .collect();
        }
        let dtype = self.generator.dtype();
        let x = Image::stack(lrs, dtype)?;
        let maps = Tensor::full(t, (lrs.len(), 1, h, w), x.device())?.to_dtype(dtype)?;
        Image::unstack(&self.generator.infer(&x, &maps)?)
    }
}

/// Tile origins covering `len` with overlap, the last tile flush with the end.
fn tile_starts(len: usize) -> Vec<usize> {
    if len <= TILE {
        return vec![0];
    }
    let step = TILE - TILE_OVERLAP;
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + TILE < len).collect();
    starts.push(len - TILE);
    starts
}

/// Blend weights along one tile axis: linear ramps over the overlap on interior sides.
fn feather(len: usize, ramp_start: bool, ramp_end: bool, overlap: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let mut k: f64 = 1.0;
            if ramp_start && i < overlap {
                k = k.min((i as f64 + 0.5) / overlap as f64);
            }
            if ramp_end && len - 1 - i < overlap {
                k = k.min(((len - 1 - i) as f64 + 0.5) / overlap as f64);
            }
            k
        })
        .collect()
}
