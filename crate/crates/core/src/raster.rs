//! Planar floating-point images and raster I/O.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{shape_err, Error, Result};

/// A `channels x height x width` image stored plane by plane in `f64`.
///
/// Values are nominally in `[0, 1]`; network outputs may exceed that range
/// until they are exported.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "image buffer has {} values, expected {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.channels, self.height, self.width) != (other.channels, other.height, other.width)
        {
            return Err(shape_err!(
                "image {}x{}x{} vs {}x{}x{}",
                self.channels,
                self.height,
                self.width,
                other.channels,
                other.height,
                other.width
            ));
        }
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(shape_err!(
                "crop {height}x{width} at ({top},{left}) exceeds image {}x{}",
                self.height,
                self.width
            ));
        }
        Ok(Image::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clip01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// ITU-R BT.601 luma; single-channel images are returned unchanged.
    pub fn luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(1, self.height, self.width, |_, y, x| {
            0.299 * self.get(0, y, x) + 0.587 * self.get(1, y, x) + 0.114 * self.get(2, y, x)
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    /// Rotation by 90 degrees counter-clockwise.
    pub fn rotate90(&self) -> Image {
        Image::from_fn(self.channels, self.width, self.height, |c, y, x| {
            self.get(c, x, self.width - 1 - y)
        })
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Self::stack(std::slice::from_ref(self), dtype)
    }

    /// Stacks equally sized images into a `(B, C, H, W)` tensor.
    pub fn stack(images: &[Image], dtype: DType) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| shape_err!("cannot stack an empty image list"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            first.same_shape(img)?;
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(
            data,
            (images.len(), first.channels, first.height, first.width),
            &Device::Cpu,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits a `(B, C, H, W)` tensor into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
        let (b, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(flat
            .chunks_exact(c * h * w)
            .take(b)
            .map(|chunk| Image {
                channels: c,
                height: h,
                width: w,
                data: chunk.to_vec(),
            })
            .collect())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let mut images = Self::unstack(t)?;
        if images.len() != 1 {
            return Err(shape_err!("expected a batch of one, got {}", images.len()));
        }
        Ok(images.remove(0))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Image {
        match img {
            DynamicImage::ImageLuma8(g) => from_u8(1, g.height(), g.width(), g.as_raw()),
            other => {
                let rgb = other.to_rgb8();
                from_u8(3, rgb.height(), rgb.width(), rgb.as_raw())
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| {
            Error::Data(format!("cannot read image {}: {e}", path.display()))
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_dynamic(&img))
    }

    /// 8-bit quantization after clipping to `[0, 1]`, rounding half away from zero.
    pub fn to_u8(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.data.len()];
        let n = self.height * self.width;
        for c in 0..self.channels {
            for i in 0..n {
                out[i * self.channels + c] = quantize(self.data[c * n + i]);
            }
        }
        out
    }

    pub fn to_dynamic(&self) -> Result<DynamicImage> {
        let (w, h) = (self.width as u32, self.height as u32);
        let raw = self.to_u8();
        match self.channels {
            1 => Ok(DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, raw).expect("buffer size checked"),
            )),
            3 => Ok(DynamicImage::ImageRgb8(
                RgbImage::from_raw(w, h, raw).expect("buffer size checked"),
            )),
            c => Err(shape_err!("cannot export a {c}-channel image")),
        }
    }

    pub fn encode(&self, format: ImageFormat) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_dynamic()?.write_to(&mut buf, format)?;
        Ok(buf.into_inner())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        self.encode(ImageFormat::Png)
    }

    /// Writes the image atomically; the format follows the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Png);
        let bytes = self.encode(format)?;
        crate::io::write_atomic(path, &bytes)
    }
}

/// `v` clipped to `[0, 1]`, scaled to `[0, 255]` and rounded half away from zero.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

fn from_u8(channels: usize, height: u32, width: u32, raw: &[u8]) -> Image {
    let (h, w) = (height as usize, width as usize);
    Image::from_fn(channels, h, w, |c, y, x| {
        raw[(y * w + x) * channels + c] as f64 / 255.0
    })
}
