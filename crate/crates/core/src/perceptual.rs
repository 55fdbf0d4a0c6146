//! VGG-19 feature extraction and the multi-level perceptual loss.
//!
//! The extractor follows the torchvision `vgg19().features` layout: sixteen 3x3
//! convolutions in five blocks of (2, 2, 4, 4, 4) with 2x2 max pooling
//! between blocks. Weights come either from a safetensors file with the
//! canonical `features.{index}.weight|bias` names or, when none is available,
//! from a seeded random initialization of the same topology (optionally
//! narrower, see [`ExtractorSource::Seeded`]).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape_err, Error, Result};
use crate::nn::{ops, Conv2d, ConvSpec, Mode, ParamStore};
use crate::schedules::WeightSet;

/// Tap points of the perceptual loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureLevel {
    /// relu2_2
    #[serde(rename = "vgg22")]
    Vgg22,
    /// relu3_4
    #[serde(rename = "vgg34")]
    Vgg34,
    /// relu4_4
    #[serde(rename = "vgg44")]
    Vgg44,
    /// relu5_4
    #[serde(rename = "vgg54")]
    Vgg54,
}

impl FeatureLevel {
    pub const COUNT: usize = 4;
    pub const ALL: [FeatureLevel; 4] = [
        FeatureLevel::Vgg22,
        FeatureLevel::Vgg34,
        FeatureLevel::Vgg44,
        FeatureLevel::Vgg54,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// VGG block the tap sits in (1-based).
    pub fn stage(self) -> usize {
        self.index() + 2
    }

    /// Number of convolutions evaluated up to and including the tap.
    pub fn depth(self) -> usize {
        STAGE_END[self.stage() - 1]
    }

    /// Smallest input side that still yields a non-empty feature map.
    pub fn min_input_side(self) -> usize {
        1 << (self.stage() - 1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureLevel::Vgg22 => "vgg22",
            FeatureLevel::Vgg34 => "vgg34",
            FeatureLevel::Vgg44 => "vgg44",
            FeatureLevel::Vgg54 => "vgg54",
        }
    }
}

impl std::fmt::Display for FeatureLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

const STAGE_CONVS: [usize; 5] = [2, 2, 4, 4, 4];
/// Cumulative conv count at the end of each block.
const STAGE_END: [usize; 5] = [2, 4, 8, 12, 16];
const STAGE_WIDTH_MULT: [usize; 5] = [1, 2, 4, 8, 8];
/// Index of each convolution inside torchvision's `features` sequential.
pub const TORCHVISION_CONV_INDICES: [usize; 16] =
    [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34];
/// Taps used for dense perceptual maps: relu1_2, relu2_2, relu3_4, relu4_4, relu5_4.
pub const MAP_TAP_DEPTHS: [usize; 5] = STAGE_END;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// File name looked up inside the weights cache directory.
pub const WEIGHTS_FILE: &str = "vgg19.safetensors";
/// Environment variable naming the weights cache directory.
pub const CACHE_ENV: &str = "FXSR_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorSource {
    Pretrained { path: PathBuf },
    /// Random weights with the VGG-19 topology and `base_width` channels in
    /// the first block (64 for the canonical network).
    Seeded { seed: u64, base_width: usize },
}

impl ExtractorSource {
    pub fn label(&self) -> String {
        match self {
            ExtractorSource::Pretrained { .. } => "pretrained".into(),
            ExtractorSource::Seeded { seed, base_width } => {
                format!("seeded({seed}, width {base_width})")
            }
        }
    }

    /// The pretrained file from `$FXSR_CACHE` if present, else seeded weights.
    pub fn resolve(seed: u64, base_width: usize) -> Self {
        if let Some(dir) = std::env::var_os(CACHE_ENV) {
            let path = Path::new(&dir).join(WEIGHTS_FILE);
            if path.is_file() {
                return ExtractorSource::Pretrained { path };
            }
            log::warn!(
                "{} not found; falling back to a seeded feature network",
                path.display()
            );
        }
        ExtractorSource::Seeded { seed, base_width }
    }
}

/// Frozen VGG-19 feature network.
#[derive(Debug)]
pub struct FeatureExtractor {
    convs: Vec<Conv2d>,
    mean: Tensor,
    std: Tensor,
    source: ExtractorSource,
    dtype: DType,
    conv_calls: AtomicUsize,
}

impl FeatureExtractor {
    pub fn new(source: ExtractorSource, dtype: DType) -> Result<Self> {
        let convs = match &source {
            ExtractorSource::Pretrained { path } => load_pretrained(path, dtype)?,
            ExtractorSource::Seeded { seed, base_width } => seeded(*seed, *base_width, dtype)?.1,
        };
        let dev = Device::Cpu;
        let mean = Tensor::from_vec(IMAGENET_MEAN.to_vec(), (1, 3, 1, 1), &dev)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(IMAGENET_STD.to_vec(), (1, 3, 1, 1), &dev)?.to_dtype(dtype)?;
        Ok(Self {
            convs,
            mean,
            std,
            source,
            dtype,
            conv_calls: AtomicUsize::new(0),
        })
    }

    pub fn seeded(seed: u64, base_width: usize, dtype: DType) -> Result<Self> {
        Self::new(ExtractorSource::Seeded { seed, base_width }, dtype)
    }

    pub fn source(&self) -> &ExtractorSource {
        &self.source
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Total convolutions evaluated so far (each counts once per batch).
    pub fn conv_calls(&self) -> usize {
        self.conv_calls.load(Ordering::Relaxed)
    }

    pub fn reset_conv_calls(&self) {
        self.conv_calls.store(0, Ordering::Relaxed);
    }

    /// Activations after conv number `d` (1-based) for each requested depth.
    /// Only the prefix of the network up to the deepest tap is evaluated.
    pub fn taps(&self, x: &Tensor, depths: &[usize]) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(shape_err!("feature network expects 3 channels, got {c}"));
        }
        let Some(&deepest) = depths.iter().max() else {
            return Ok(Vec::new());
        };
        if deepest == 0 || deepest > self.convs.len() {
            return Err(domain!("tap depth {deepest} outside 1..=16"));
        }
        let stage = STAGE_END.iter().position(|&e| deepest <= e).unwrap() + 1;
        let min = 1usize << (stage - 1);
        if h < min || w < min {
            return Err(domain!(
                "input {h}x{w} too small for the requested features (minimum {min}x{min})"
            ));
        }

        let mut out: Vec<Option<Tensor>> = vec![None; depths.len()];
        let mut hcur = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        for (i, conv) in self.convs[..deepest].iter().enumerate() {
            if i > 0 && STAGE_END.contains(&i) {
                hcur = ops::max_pool2x2(&hcur)?;
            }
            hcur = ops::relu(&conv.forward(&hcur, Mode::Frozen)?)?;
            self.conv_calls.fetch_add(1, Ordering::Relaxed);
            for (slot, &d) in out.iter_mut().zip(depths) {
                if d == i + 1 {
                    *slot = Some(hcur.clone());
                }
            }
        }
        Ok(out.into_iter().map(|t| t.expect("tap filled")).collect())
    }

    /// Features of `x` (`(B, 3, H, W)`, values in `[0, 1]`) at `level`.
    pub fn extract(&self, x: &Tensor, level: FeatureLevel) -> Result<Tensor> {
        Ok(self.taps(x, &[level.depth()])?.remove(0))
    }
}

fn seeded(seed: u64, base_width: usize, dtype: DType) -> Result<(ParamStore, Vec<Conv2d>)> {
    if base_width == 0 {
        return Err(Error::Config("extractor base width must be positive".into()));
    }
    let mut store = ParamStore::new(dtype);
    let mut b = store.builder("features", seed);
    let mut convs = Vec::with_capacity(16);
    let mut cin = 3;
    let mut k = 0;
    for (stage, &n) in STAGE_CONVS.iter().enumerate() {
        let cout = base_width * STAGE_WIDTH_MULT[stage];
        for _ in 0..n {
            let idx = TORCHVISION_CONV_INDICES[k];
            convs.push(b.conv2d(&idx.to_string(), ConvSpec::same(cin, cout, 3), 1.0, true)?);
            cin = cout;
            k += 1;
        }
    }
    drop(b);
    Ok((store, convs))
}

fn load_pretrained(path: &Path, dtype: DType) -> Result<Vec<Conv2d>> {
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::Data(format!("cannot read feature weights {}: {e}", path.display())))?;
    let mut convs = Vec::with_capacity(16);
    let mut cin = 3;
    for idx in TORCHVISION_CONV_INDICES {
        let get = |leaf: &str| {
            let name = format!("features.{idx}.{leaf}");
            tensors
                .get(&name)
                .ok_or_else(|| Error::Data(format!("{}: missing {name}", path.display())))
        };
        let w = get("weight")?.to_dtype(dtype)?;
        let b = get("bias")?.to_dtype(dtype)?;
        let (o, i, kh, kw) = w.dims4()?;
        if i != cin || kh != 3 || kw != 3 || b.dims() != [o] {
            return Err(Error::Data(format!(
                "{}: features.{idx} has unexpected shape {:?}",
                path.display(),
                w.dims()
            )));
        }
        convs.push(Conv2d::from_tensors(w, Some(b), 1, 1)?);
        cin = o;
    }
    Ok(convs)
}

/// Plain L2 norm of the per-image feature difference, averaged over the batch.
pub fn feature_l2(fa: &Tensor, fb: &Tensor) -> Result<Tensor> {
    if fa.dims() != fb.dims() {
        return Err(shape_err!("feature shapes differ: {:?} vs {:?}", fa.dims(), fb.dims()));
    }
    // `sqrt(u + e^2) - e` keeps the gradient finite at u = 0 and is exactly 0 there.
    let (e2, e) = match fa.dtype() {
        DType::F32 => (1e-24f32 as f64, (1e-24f32).sqrt() as f64),
        _ => (1e-24f64, 1e-24f64.sqrt()),
    };
    let b = fa.dim(0)?;
    let sq = (fa - fb)?.sqr()?.reshape((b, ()))?.sum(1)?;
    let norms = ((sq + e2)?.sqrt()? - e)?;
    Ok(norms.mean_all()?)
}

/// Distance between `a` and `b` in the feature space of `level`.
pub fn feature_distance(
    ex: &FeatureExtractor,
    a: &Tensor,
    b: &Tensor,
    level: FeatureLevel,
) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(shape_err!("image shapes differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let fa = ex.extract(a, level)?;
    let fb = ex.extract(b, level)?;
    feature_l2(&fa, &fb)
}

/// `sum_l w_l * feature_distance(sr, hr, l)` over levels with nonzero weight.
///
/// `sr` and `hr` go through the network as one batch and only as deep as the
/// deepest active level. Gradients flow into `sr` only.
pub fn conditional_perceptual_loss(
    ex: &FeatureExtractor,
    sr: &Tensor,
    hr: &Tensor,
    w: &WeightSet,
) -> Result<Tensor> {
    if sr.dims() != hr.dims() {
        return Err(shape_err!("image shapes differ: {:?} vs {:?}", sr.dims(), hr.dims()));
    }
    let active: Vec<(FeatureLevel, f64)> = w.active_levels().collect();
    if active.is_empty() {
        return Ok(Tensor::zeros((), sr.dtype(), sr.device())?);
    }
    let b = sr.dim(0)?;
    let both = Tensor::cat(&[sr, &hr.detach()], 0)?;
    let depths: Vec<usize> = active.iter().map(|(l, _)| l.depth()).collect();
    let feats = ex.taps(&both, &depths)?;
    let mut total: Option<Tensor> = None;
    for (f, (_, weight)) in feats.iter().zip(&active) {
        let d = (feature_l2(&f.narrow(0, 0, b)?, &f.narrow(0, b, b)?.detach())? * *weight)?;
        total = Some(match total {
            None => d,
            Some(t) => (t + d)?,
        });
    }
    Ok(total.expect("at least one active level"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{weights_at, ScheduleVariant};
    use rand::{Rng, SeedableRng};

    fn rand_img(b: usize, h: usize, w: usize, seed: u64, dtype: DType) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * 3 * h * w).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(data, (b, 3, h, w), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn weights(per: [f64; 4]) -> WeightSet {
        WeightSet {
            w_rec: 0.0,
            w_adv: 0.0,
            w_per: per,
        }
    }

    #[test]
    fn spatial_dims_per_level() {
        let ex = FeatureExtractor::seeded(0, 4, DType::F32).unwrap();
        let x = rand_img(1, 64, 64, 1, DType::F32);
        assert_eq!(ex.extract(&x, FeatureLevel::Vgg22).unwrap().dims(), [1, 8, 32, 32]);
        assert_eq!(ex.extract(&x, FeatureLevel::Vgg34).unwrap().dims(), [1, 16, 16, 16]);
        assert_eq!(ex.extract(&x, FeatureLevel::Vgg44).unwrap().dims(), [1, 32, 8, 8]);
        assert_eq!(ex.extract(&x, FeatureLevel::Vgg54).unwrap().dims(), [1, 32, 4, 4]);
    }

    #[test]
    fn too_small_input_names_minimum() {
        let ex = FeatureExtractor::seeded(0, 4, DType::F32).unwrap();
        let x = rand_img(1, 8, 8, 1, DType::F32);
        let err = ex.extract(&x, FeatureLevel::Vgg54).unwrap_err();
        assert!(matches!(&err, Error::Domain(m) if m.contains("16x16")), "{err}");
        assert!(ex.extract(&x, FeatureLevel::Vgg44).is_ok());
    }

    #[test]
    fn extraction_is_deterministic() {
        let a = FeatureExtractor::seeded(5, 4, DType::F32).unwrap();
        let b = FeatureExtractor::seeded(5, 4, DType::F32).unwrap();
        let x = rand_img(2, 16, 16, 3, DType::F32);
        let fa = a.extract(&x, FeatureLevel::Vgg34).unwrap().flatten_all().unwrap();
        let fb = b.extract(&x, FeatureLevel::Vgg34).unwrap().flatten_all().unwrap();
        let fa2 = a.extract(&x, FeatureLevel::Vgg34).unwrap().flatten_all().unwrap();
        assert_eq!(fa.to_vec1::<f32>().unwrap(), fb.to_vec1::<f32>().unwrap());
        assert_eq!(fa.to_vec1::<f32>().unwrap(), fa2.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn distance_of_identical_inputs_is_zero_and_symmetric() {
        let ex = FeatureExtractor::seeded(1, 4, DType::F64).unwrap();
        let a = rand_img(2, 16, 16, 7, DType::F64);
        let b = rand_img(2, 16, 16, 8, DType::F64);
        for level in FeatureLevel::ALL {
            assert_eq!(scalar(&feature_distance(&ex, &a, &a, level).unwrap()), 0.0);
            let ab = scalar(&feature_distance(&ex, &a, &b, level).unwrap());
            let ba = scalar(&feature_distance(&ex, &b, &a, level).unwrap());
            assert!(ab > 0.0);
            assert_eq!(ab, ba);
        }
        let f32ex = FeatureExtractor::seeded(1, 4, DType::F32).unwrap();
        let a32 = rand_img(1, 16, 16, 7, DType::F32);
        assert_eq!(
            scalar(&feature_distance(&f32ex, &a32, &a32, FeatureLevel::Vgg22).unwrap()),
            0.0
        );
    }

    #[test]
    fn distance_matches_flattened_norm_oracle() {
        let ex = FeatureExtractor::seeded(2, 4, DType::F64).unwrap();
        let a = rand_img(2, 16, 16, 9, DType::F64);
        let b = rand_img(2, 16, 16, 10, DType::F64);
        let level = FeatureLevel::Vgg34;
        let fa = ex.extract(&a, level).unwrap();
        let fb = ex.extract(&b, level).unwrap();
        let mut oracle = 0.0;
        for i in 0..2 {
            let va = fa.get(i).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let vb = fb.get(i).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let mut s = 0.0;
            for (x, y) in va.iter().zip(&vb) {
                s += (x - y) * (x - y);
            }
            oracle += s.sqrt() / 2.0;
        }
        let got = scalar(&feature_distance(&ex, &a, &b, level).unwrap());
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn mismatched_shapes_are_structural_errors() {
        let ex = FeatureExtractor::seeded(2, 4, DType::F32).unwrap();
        let a = rand_img(1, 16, 16, 1, DType::F32);
        let b = rand_img(1, 16, 24, 1, DType::F32);
        assert!(matches!(
            feature_distance(&ex, &a, &b, FeatureLevel::Vgg22),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            conditional_perceptual_loss(&ex, &a, &b, &weights([1.0, 0.0, 0.0, 0.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conditional_loss_combinations() {
        let ex = FeatureExtractor::seeded(3, 4, DType::F64).unwrap();
        let sr = rand_img(2, 16, 16, 11, DType::F64);
        let hr = rand_img(2, 16, 16, 12, DType::F64);

        assert_eq!(
            scalar(&conditional_perceptual_loss(&ex, &sr, &hr, &weights([0.0; 4])).unwrap()),
            0.0
        );
        let single = scalar(
            &conditional_perceptual_loss(&ex, &sr, &hr, &weights([1.0, 0.0, 0.0, 0.0])).unwrap(),
        );
        let direct = scalar(&feature_distance(&ex, &sr, &hr, FeatureLevel::Vgg22).unwrap());
        assert!((single - direct).abs() < 1e-12);

        let mixed = scalar(
            &conditional_perceptual_loss(&ex, &sr, &hr, &weights([0.0, 0.3, 0.7, 0.0])).unwrap(),
        );
        let d34 = scalar(&feature_distance(&ex, &sr, &hr, FeatureLevel::Vgg34).unwrap());
        let d44 = scalar(&feature_distance(&ex, &sr, &hr, FeatureLevel::Vgg44).unwrap());
        assert!((mixed - (0.3 * d34 + 0.7 * d44)).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_levels_are_not_evaluated() {
        let ex = FeatureExtractor::seeded(3, 4, DType::F32).unwrap();
        let sr = rand_img(1, 16, 16, 1, DType::F32);
        let hr = rand_img(1, 16, 16, 2, DType::F32);
        conditional_perceptual_loss(&ex, &sr, &hr, &weights([0.0; 4])).unwrap();
        assert_eq!(ex.conv_calls(), 0);
        let pd = weights_at(0.6, ScheduleVariant::Pd).unwrap();
        conditional_perceptual_loss(&ex, &sr, &hr, &pd).unwrap();
        assert_eq!(ex.conv_calls(), FeatureLevel::Vgg22.depth());
        ex.reset_conv_calls();
        let ds = weights_at(1.0, ScheduleVariant::Ds).unwrap();
        conditional_perceptual_loss(&ex, &sr, &hr, &ds).unwrap();
        assert_eq!(ex.conv_calls(), 16);
    }

    #[test]
    fn pretrained_file_round_trip() {
        let seeded = FeatureExtractor::seeded(4, 64, DType::F32).unwrap();
        let mut named: HashMap<String, Tensor> =
            super::seeded(4, 64, DType::F32).unwrap().0.tensors().into_iter().collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        candle_core::safetensors::save(&named, &path).unwrap();
        let loaded = FeatureExtractor::new(
            ExtractorSource::Pretrained { path: path.clone() },
            DType::F32,
        )
        .unwrap();
        let x = rand_img(1, 16, 16, 5, DType::F32);
        let a = seeded.extract(&x, FeatureLevel::Vgg34).unwrap().flatten_all().unwrap();
        let b = loaded.extract(&x, FeatureLevel::Vgg34).unwrap().flatten_all().unwrap();
        assert_eq!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
        assert_eq!(loaded.source().label(), "pretrained");

        named.remove("features.34.bias");
        candle_core::safetensors::save(&named, &path).unwrap();
        let err = FeatureExtractor::new(ExtractorSource::Pretrained { path }, DType::F32);
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
