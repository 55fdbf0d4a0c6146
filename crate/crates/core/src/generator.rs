//! Style-conditioned super-resolution generator.
//!
//! Two streams share one forward pass:
//!
//! * the **condition branch** maps the LR-sized style map through four
//!   pointwise (1x1) layers, so every output pixel of the branch depends only
//!   on the style value at that pixel;
//! * the **SR branch** is an ESRGAN-style trunk at LR resolution whose blocks
//!   are preceded by spatial feature transform (SFT) layers. Each SFT site owns
//!   two pointwise heads that turn the shared condition features into a
//!   per-pixel scale `gamma` and shift `beta`.
//!
//! Upsampling happens once at the end (nearest x2 followed by a conv, repeated
//! `log2(scale)` times), so the condition features line up with every SFT site
//! without resampling.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape_err, Error, Result};
use crate::nn::{ops, Conv2d, ConvSpec, Mode, ParamBuilder, ParamStore};
use crate::raster::Image;

/// Negative slope of the leaky rectifiers in the SR trunk.
const TRUNK_SLOPE: f64 = 0.2;
/// Negative slope used inside the condition branch.
const CONDITION_SLOPE: f64 = 0.1;
/// Residual scaling inside dense blocks and RRDBs.
const RESIDUAL_SCALE: f64 = 0.2;
/// Initialization gain for convolutions inside the residual trunk.
const TRUNK_INIT_GAIN: f64 = 0.1;
const CONDITION_LAYERS: usize = 4;

/// Per-pixel style control, sized like the LR input, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl StyleMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err!(
                "style map has {} values, expected {height}x{width}",
                values.len()
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(domain!("style map value {bad} outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// The flat map `t * 1`.
    pub fn flat(height: usize, width: usize, t: f64) -> Result<Self> {
        Self::new(height, width, vec![t; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self::new(height, width, values)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(shape_err!("style map crop out of bounds"));
        }
        Self::from_fn(height, width, |y, x| self.get(top + y, left + x))
    }

    /// `(min, max, mean)`
    pub fn stats(&self) -> (f64, f64, f64) {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.values.iter().sum::<f64>() / self.values.len().max(1) as f64;
        (min, max, mean)
    }

    pub fn check_matches(&self, lr_height: usize, lr_width: usize) -> Result<()> {
        if (self.height, self.width) != (lr_height, lr_width) {
            return Err(shape_err!(
                "style map is {}x{} but the LR image is {lr_height}x{lr_width}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_vec(
            self.values.clone(),
            (1, 1, self.height, self.width),
            &Device::Cpu,
        )?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// Trunk block family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Residual-in-residual dense blocks, one SFT layer before each dense block.
    RrdbSft,
    /// Plain residual blocks with SFT before each convolution.
    RbSft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub scale: usize,
    pub backbone: Backbone,
    pub blocks: usize,
    pub trunk_width: usize,
    /// Growth channels of each dense layer (RRDB backbone only).
    pub growth: usize,
    pub condition_width: usize,
}

impl GeneratorConfig {
    /// 23 RRDBs with SFT, width 64, growth 32.
    pub fn rrdb23(scale: usize) -> Self {
        Self {
            scale,
            backbone: Backbone::RrdbSft,
            blocks: 23,
            trunk_width: 64,
            growth: 32,
            condition_width: 32,
        }
    }

    /// 16 residual blocks with SFT, width 64.
    pub fn rb16(scale: usize) -> Self {
        Self {
            scale,
            backbone: Backbone::RbSft,
            blocks: 16,
            trunk_width: 64,
            growth: 32,
            condition_width: 32,
        }
    }

    /// 2 RRDBs, width 16, growth 8: small enough to train on a CPU.
    pub fn toy(scale: usize) -> Self {
        Self {
            scale,
            backbone: Backbone::RrdbSft,
            blocks: 2,
            trunk_width: 16,
            growth: 8,
            condition_width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 4 | 8) {
            return Err(Error::Config(format!(
                "unsupported scale {} (expected 4 or 8)",
                self.scale
            )));
        }
        if self.blocks == 0 || self.trunk_width == 0 || self.condition_width == 0 {
            return Err(Error::Config(
                "blocks, trunk_width and condition_width must be positive".into(),
            ));
        }
        if self.backbone == Backbone::RrdbSft && self.growth == 0 {
            return Err(Error::Config("growth must be positive".into()));
        }
        Ok(())
    }

    pub fn upsampling_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }
}

/// The `(gamma, beta)` pair of one spatial feature transform.
#[derive(Debug, Clone)]
pub struct SftParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// `gamma * features + beta`, elementwise.
pub fn sft_modulate(features: &Tensor, params: &SftParams) -> Result<Tensor> {
    if features.dims() != params.gamma.dims() || features.dims() != params.beta.dims() {
        return Err(shape_err!(
            "SFT shapes differ: features {:?}, gamma {:?}, beta {:?}",
            features.dims(),
            params.gamma.dims(),
            params.beta.dims()
        ));
    }
    Ok(((features * &params.gamma)? + &params.beta)?)
}

/// Pointwise network turning the style map into shared condition features.
#[derive(Debug, Clone)]
pub struct ConditionBranch {
    layers: Vec<Conv2d>,
}

impl ConditionBranch {
    fn new(b: &mut ParamBuilder, width: usize) -> Result<Self> {
        let layers = (0..CONDITION_LAYERS)
            .map(|i| {
                let cin = if i == 0 { 1 } else { width };
                b.conv2d(&i.to_string(), ConvSpec::pointwise(cin, width), 1.0, true)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `(B, 1, H, W)` map to `(B, width, H, W)` features.
    pub fn forward(&self, map: &Tensor) -> Result<Tensor> {
        self.forward_mode(map, Mode::Train)
    }

    fn forward_mode(&self, map: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = map.clone();
        for layer in &self.layers {
            h = ops::leaky_relu(&layer.forward(&h, mode)?, CONDITION_SLOPE)?;
        }
        Ok(h)
    }
}

/// One SFT site: two pointwise heads over the shared condition features.
#[derive(Debug, Clone)]
struct SftLayer {
    gamma: Conv2d,
    beta: Conv2d,
}

impl SftLayer {
    fn new(b: &mut ParamBuilder, condition_width: usize, channels: usize) -> Result<Self> {
        let spec = ConvSpec::pointwise(condition_width, channels);
        Ok(Self {
            gamma: b.conv2d("gamma", spec, TRUNK_INIT_GAIN, true)?,
            beta: b.conv2d("beta", spec, TRUNK_INIT_GAIN, true)?,
        })
    }

    /// The head output is an offset from the identity transform (`gamma = 1 + head`).
    fn params(&self, condition: &Tensor, mode: Mode) -> Result<SftParams> {
        Ok(SftParams {
            gamma: (self.gamma.forward(condition, mode)? + 1.0)?,
            beta: self.beta.forward(condition, mode)?,
        })
    }

    fn forward(&self, x: &Tensor, condition: &Tensor, mode: Mode) -> Result<Tensor> {
        sft_modulate(x, &self.params(condition, mode)?)
    }
}

#[derive(Debug, Clone)]
struct DenseBlock {
    convs: Vec<Conv2d>,
}

impl DenseBlock {
    fn new(b: &mut ParamBuilder, width: usize, growth: usize) -> Result<Self> {
        let convs = (0..5)
            .map(|i| {
                let cin = width + i * growth;
                let cout = if i == 4 { width } else { growth };
                b.conv2d(
                    &format!("conv{}", i + 1),
                    ConvSpec::same(cin, cout, 3),
                    TRUNK_INIT_GAIN,
                    true,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut feats = vec![x.clone()];
        for conv in &self.convs[..4] {
            let input = Tensor::cat(&feats, 1)?;
            feats.push(ops::leaky_relu(&conv.forward(&input, mode)?, TRUNK_SLOPE)?);
        }
        let last = self.convs[4].forward(&Tensor::cat(&feats, 1)?, mode)?;
        Ok((x + (last * RESIDUAL_SCALE)?)?)
    }
}

/// RRDB whose three dense blocks are each preceded by an SFT layer.
#[derive(Debug, Clone)]
struct RrdbSft {
    stages: Vec<(SftLayer, DenseBlock)>,
}

impl RrdbSft {
    fn new(b: &mut ParamBuilder, cfg: &GeneratorConfig) -> Result<Self> {
        let stages = (1..=3)
            .map(|i| {
                let sft = SftLayer::new(
                    &mut b.pp(format!("sft{i}")),
                    cfg.condition_width,
                    cfg.trunk_width,
                )?;
                let rdb = DenseBlock::new(&mut b.pp(format!("rdb{i}")), cfg.trunk_width, cfg.growth)?;
                Ok((sft, rdb))
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    fn forward(&self, x: &Tensor, condition: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (sft, rdb) in &self.stages {
            h = rdb.forward(&sft.forward(&h, condition, mode)?, mode)?;
        }
        Ok((x + (h * RESIDUAL_SCALE)?)?)
    }
}

/// Residual block `x + conv(SFT(relu(conv(SFT(x)))))`.
#[derive(Debug, Clone)]
struct ResBlockSft {
    sft0: SftLayer,
    conv0: Conv2d,
    sft1: SftLayer,
    conv1: Conv2d,
}

impl ResBlockSft {
    fn new(b: &mut ParamBuilder, cfg: &GeneratorConfig) -> Result<Self> {
        let (cw, w) = (cfg.condition_width, cfg.trunk_width);
        Ok(Self {
            sft0: SftLayer::new(&mut b.pp("sft0"), cw, w)?,
            conv0: b.conv2d("conv0", ConvSpec::same(w, w, 3), TRUNK_INIT_GAIN, true)?,
            sft1: SftLayer::new(&mut b.pp("sft1"), cw, w)?,
            conv1: b.conv2d("conv1", ConvSpec::same(w, w, 3), TRUNK_INIT_GAIN, true)?,
        })
    }

    fn forward(&self, x: &Tensor, condition: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.sft0.forward(x, condition, mode)?;
        let h = ops::relu(&self.conv0.forward(&h, mode)?)?;
        let h = self.sft1.forward(&h, condition, mode)?;
        let h = self.conv1.forward(&h, mode)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
enum Trunk {
    Rrdb(Vec<RrdbSft>),
    ResBlocks {
        blocks: Vec<ResBlockSft>,
        final_sft: SftLayer,
    },
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    condition: ConditionBranch,
    conv_first: Conv2d,
    trunk: Trunk,
    trunk_conv: Conv2d,
    upconvs: Vec<Conv2d>,
    hr_conv: Conv2d,
    conv_last: Conv2d,
}

impl Generator {
    pub const PREFIX: &'static str = "generator";

    pub fn new(config: GeneratorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut b = params.builder(Self::PREFIX, seed);
        let w = config.trunk_width;
        let condition = ConditionBranch::new(&mut b.pp("condition"), config.condition_width)?;
        let conv_first = b.conv2d("conv_first", ConvSpec::same(3, w, 3), 1.0, true)?;
        let trunk = match config.backbone {
            Backbone::RrdbSft => {
                let mut tb = b.pp("trunk");
                Trunk::Rrdb(
                    (0..config.blocks)
                        .map(|i| RrdbSft::new(&mut tb.pp(i), &config))
                        .collect::<Result<_>>()?,
                )
            }
            Backbone::RbSft => {
                let mut tb = b.pp("trunk");
                let blocks = (0..config.blocks)
                    .map(|i| ResBlockSft::new(&mut tb.pp(i), &config))
                    .collect::<Result<_>>()?;
                let final_sft = SftLayer::new(&mut tb.pp("sft_final"), config.condition_width, w)?;
                Trunk::ResBlocks { blocks, final_sft }
            }
        };
        let trunk_conv = b.conv2d("trunk_conv", ConvSpec::same(w, w, 3), TRUNK_INIT_GAIN, true)?;
        let upconvs = (0..config.upsampling_stages())
            .map(|i| b.conv2d(&format!("upconv{}", i + 1), ConvSpec::same(w, w, 3), 1.0, true))
            .collect::<Result<_>>()?;
        let hr_conv = b.conv2d("hr_conv", ConvSpec::same(w, w, 3), 1.0, true)?;
        let conv_last = b.conv2d("conv_last", ConvSpec::same(w, 3, 3), 1.0, true)?;
        Ok(Self {
            config,
            params,
            condition,
            conv_first,
            trunk,
            trunk_conv,
            upconvs,
            hr_conv,
            conv_last,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn condition_branch(&self) -> &ConditionBranch {
        &self.condition
    }

    /// `lr`: `(B, 3, h, w)`; `map`: `(B, 1, h, w)`. Returns `(B, 3, h*s, w*s)`.
    pub fn forward(&self, lr: &Tensor, map: &Tensor) -> Result<Tensor> {
        self.forward_mode(lr, map, Mode::Train)
    }

    /// Forward pass that records no parameter gradients.
    pub fn infer(&self, lr: &Tensor, map: &Tensor) -> Result<Tensor> {
        self.forward_mode(lr, map, Mode::Frozen)
    }

    fn forward_mode(&self, lr: &Tensor, map: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = lr.dims4()?;
        if c != 3 {
            return Err(shape_err!("generator expects 3 input channels, got {c}"));
        }
        let (mb, mc, mh, mw) = map.dims4()?;
        if (mb, mc, mh, mw) != (b, 1, h, w) {
            return Err(shape_err!(
                "style map {mh}x{mw} (batch {mb}, {mc} ch) does not match LR {h}x{w} (batch {b})"
            ));
        }
        let condition = self.condition.forward_mode(map, mode)?;
        let fea = self.conv_first.forward(lr, mode)?;
        let mut trunk = fea.clone();
        match &self.trunk {
            Trunk::Rrdb(blocks) => {
                for block in blocks {
                    trunk = block.forward(&trunk, &condition, mode)?;
                }
            }
            Trunk::ResBlocks { blocks, final_sft } => {
                for block in blocks {
                    trunk = block.forward(&trunk, &condition, mode)?;
                }
                trunk = final_sft.forward(&trunk, &condition, mode)?;
            }
        }
        let mut x = (fea + self.trunk_conv.forward(&trunk, mode)?)?;
        for up in &self.upconvs {
            x = ops::leaky_relu(
                &up.forward(&ops::upsample_nearest(&x, 2)?, mode)?,
                TRUNK_SLOPE,
            )?;
        }
        let x = ops::leaky_relu(&self.hr_conv.forward(&x, mode)?, TRUNK_SLOPE)?;
        self.conv_last.forward(&x, mode)
    }

    /// Single-image convenience wrapper around [`Generator::forward`].
    pub fn generate(&self, lr: &Image, map: &StyleMap) -> Result<Image> {
        if lr.channels() != 3 {
            return Err(shape_err!("LR image must be RGB, got {} channels", lr.channels()));
        }
        map.check_matches(lr.height(), lr.width())?;
        let x = lr.to_tensor(self.dtype())?;
        let m = map.to_tensor(self.dtype())?;
        Image::from_tensor(&self.infer(&x, &m)?)
    }
}
