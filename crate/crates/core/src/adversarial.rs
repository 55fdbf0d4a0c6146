//! VGG-style discriminator and relativistic-average GAN losses.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape_err, Error, Result};
use crate::nn::{ops, BatchNorm, Conv2d, ConvSpec, Linear, Mode, ParamStore};

const SLOPE: f64 = 0.2;
const HEAD_HIDDEN: usize = 100;
/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;
/// Channel multiplier of each of the ten conv layers, relative to `base_width`.
const WIDTH_MULT: [usize; 10] = [1, 1, 2, 2, 4, 4, 8, 8, 8, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    /// Side of the square HR patches the discriminator judges.
    pub input_size: usize,
}

impl DiscriminatorConfig {
    pub const CONV_LAYERS: usize = 10;
    /// Total downsampling of the conv stack.
    pub const REDUCTION: usize = 32;

    pub fn standard(input_size: usize) -> Self {
        Self {
            base_width: 64,
            input_size,
        }
    }

    pub fn toy(input_size: usize) -> Self {
        Self {
            base_width: 8,
            input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("discriminator base_width must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % Self::REDUCTION != 0 {
            return Err(Error::Config(format!(
                "discriminator input_size {} must be a positive multiple of {}",
                self.input_size,
                Self::REDUCTION
            )));
        }
        Ok(())
    }

    /// Stride of conv layer `i` (0-based): every second layer halves the resolution.
    pub fn stride(i: usize) -> usize {
        if i % 2 == 1 {
            2
        } else {
            1
        }
    }

    /// Spatial side after each conv layer.
    pub fn spatial_sides(&self) -> Vec<usize> {
        let mut side = self.input_size;
        (0..Self::CONV_LAYERS)
            .map(|i| {
                side = ops::conv_out_dim(side, 3, Self::stride(i), 1);
                side
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<Option<BatchNorm>>,
    fc1: Linear,
    fc2: Linear,
}

impl Discriminator {
    pub const PREFIX: &'static str = "discriminator";

    pub fn new(config: DiscriminatorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut b = params.builder(Self::PREFIX, seed);
        let mut convs = Vec::with_capacity(DiscriminatorConfig::CONV_LAYERS);
        let mut norms = Vec::with_capacity(DiscriminatorConfig::CONV_LAYERS);
        let mut cin = 3;
        for (i, mult) in WIDTH_MULT.iter().enumerate() {
            let cout = config.base_width * mult;
            let spec = ConvSpec::same(cin, cout, 3).strided(DiscriminatorConfig::stride(i));
            // The first layer has no normalization, so it keeps its bias.
            convs.push(b.conv2d(&format!("conv{i}"), spec, 1.0, i == 0)?);
            norms.push(if i == 0 {
                None
            } else {
                Some(b.batch_norm(&format!("bn{i}"), cout)?)
            });
            cin = cout;
        }
        let side = config.input_size / DiscriminatorConfig::REDUCTION;
        let fc1 = b.linear("fc1", cin * side * side, HEAD_HIDDEN, 1.0)?;
        let fc2 = b.linear("fc2", HEAD_HIDDEN, 1, 1.0)?;
        Ok(Self {
            config,
            params,
            convs,
            norms,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Raw logits `C(x)`, shape `(B,)`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(shape_err!(
                "discriminator expects (B, 3, {s}, {s}), got ({b}, {c}, {h}, {w})"
            ));
        }
        let mut hcur = x.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            hcur = conv.forward(&hcur, mode)?;
            if let Some(bn) = norm {
                hcur = bn.forward(&hcur, mode)?;
            }
            hcur = ops::leaky_relu(&hcur, SLOPE)?;
        }
        let flat = hcur.reshape((b, ()))?;
        let hidden = ops::leaky_relu(&self.fc1.forward(&flat, mode)?, SLOPE)?;
        Ok(self.fc2.forward(&hidden, mode)?.reshape(b)?)
    }
}

/// Relativistic logits and probabilities of one batch.
#[derive(Debug, Clone)]
pub struct RadOutputs {
    /// `C(real_i) - mean(C(fake))`
    pub real_rel: Tensor,
    /// `C(fake_j) - mean(C(real))`
    pub fake_rel: Tensor,
}

impl RadOutputs {
    /// `D~(real_i)`
    pub fn d_real(&self) -> Result<Tensor> {
        Ok(ops::sigmoid(&self.real_rel)?)
    }

    /// `D~(fake_j)`
    pub fn d_fake(&self) -> Result<Tensor> {
        Ok(ops::sigmoid(&self.fake_rel)?)
    }
}

pub fn rad_probabilities(real_logits: &Tensor, fake_logits: &Tensor) -> Result<RadOutputs> {
    if real_logits.rank() != 1 || fake_logits.rank() != 1 {
        return Err(shape_err!(
            "logits must be vectors, got {:?} and {:?}",
            real_logits.dims(),
            fake_logits.dims()
        ));
    }
    if real_logits.elem_count() == 0 || fake_logits.elem_count() == 0 {
        return Err(domain!("relativistic probabilities need non-empty logit batches"));
    }
    let real_rel = real_logits.broadcast_sub(&fake_logits.mean_all()?)?;
    let fake_rel = fake_logits.broadcast_sub(&real_logits.mean_all()?)?;
    Ok(RadOutputs { real_rel, fake_rel })
}

/// `-mean(log(max(p, eps)))` where `p = sigmoid(z)`.
fn neg_mean_log_sigmoid(z: &Tensor) -> Result<Tensor> {
    let p = ops::sigmoid(z)?;
    let floor = p.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if floor < PROB_EPS {
        log::debug!("clamping relativistic probability {floor:e} to {PROB_EPS:e}");
    }
    Ok(p.maximum(PROB_EPS)?.log()?.mean_all()?.neg()?)
}

/// Generator-side loss `-E[log D~(fake)] - E[log(1 - D~(real))]`.
pub fn adversarial_loss(out: &RadOutputs) -> Result<Tensor> {
    // 1 - sigmoid(z) is evaluated as sigmoid(-z) to avoid cancellation.
    Ok((neg_mean_log_sigmoid(&out.fake_rel)? + neg_mean_log_sigmoid(&out.real_rel.neg()?)?)?)
}

/// Discriminator-side loss `-E[log D~(real)] - E[log(1 - D~(fake))]`.
pub fn discriminator_loss(out: &RadOutputs) -> Result<Tensor> {
    Ok((neg_mean_log_sigmoid(&out.real_rel)? + neg_mean_log_sigmoid(&out.fake_rel.neg()?)?)?)
}
