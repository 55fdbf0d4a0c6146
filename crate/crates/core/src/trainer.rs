//! Alternating discriminator/generator optimization of the style-conditioned objective.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    adversarial_loss, discriminator_loss, rad_probabilities, Discriminator, DiscriminatorConfig,
};
use crate::checkpoint::{moment_name, Checkpoint, Manifest, OptimizerSteps, FORMAT_VERSION};
use crate::data::{Batch, BatchSampler, DegradationSpec, PairedPatch, HR_PATCH};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::Mode;
use crate::optim::{check_finite_grads, Adam, AdamConfig};
use crate::perceptual::{conditional_perceptual_loss, ExtractorSource, FeatureExtractor};
use crate::raster::Image;
use crate::schedules::{
    check_style_value, lambda_coeffs, weights_at, LossCoefficients, LossConstants,
    ScheduleVariant, WeightSet,
};

/// Training runs in single precision.
pub const TRAIN_DTYPE: DType = DType::F32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub seed: u64,
    /// First-block width of the seeded fallback network (64 = canonical VGG-19).
    pub base_width: usize,
}

impl ExtractorConfig {
    pub fn source(&self) -> ExtractorSource {
        ExtractorSource::resolve(self.seed, self.base_width)
    }

    pub fn build(&self, dtype: DType) -> Result<FeatureExtractor> {
        FeatureExtractor::new(self.source(), dtype)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: ScheduleVariant,
    pub scale: usize,
    pub constants: LossConstants,
    pub optimizer: AdamConfig,
    pub lr0: f64,
    pub lr_halve_at: Vec<u64>,
    pub total_iters: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub hr_patch: usize,
    pub augment: bool,
    pub checkpoint_every: u64,
    /// Leading iterations trained with the reconstruction loss only.
    pub warmup_iters: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    pub degradation: DegradationSpec,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub extractor: ExtractorConfig,
}

impl TrainConfig {
    /// Full-size model and schedule.
    pub fn full(variant: ScheduleVariant, scale: usize) -> Self {
        Self {
            variant,
            scale,
            constants: LossConstants::for_variant(variant),
            optimizer: AdamConfig::default(),
            lr0: 1e-4,
            lr_halve_at: vec![5000, 10000, 20000, 30000],
            total_iters: 40000,
            seed: 0,
            batch_size: 16,
            hr_patch: HR_PATCH,
            augment: true,
            checkpoint_every: 5000,
            warmup_iters: 0,
            init_checkpoint: None,
            degradation: DegradationSpec::bicubic(scale),
            generator: GeneratorConfig::rrdb23(scale),
            discriminator: DiscriminatorConfig::standard(HR_PATCH),
            extractor: ExtractorConfig {
                seed: 0,
                base_width: 64,
            },
        }
    }

    /// Two-block preset sized for CPU runs. Training from scratch, the first
    /// half is an L1-only warmup that stands in for a pretrained reconstruction
    /// model, at a higher rate than the full schedule.
    pub fn toy(variant: ScheduleVariant, scale: usize) -> Self {
        Self {
            lr0: 5e-4,
            lr_halve_at: vec![1000, 1500],
            warmup_iters: 1000,
            total_iters: 2000,
            batch_size: 4,
            checkpoint_every: 500,
            generator: GeneratorConfig::toy(scale),
            discriminator: DiscriminatorConfig::toy(HR_PATCH),
            extractor: ExtractorConfig {
                seed: 0,
                base_width: 16,
            },
            ..Self::full(variant, scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.constants.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.degradation.validate()?;
        if self.generator.scale != self.scale || self.degradation.scale != self.scale {
            return Err(Error::Config(format!(
                "scale {} disagrees with generator ({}) or degradation ({})",
                self.scale, self.generator.scale, self.degradation.scale
            )));
        }
        if self.discriminator.input_size != self.hr_patch {
            return Err(Error::Config(format!(
                "discriminator input_size {} must equal hr_patch {}",
                self.discriminator.input_size, self.hr_patch
            )));
        }
        if self.hr_patch % self.scale != 0 {
            return Err(Error::Config("hr_patch must be divisible by scale".into()));
        }
        if self.lr_halve_at.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr_halve_at must be strictly increasing".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size and checkpoint_every must be positive".into()));
        }
        let b = self.optimizer;
        if !(0.0..1.0).contains(&b.beta1) || !(0.0..1.0).contains(&b.beta2) || b.eps <= 0.0 {
            return Err(Error::Config("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Stable hash of the serialized configuration.
    pub fn fingerprint(&self) -> Result<u64> {
        let text = self.to_toml()?;
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
        Ok(hash)
    }
}

/// `lr0 * 2^-h`, `h` = number of schedule points `<= iteration`.
pub fn lr_at(iteration: u64, lr0: f64, halve_at: &[u64]) -> f64 {
    let h = halve_at.iter().filter(|&&p| p <= iteration).count();
    lr0 * 0.5f64.powi(h as i32)
}

/// Every loss term of one step, before and after weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iteration: u64,
    pub t: f64,
    pub lr: f64,
    pub weights: WeightSet,
    pub coeffs: LossCoefficients,
    pub l_rec: f64,
    pub l_adv: f64,
    pub l_per: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_dis: Option<f64>,
    pub weighted_rec: f64,
    pub weighted_adv: f64,
    pub weighted_per: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn check_finite(&self) -> Result<()> {
        let vals = [self.l_rec, self.l_adv, self.l_per, self.total, self.l_dis.unwrap_or(0.0)];
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical(format!(
                "non-finite loss at iteration {}: {}",
                self.iteration,
                serde_json::to_string(self).unwrap_or_default()
            )))
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean absolute error.
pub fn reconstruction_loss(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    Ok((sr - hr)?.abs()?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub iteration: u64,
    pub sampler: BatchSampler,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator, TRAIN_DTYPE, config.seed)?;
        let discriminator =
            Discriminator::new(config.discriminator, TRAIN_DTYPE, config.seed.wrapping_add(1))?;
        if let Some(init) = &config.init_checkpoint {
            let ck = Checkpoint::load(init)?;
            generator.params().assign(&ck.params(Generator::PREFIX))?;
            log::info!("generator initialized from {}", init.display());
        }
        let sampler = BatchSampler::with_patch(
            config.seed.wrapping_add(2),
            config.scale,
            config.hr_patch,
            config.augment,
        );
        Ok(Self {
            g_opt: Adam::new(config.optimizer),
            d_opt: Adam::new(config.optimizer),
            config,
            generator,
            discriminator,
            iteration: 0,
            sampler,
        })
    }

    pub fn manifest(&self, extractor: &ExtractorSource) -> Manifest {
        Manifest {
            format: FORMAT_VERSION,
            variant: self.config.variant,
            scale: self.config.scale,
            iteration: self.iteration,
            generator: self.config.generator,
            constants: self.config.constants,
            extractor: extractor.label(),
            discriminator: Some(self.config.discriminator),
            optimizer_steps: Some(OptimizerSteps {
                generator: self.g_opt.step_count(),
                discriminator: self.d_opt.step_count(),
            }),
            sampler: Some(self.sampler.state()),
            train: Some(self.config.clone()),
        }
    }

    pub fn to_checkpoint(&self, extractor: &ExtractorSource) -> Checkpoint {
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        tensors.extend(self.generator.params().tensors());
        tensors.extend(self.discriminator.params().tensors());
        for (net, opt) in [("generator", &self.g_opt), ("discriminator", &self.d_opt)] {
            for (name, m) in opt.moments() {
                tensors.insert(moment_name(net, "m", name), m.m.clone());
                tensors.insert(moment_name(net, "v", name), m.v.clone());
            }
        }
        Checkpoint {
            manifest: self.manifest(extractor),
            tensors,
        }
    }

    /// Rebuilds the full training state from a checkpoint written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.manifest;
        let mut config = m
            .train
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        config.init_checkpoint = None;
        let mut state = Self::new(config)?;
        state.generator.params().assign(&ck.params(Generator::PREFIX))?;
        state.discriminator.params().assign(&ck.params(Discriminator::PREFIX))?;
        let steps = m
            .optimizer_steps
            .ok_or_else(|| Error::Checkpoint("missing optimizer steps".into()))?;
        state.g_opt.restore(steps.generator, ck.moments("generator")?);
        state.d_opt.restore(steps.discriminator, ck.moments("discriminator")?);
        let sampler = m
            .sampler
            .ok_or_else(|| Error::Checkpoint("missing sampler state".into()))?;
        state.sampler.restore(sampler);
        state.iteration = m.iteration;
        state.config.init_checkpoint = m.train.as_ref().and_then(|t| t.init_checkpoint.clone());
        Ok(state)
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.iteration, self.config.lr0, &self.config.lr_halve_at)
    }
}

fn flat_maps(batch: usize, h: usize, w: usize, t: f64) -> Result<Tensor> {
    Ok(Tensor::full(t, (batch, 1, h, w), &candle_core::Device::Cpu)?.to_dtype(TRAIN_DTYPE)?)
}

/// One optimization step on `batch` with its style value `batch.t`.
pub fn train_step(
    state: &mut TrainState,
    extractor: &FeatureExtractor,
    batch: &Batch,
) -> Result<LossBreakdown> {
    let t = batch.t;
    check_style_value(t)?;
    let warmup = state.iteration < state.config.warmup_iters;
    let lr = state.lr();
    let weights = weights_at(t, state.config.variant)?;
    let coeffs = lambda_coeffs(&weights, &state.config.constants)?;

    let lr_t = Image::stack(&batch.lr, TRAIN_DTYPE)?;
    let hr_t = Image::stack(&batch.hr, TRAIN_DTYPE)?;
    let (b, _, h, w) = lr_t.dims4()?;
    let maps = flat_maps(b, h, w, t)?;
    let sr = state.generator.forward(&lr_t, &maps)?;

    let adversarial = weights.w_adv > 0.0 && !warmup;
    let mut l_dis = None;
    if adversarial {
        let d = &state.discriminator;
        let real = d.forward(&hr_t, Mode::Train)?;
        let fake = d.forward(&sr.detach(), Mode::Train)?;
        let loss = discriminator_loss(&rad_probabilities(&real, &fake)?)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite discriminator loss at iteration {}",
                state.iteration
            )));
        }
        let grads = loss.backward()?;
        check_finite_grads(d.params(), &grads)?;
        state.d_opt.step(d.params(), &grads, lr)?;
        l_dis = Some(v);
    }

    let l_rec_t = reconstruction_loss(&sr, &hr_t)?;
    let mut total = (&l_rec_t * coeffs.lambda_rec)?;
    let mut l_adv = 0.0;
    let mut l_per = 0.0;
    let (mut weighted_adv, mut weighted_per) = (0.0, 0.0);
    if warmup {
        total = l_rec_t.clone();
    } else {
        if adversarial {
            let d = &state.discriminator;
            let real = d.forward(&hr_t, Mode::Frozen)?.detach();
            let fake = d.forward(&sr, Mode::Frozen)?;
            let l = adversarial_loss(&rad_probabilities(&real, &fake)?)?;
            l_adv = scalar(&l)?;
            weighted_adv = coeffs.lambda_adv * l_adv;
            total = (total + (l * coeffs.lambda_adv)?)?;
        }
        if weights.active_levels().next().is_some() {
            let l = conditional_perceptual_loss(extractor, &sr, &hr_t, &weights)?;
            l_per = scalar(&l)?;
            weighted_per = coeffs.lambda_per * l_per;
            total = (total + (l * coeffs.lambda_per)?)?;
        }
    }
    let l_rec = scalar(&l_rec_t)?;
    let breakdown = LossBreakdown {
        iteration: state.iteration,
        t,
        lr,
        weights,
        coeffs,
        l_rec,
        l_adv,
        l_per,
        l_dis,
        weighted_rec: if warmup { l_rec } else { coeffs.lambda_rec * l_rec },
        weighted_adv,
        weighted_per,
        total: scalar(&total)?,
    };
    breakdown.check_finite()?;
    let grads = total.backward()?;
    check_finite_grads(state.generator.params(), &grads)?;
    state.g_opt.step(state.generator.params(), &grads, lr)?;
    state.iteration += 1;
    Ok(breakdown)
}

pub const LOG_FILE: &str = "train.jsonl";
pub const LATEST: &str = "latest.safetensors";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:07}.safetensors")
}

/// Drops log records beyond `iteration` (left over from an interrupted run).
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("iteration").and_then(|i| i.as_u64()))
                .is_some_and(|i| i < iteration)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    crate::io::write_atomic(path, kept.as_bytes())
}

/// Runs (or resumes) training until `config.total_iters`, checkpointing into `out_dir`.
///
/// Returns the final state. Checkpoints go to `ckpt_{iteration}.safetensors`
/// every `checkpoint_every` iterations and at the end, with `latest.safetensors`
/// mirroring the newest one.
pub fn train(
    mut state: TrainState,
    pairs: &[PairedPatch],
    out_dir: &Path,
    mut on_step: impl FnMut(&LossBreakdown),
) -> Result<TrainState> {
    if pairs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let extractor = state.config.extractor.build(TRAIN_DTYPE)?;
    let source = extractor.source().clone();
    log::info!("perceptual features: {}", source.label());
    let save = |s: &TrainState| -> Result<()> {
        let ck = s.to_checkpoint(&source);
        ck.save(&out_dir.join(checkpoint_name(s.iteration)))?;
        ck.save(&out_dir.join(LATEST))
    };
    let log_path = out_dir.join(LOG_FILE);
    truncate_log(&log_path, state.iteration)?;
    if state.iteration == 0 {
        save(&state)?;
    }
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    while state.iteration < state.config.total_iters {
        let batch = state.sampler.sample(pairs, state.config.batch_size)?;
        let br = train_step(&mut state, &extractor, &batch)?;
        writeln!(log, "{}", serde_json::to_string(&br).expect("breakdown serializes"))?;
        on_step(&br);
        if state.iteration % state.config.checkpoint_every == 0
            || state.iteration == state.config.total_iters
        {
            log.flush()?;
            save(&state)?;
        }
    }
    Ok(state)
}
