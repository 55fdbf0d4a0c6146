use std::net::{SocketAddr, ToSocketAddrs};
use std::path::Path;
use std::time::Instant;

use fxsr::checkpoint::Checkpoint;
use fxsr::data::{load_eval_pairs, load_pairs, materialize, DegradationSpec};
use fxsr::inference::{encode_style_map, load_style_map, resize_style_map, sweep_entry_name, MapSource, SrModel};
use fxsr::metrics::{evaluate, extractor_for};
use fxsr::raster::Image;
use fxsr::schedules::{LossConstants, ScheduleVariant};
use fxsr::synth::synth_set;
use fxsr::trainer::{train, TrainConfig, TrainState, LATEST};

use crate::config::Config;
use crate::{write_output, CliError, Command, EvalArgs, Preset, TrainArgs};

/// How often training progress is logged.
const LOG_EVERY: u64 = 50;

/// Folds command-line flags into the configuration (flags win).
pub fn apply_flags(config: &mut Config, command: &Command) {
    match command {
        Command::Train(a) => apply_train_flags(&mut config.train, a),
        Command::Prepare(a) => {
            if let Some(s) = a.scale {
                set_scale(&mut config.train, s);
            }
            if a.jpeg_quality.is_some() {
                config.train.degradation.jpeg_quality = a.jpeg_quality;
            }
        }
        Command::Serve(a) => {
            if let Some(h) = &a.host {
                config.serve.host = h.clone();
            }
            if let Some(p) = a.port {
                config.serve.port = p;
            }
            if a.models.is_some() {
                config.serve.models = a.models.clone();
            }
        }
        _ => {}
    }
}

fn set_scale(c: &mut TrainConfig, scale: usize) {
    c.scale = scale;
    c.generator.scale = scale;
    c.degradation.scale = scale;
}

fn apply_train_flags(c: &mut TrainConfig, a: &TrainArgs) {
    let variant: ScheduleVariant = a.variant.map(Into::into).unwrap_or(c.variant);
    let scale = a.scale.unwrap_or(c.scale);
    if let Some(preset) = a.preset {
        let seed = c.seed;
        *c = match preset {
            Preset::Full => TrainConfig::full(variant, scale),
            Preset::Toy => TrainConfig::toy(variant, scale),
        };
        c.seed = seed;
    }
    if variant != c.variant {
        c.variant = variant;
        c.constants = LossConstants::for_variant(variant);
    }
    set_scale(c, scale);
    if let Some(n) = a.iters {
        c.total_iters = n;
    }
    if let Some(n) = a.batch_size {
        c.batch_size = n;
    }
    if let Some(n) = a.checkpoint_every {
        c.checkpoint_every = n;
    }
    if a.init.is_some() {
        c.init_checkpoint = a.init.clone();
    }
}

pub fn execute(command: &Command, config: &Config) -> Result<(), CliError> {
    match command {
        Command::Prepare(a) => {
            config.train.degradation.validate()?;
            let pairs = load_pairs(&a.input, &config.train.degradation)?;
            materialize(&pairs, &a.out)?;
            println!("{} pairs written to {}", pairs.len(), a.out.display());
            Ok(())
        }
        Command::Train(a) => run_train(a, &config.train),
        Command::Infer(a) => {
            let model = SrModel::load(&a.model)?;
            let lr = load_rgb(&a.lr)?;
            let source = match (a.t, &a.map) {
                (Some(t), None) => MapSource::Scalar(t),
                (None, Some(p)) => MapSource::File(p.clone()),
                _ => return Err(CliError::usage("give exactly one of --t or --map".into())),
            };
            let start = Instant::now();
            let sr = model.super_resolve(&lr, &source)?;
            sr.save(&a.out)?;
            log::info!(
                "{}: {}x{} -> {}x{} in {:.2?}",
                a.out.display(),
                lr.height(),
                lr.width(),
                sr.height(),
                sr.width(),
                start.elapsed()
            );
            Ok(())
        }
        Command::Sweep(a) => {
            let model = SrModel::load(&a.model)?;
            let lr = load_rgb(&a.lr)?;
            let ts = &a.ts.0;
            for (i, (t, img)) in ts.iter().zip(model.sweep(&lr, ts)?).enumerate() {
                img.save(a.outdir.join(sweep_entry_name(i, *t)))?;
            }
            println!("{} images written to {}", ts.len(), a.outdir.display());
            Ok(())
        }
        Command::Eval(a) => run_eval(a, false),
        Command::Pdcurve(a) => run_eval(a, true),
        Command::Serve(_) => {
            let s = &config.serve;
            let models = s
                .models
                .as_deref()
                .ok_or_else(|| CliError::usage("serve needs --models DIR (or serve.models in the config)".into()))?;
            let addr = resolve_addr(&s.host, s.port)?;
            fxsr_service::run(addr, models)?;
            Ok(())
        }
        Command::ResizeMap(a) => {
            // Decoding as a plain image first gives the dimensions to validate against.
            let probe = Image::load(&a.map)?;
            let map = load_style_map(&a.map, probe.dims())?;
            let (h, w) = match (&a.like, a.size) {
                (Some(like), None) => Image::load(like)?.dims(),
                (None, Some(d)) => d,
                _ => return Err(CliError::usage("give exactly one of --like or --size".into())),
            };
            write_output(&a.out, &encode_style_map(&resize_style_map(&map, h, w)?)?)
        }
        Command::Synth(a) => {
            let dir = a.out.join("hr");
            for (i, img) in synth_set(config.seed, a.count, a.height, a.width).iter().enumerate() {
                img.save(dir.join(format!("synth_{i:03}.png")))?;
            }
            println!("{} images written to {}", a.count, dir.display());
            Ok(())
        }
    }
}

fn resolve_addr(host: &str, port: u16) -> Result<SocketAddr, CliError> {
    (host, port)
        .to_socket_addrs()
        .ok()
        .and_then(|mut a| a.next())
        .ok_or_else(|| CliError::usage(format!("cannot resolve address {host}:{port}")))
}

fn load_rgb(path: &Path) -> Result<Image, CliError> {
    let img = Image::load(path)?;
    if img.channels() != 3 {
        return Err(CliError::data(format!("{} must be an RGB image", path.display())));
    }
    Ok(img)
}

/// Loads the newest checkpoint in `out` when it was produced by `cfg`
/// (ignoring the iteration budget and checkpoint cadence).
fn resume(out: &Path, cfg: &TrainConfig) -> Result<Option<TrainState>, CliError> {
    let latest = out.join(LATEST);
    if !latest.is_file() {
        return Ok(None);
    }
    let mut state = TrainState::from_checkpoint(&Checkpoint::load(&latest)?)?;
    let mut previous = state.config.clone();
    previous.total_iters = cfg.total_iters;
    previous.checkpoint_every = cfg.checkpoint_every;
    if &previous != cfg {
        return Err(CliError::config(format!(
            "{} was written with a different training configuration; pass --fresh to start over",
            latest.display()
        )));
    }
    state.config = previous;
    Ok(Some(state))
}

fn run_train(a: &TrainArgs, cfg: &TrainConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let pairs = load_pairs(&a.data, &cfg.degradation)?;
    let state = match if a.fresh { None } else { resume(&a.out, cfg)? } {
        Some(s) => {
            log::info!("resuming at iteration {}", s.iteration);
            s
        }
        None => TrainState::new(cfg.clone())?,
    };
    log::info!(
        "training {} x{} on {} pairs for {} iterations",
        cfg.variant,
        cfg.scale,
        pairs.len(),
        cfg.total_iters
    );
    let start = Instant::now();
    let done = train(state, &pairs, &a.out, |b| {
        if b.iteration % LOG_EVERY == 0 {
            log::info!(
                "iter {} t={:.2} rec={:.4} adv={:.4} per={:.4} total={:.4} ({:.0?})",
                b.iteration,
                b.t,
                b.l_rec,
                b.l_adv,
                b.l_per,
                b.total,
                start.elapsed()
            );
        }
    })?;
    println!("{}", a.out.join(LATEST).display());
    log::info!("finished at iteration {}", done.iteration);
    Ok(())
}

fn run_eval(a: &EvalArgs, plot: bool) -> Result<(), CliError> {
    let model = SrModel::load(&a.model)?;
    let spec = model
        .manifest()
        .train
        .as_ref()
        .map(|c| c.degradation)
        .unwrap_or_else(|| DegradationSpec::bicubic(model.scale()));
    let pairs = load_eval_pairs(&a.dataset, &spec)?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.dataset
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let ex = extractor_for(model.manifest())?;
    let report = evaluate(&model, &ex, &name, &pairs, &a.ts.0)?;
    report.write(&a.out, plot)?;
    print!("{}", report.summary_csv());
    Ok(())
}
