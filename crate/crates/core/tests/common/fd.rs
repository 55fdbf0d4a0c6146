//! Finite-difference checks of analytic gradients in double precision.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use fxsr::generator::{Backbone, Generator, GeneratorConfig};
use fxsr::perceptual::{conditional_perceptual_loss, FeatureExtractor};
use fxsr::schedules::WeightSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Rounding noise of one loss evaluation.
const LOSS_NOISE: f64 = 1e-12;
/// Directions whose difference quotients at `eps` and `eps / 2` disagree by
/// more than this straddle a ReLU kink and are redrawn.
const KINK_TOL: f64 = 1e-5;
const MAX_DRAWS: usize = 8;

pub fn random(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

fn quotient(var: &Var, base: &Tensor, d: &Tensor, eps: f64, loss: &dyn Fn() -> Tensor) -> f64 {
    var.set(&(base + (d * eps).unwrap()).unwrap()).unwrap();
    let plus = scalar(&loss());
    var.set(&(base - (d * eps).unwrap()).unwrap()).unwrap();
    let minus = scalar(&loss());
    var.set(base).unwrap();
    (plus - minus) / (2.0 * eps)
}

/// Compares `<grad, d>` with a central difference along a random direction `d`
/// for every variable. Returns the worst relative error.
pub fn check(vars: &[(String, Var)], loss: &dyn Fn() -> Tensor, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = loss().backward().unwrap();
    let mut worst: f64 = 0.0;
    for (name, var) in vars {
        let base = var.as_tensor().copy().unwrap();
        let g = grads
            .get(var)
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        let mut compared = false;
        for _ in 0..MAX_DRAWS {
            let d = random(&mut rng, base.dims(), -1.0, 1.0);
            let analytic = scalar(&(g * &d).unwrap().sum_all().unwrap());
            let coarse = quotient(var, &base, &d, EPS, loss);
            let fine = quotient(var, &base, &d, EPS / 2.0, loss);
            let spread = (coarse - fine).abs();
            if spread > KINK_TOL * coarse.abs().max(fine.abs()) + LOSS_NOISE / EPS {
                continue;
            }
            let err = rel(analytic, fine);
            assert!(
                err < TOL,
                "{name}: analytic {analytic:e} numeric {fine:e} rel err {err:e}"
            );
            worst = worst.max(err);
            compared = true;
            break;
        }
        assert!(compared, "{name}: every direction crossed a kink");
    }
    worst
}

/// Moves every parameter to a fresh random point with fan-in scaling, so no
/// tensor's gradient sits near the rounding floor the way small-gain
/// initializations do.
pub fn rerandomize(vars: &[(String, Var)], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, var) in vars {
        let dims = var.as_tensor().dims().to_vec();
        let fan_in: usize = if dims.len() > 1 { dims[1..].iter().product() } else { dims[0] };
        let bound = (3.0 / fan_in as f64).sqrt();
        var.set(&random(&mut rng, &dims, -bound, bound)).unwrap();
    }
}

pub fn tiny_generator(backbone: Backbone) -> Generator {
    let cfg = GeneratorConfig {
        scale: 4,
        backbone,
        blocks: 2,
        trunk_width: 8,
        growth: 4,
        condition_width: 8,
    };
    Generator::new(cfg, DType::F64, 3).unwrap()
}

pub fn generator_check(backbone: Backbone) -> f64 {
    let start = Instant::now();
    let g = tiny_generator(backbone);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lr = random(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
    let map = random(&mut rng, &[1, 1, 4, 4], 0.0, 1.0);
    let probe = random(&mut rng, &[1, 3, 16, 16], -1.0, 1.0);
    let loss = || {
        let out = g.forward(&lr, &map).unwrap();
        (out * &probe).unwrap().sum_all().unwrap()
    };
    let vars: Vec<(String, Var)> = g.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    rerandomize(&vars, 8);
    assert!(vars.iter().any(|(k, _)| k.contains("sft")));
    assert!(vars.iter().any(|(k, _)| k.contains("condition")));
    let worst = check(&vars, &loss, 2);
    eprintln!("{backbone:?}: {} tensors, worst rel err {worst:e}, {:?}", vars.len(), start.elapsed());
    assert!(start.elapsed().as_secs() < 60);
    worst
}

pub fn perceptual_check(w: WeightSet, seed: u64) -> f64 {
    let start = Instant::now();
    let ex = FeatureExtractor::seeded(7, 4, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = Var::from_tensor(&random(&mut rng, &[2, 3, 16, 16], 0.0, 1.0)).unwrap();
    let hr = random(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);
    let loss = || conditional_perceptual_loss(&ex, sr.as_tensor(), &hr, &w).unwrap();
    assert!(scalar(&loss()) > 0.0);
    let worst = check(&[("sr".to_string(), sr.clone())], &loss, seed + 1);
    eprintln!("perceptual {w:?}: worst rel err {worst:e}, {:?}", start.elapsed());
    assert!(start.elapsed().as_secs() < 60);
    worst
}
