//! Finite-difference checks of the analytic gradients in double precision.

mod common;

use candle_core::{DType, Var};
use fxsr::adversarial::{Discriminator, DiscriminatorConfig};
use fxsr::generator::Backbone;
use fxsr::nn::Mode;
use fxsr::schedules::{weights_at, ScheduleVariant, WeightSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::fd::{check, generator_check, perceptual_check, random, tiny_generator};

#[test]
fn generator_gradients_match_finite_differences() {
    generator_check(Backbone::RrdbSft);
}

#[test]
fn residual_block_generator_gradients_match_finite_differences() {
    generator_check(Backbone::RbSft);
}

#[test]
fn generator_gradient_reaches_inputs_and_map() {
    let g = tiny_generator(Backbone::RrdbSft);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lr = Var::from_tensor(&random(&mut rng, &[1, 3, 8, 8], 0.0, 1.0)).unwrap();
    let map = Var::from_tensor(&random(&mut rng, &[1, 1, 8, 8], 0.0, 1.0)).unwrap();
    let probe = random(&mut rng, &[1, 3, 32, 32], -1.0, 1.0);
    let loss = || {
        let out = g.forward(lr.as_tensor(), map.as_tensor()).unwrap();
        (out * &probe).unwrap().sum_all().unwrap()
    };
    let vars = vec![("lr".to_string(), lr.clone()), ("map".to_string(), map.clone())];
    check(&vars, &loss, 5);
}

#[test]
fn conditional_perceptual_loss_gradient_matches_finite_differences() {
    perceptual_check(weights_at(0.7, ScheduleVariant::Pd).unwrap(), 10);
    perceptual_check(weights_at(0.4, ScheduleVariant::Ds).unwrap(), 20);
    perceptual_check(
        WeightSet {
            w_rec: 0.0,
            w_adv: 0.0,
            w_per: [0.25, 0.5, 0.75, 1.0],
        },
        30,
    );
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let cfg = DiscriminatorConfig {
        base_width: 2,
        input_size: 32,
    };
    let d = Discriminator::new(cfg, DType::F64, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[3, 3, 32, 32], 0.0, 1.0);
    let probe = random(&mut rng, &[3], -1.0, 1.0);
    let loss = || {
        let out = d.forward(&x, Mode::Train).unwrap();
        (out * &probe).unwrap().sum_all().unwrap()
    };
    let vars: Vec<(String, Var)> = d.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    check(&vars, &loss, 12);
}

