//! Style-dependent loss weights and the loss coefficients derived from them.
//!
//! A style value `t` in `[0, 1]` selects how the generator objective mixes the
//! reconstruction, adversarial and perceptual terms. Two schedules exist:
//!
//! * [`ScheduleVariant::Pd`] ramps linearly from a pure reconstruction
//!   objective at `t = 0` to adversarial + VGG22 perceptual at `t = 1`.
//! * [`ScheduleVariant::Ds`] keeps the adversarial term on and slides the
//!   perceptual term across VGG22 → VGG34 → VGG44 → VGG54 using overlapping
//!   tents with knots at `k/3`, which sum to one for every `t`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::perceptual::FeatureLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleVariant {
    Pd,
    Ds,
}

impl ScheduleVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleVariant::Pd => "pd",
            ScheduleVariant::Ds => "ds",
        }
    }

    /// The reconstruction gain `eta` used with this schedule.
    pub fn default_eta(self) -> f64 {
        match self {
            ScheduleVariant::Pd => 10.0,
            ScheduleVariant::Ds => 1.0,
        }
    }
}

impl std::fmt::Display for ScheduleVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScheduleVariant {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pd" => Ok(ScheduleVariant::Pd),
            "ds" => Ok(ScheduleVariant::Ds),
            other => Err(crate::error::Error::Config(format!(
                "unknown schedule variant {other:?} (expected \"pd\" or \"ds\")"
            ))),
        }
    }
}

/// Loss weights at one style value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub w_rec: f64,
    pub w_adv: f64,
    /// Indexed by [`FeatureLevel::index`].
    pub w_per: [f64; FeatureLevel::COUNT],
}

impl WeightSet {
    pub fn perceptual(&self, level: FeatureLevel) -> f64 {
        self.w_per[level.index()]
    }

    /// Levels with a nonzero perceptual weight, shallowest first.
    pub fn active_levels(&self) -> impl Iterator<Item = (FeatureLevel, f64)> + '_ {
        FeatureLevel::ALL
            .into_iter()
            .map(|l| (l, self.perceptual(l)))
            .filter(|(_, w)| *w != 0.0)
    }
}

pub fn check_style_value(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(domain!("style value t={t} outside [0, 1]"));
    }
    Ok(())
}

pub fn weights_at(t: f64, variant: ScheduleVariant) -> Result<WeightSet> {
    check_style_value(t)?;
    let mut w_per = [0.0; FeatureLevel::COUNT];
    let weights = match variant {
        ScheduleVariant::Pd => {
            w_per[FeatureLevel::Vgg22.index()] = t;
            WeightSet {
                w_rec: 1.0 - t,
                w_adv: t,
                w_per,
            }
        }
        ScheduleVariant::Ds => {
            for (k, w) in w_per.iter_mut().enumerate() {
                *w = ds_tent(t, k);
            }
            WeightSet {
                w_rec: 1.0 - t,
                w_adv: 1.0,
                w_per,
            }
        }
    };
    Ok(weights)
}

/// Tent centred on knot `k/3` with half-width `1/3`.
///
/// Evaluated as `max(0, 1 - |3t - k|)`, which keeps neighbouring tents exact
/// complements of each other between knots.
fn ds_tent(t: f64, k: usize) -> f64 {
    (1.0 - (3.0 * t - k as f64).abs()).max(0.0)
}

/// The constants of the conditional objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    pub lambda_rec_o: f64,
    pub lambda_adv_o: f64,
    pub lambda_per: f64,
    pub eta: f64,
}

impl LossConstants {
    pub fn for_variant(variant: ScheduleVariant) -> Self {
        Self {
            lambda_rec_o: 1e-2,
            lambda_adv_o: 5e-3,
            lambda_per: 1.0,
            eta: variant.default_eta(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec_o", self.lambda_rec_o),
            ("lambda_adv_o", self.lambda_adv_o),
            ("lambda_per", self.lambda_per),
            ("eta", self.eta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(domain!("{name}={v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_per: f64,
}

pub fn lambda_coeffs(w: &WeightSet, constants: &LossConstants) -> Result<LossCoefficients> {
    constants.validate()?;
    Ok(LossCoefficients {
        lambda_rec: constants.lambda_rec_o + constants.eta * w.w_rec,
        lambda_adv: constants.lambda_adv_o * w.w_adv,
        lambda_per: constants.lambda_per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use FeatureLevel::*;

    #[test]
    fn pd_examples() {
        let w = weights_at(0.0, ScheduleVariant::Pd).unwrap();
        assert_eq!((w.w_rec, w.w_adv, w.perceptual(Vgg22)), (1.0, 0.0, 0.0));
        let w = weights_at(1.0, ScheduleVariant::Pd).unwrap();
        assert_eq!((w.w_rec, w.w_adv, w.perceptual(Vgg22)), (0.0, 1.0, 1.0));
        let w = weights_at(0.5, ScheduleVariant::Pd).unwrap();
        assert_eq!((w.w_rec, w.w_adv, w.perceptual(Vgg22)), (0.5, 0.5, 0.5));
        for l in [Vgg34, Vgg44, Vgg54] {
            assert_eq!(w.perceptual(l), 0.0);
        }
    }

    #[test]
    fn ds_examples() {
        let w = weights_at(1.0, ScheduleVariant::Ds).unwrap();
        assert_eq!(w.w_per, [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(w.w_adv, 1.0);
        let w = weights_at(0.0, ScheduleVariant::Ds).unwrap();
        assert_eq!(w.w_per, [1.0, 0.0, 0.0, 0.0]);
        // 3 * 0.5 = 1.5 sits halfway between knots 1 and 2.
        let w = weights_at(0.5, ScheduleVariant::Ds).unwrap();
        assert_eq!(w.w_per, [0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn out_of_range_t_is_a_domain_error() {
        for t in [-0.01, 1.01, f64::NAN] {
            assert!(matches!(
                weights_at(t, ScheduleVariant::Pd),
                Err(crate::Error::Domain(_))
            ));
        }
    }

    #[test]
    fn coefficient_examples() {
        let pd = LossConstants::for_variant(ScheduleVariant::Pd);
        let w0 = weights_at(0.0, ScheduleVariant::Pd).unwrap();
        let c = lambda_coeffs(&w0, &pd).unwrap();
        assert!((c.lambda_rec - 10.01).abs() < 1e-12);
        assert_eq!(c.lambda_adv, 0.0);
        assert_eq!(c.lambda_per, 1.0);

        let ds = LossConstants::for_variant(ScheduleVariant::Ds);
        let w1 = weights_at(1.0, ScheduleVariant::Ds).unwrap();
        let c = lambda_coeffs(&w1, &ds).unwrap();
        assert!((c.lambda_rec - 0.01).abs() < 1e-12);
    }

    #[test]
    fn negative_constants_rejected() {
        let mut k = LossConstants::for_variant(ScheduleVariant::Pd);
        k.eta = -1.0;
        let w = weights_at(0.3, ScheduleVariant::Pd).unwrap();
        assert!(matches!(lambda_coeffs(&w, &k), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn variant_strings() {
        assert_eq!(ScheduleVariant::Pd.to_string(), "pd");
        assert_eq!("DS".parse::<ScheduleVariant>().unwrap(), ScheduleVariant::Ds);
        assert_eq!(serde_json::to_string(&ScheduleVariant::Ds).unwrap(), "\"ds\"");
    }

    proptest! {
        #[test]
        fn ds_partition_of_unity(t in 0.0f64..=1.0) {
            let w = weights_at(t, ScheduleVariant::Ds).unwrap();
            let sum: f64 = w.w_per.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn weights_stay_in_unit_interval(t in 0.0f64..=1.0, ds in any::<bool>()) {
            let v = if ds { ScheduleVariant::Ds } else { ScheduleVariant::Pd };
            let w = weights_at(t, v).unwrap();
            for x in [w.w_rec, w.w_adv].iter().chain(w.w_per.iter()) {
                prop_assert!(x.is_finite() && (0.0..=1.0).contains(x));
            }
            if v == ScheduleVariant::Pd {
                prop_assert!(w.w_per[1..].iter().all(|&x| x == 0.0));
            }
        }

        #[test]
        fn weights_are_lipschitz(t in 0.0f64..(1.0 - 1e-6), ds in any::<bool>()) {
            let v = if ds { ScheduleVariant::Ds } else { ScheduleVariant::Pd };
            let eps = 1e-6;
            let a = weights_at(t, v).unwrap();
            let b = weights_at(t + eps, v).unwrap();
            let diffs = [a.w_rec - b.w_rec, a.w_adv - b.w_adv]
                .into_iter()
                .chain(a.w_per.iter().zip(&b.w_per).map(|(x, y)| x - y));
            for d in diffs {
                prop_assert!(d.abs() <= 4.0 * eps);
            }
        }

        #[test]
        fn pd_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let wl = weights_at(lo, ScheduleVariant::Pd).unwrap();
            let wh = weights_at(hi, ScheduleVariant::Pd).unwrap();
            prop_assert!(wh.w_rec <= wl.w_rec);
            prop_assert!(wh.w_adv >= wl.w_adv);
            prop_assert!(wh.perceptual(Vgg22) >= wl.perceptual(Vgg22));
        }

        #[test]
        fn coefficients_follow_closed_form(
            w_rec in 0.0f64..=1.0,
            w_adv in 0.0f64..=1.0,
            rec_o in 0.0f64..1.0,
            adv_o in 0.0f64..1.0,
            per in 0.0f64..2.0,
            eta in 0.0f64..20.0,
        ) {
            let w = WeightSet { w_rec, w_adv, w_per: [0.0; 4] };
            let k = LossConstants { lambda_rec_o: rec_o, lambda_adv_o: adv_o, lambda_per: per, eta };
            let c = lambda_coeffs(&w, &k).unwrap();
            prop_assert_eq!(c.lambda_rec, rec_o + eta * w_rec);
            prop_assert_eq!(c.lambda_adv, adv_o * w_adv);
            prop_assert_eq!(c.lambda_per, per);
            prop_assert!(c.lambda_rec >= rec_o);
            prop_assert_eq!(c.lambda_adv == 0.0, w_adv == 0.0 || adv_o == 0.0);
        }
    }
}
