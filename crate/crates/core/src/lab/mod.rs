//! Seeded numerical checks of the filtering view of attention.
//!
//! Each check builds its own oracle independently of the code under test
//! (gradient descent instead of closed forms, per-factor kernel evaluation
//! instead of the fused logit, recurrence iteration instead of the closed
//! form) and returns an [`ExperimentReport`](crate::report::ExperimentReport)
//! with one row per trial or grid point and a list of pass/fail checks.
//!
//! Trials draw from independent per-trial streams and are reduced in index
//! order, so reports are identical for any number of worker threads.

mod checks;
mod lipschitz;
mod perturb;
mod prop3;
mod robustness;
mod suite;
mod thm1;

pub use checks::{
    denoise_check, gradient_check_suite, moe_check, moe_check_sized, oversmoothing_check,
    training_check, twicing_check, vanish_check, TrainingOutcome,
};
pub use lipschitz::{
    estimate_local_lipschitz, fit_inverse_sqrt, lipschitz_sweep, targeted_pair_ratio,
    InverseSqrtFit, LipschitzEstimate, DOMINANT_SHIFT, LIPSCHITZ_GRID,
};
pub use perturb::{
    logit_source, noise_norm_bound_check, output_perturbation_check, perturbation_expectation,
    BandNorm,
};
pub use prop3::{check_prop3_factorization, AlphaC};
pub use robustness::{
    closed_form_grc, recurrence_check, robustness_empirical, robustness_recurrence, ClosedForm,
    Recurrence, ROBUSTNESS_DELTA,
};
pub use suite::{ideal_denoiser_check, run_group, SuiteOptions, SUITE_GROUPS};
pub use thm1::check_thm1_equivalence;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config, Result};

/// Zero-mean noise law, normalized to unit variance before scaling by `σ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseDistribution {
    Gaussian,
    /// `±1` with equal probability.
    Rademacher,
    /// Uniform on `[−√3, √3]`.
    Uniform,
}

impl NoiseDistribution {
    pub const ALL: [NoiseDistribution; 3] = [
        NoiseDistribution::Gaussian,
        NoiseDistribution::Rademacher,
        NoiseDistribution::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseDistribution::Gaussian => "gaussian",
            NoiseDistribution::Rademacher => "rademacher",
            NoiseDistribution::Uniform => "uniform",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| config(format!("unknown noise distribution '{name}'")))
    }

    /// One unit-variance draw.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseDistribution::Gaussian => StandardNormal.sample(rng),
            NoiseDistribution::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            NoiseDistribution::Uniform => 3f64.sqrt() * (2.0 * rng.random::<f64>() - 1.0),
        }
    }

    pub fn fill<R: Rng + ?Sized>(self, rng: &mut R, out: &mut [f64]) {
        for v in out {
            *v = self.sample(rng);
        }
    }
}

/// Monte Carlo settings shared by the perturbation checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MCSettings {
    pub trials: usize,
    pub seed: u64,
    pub sigma: f64,
    pub distribution: NoiseDistribution,
}

impl MCSettings {
    /// Aggregates from fewer trials than this are too noisy to report.
    pub const MIN_TRIALS: usize = 100;

    pub fn new(trials: usize, seed: u64, sigma: f64, distribution: NoiseDistribution) -> Self {
        Self {
            trials,
            seed,
            sigma,
            distribution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < Self::MIN_TRIALS {
            return Err(config(format!(
                "need at least {} trials, got {}",
                Self::MIN_TRIALS,
                self.trials
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(config(format!(
                "noise level must be finite and nonnegative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::mean_se;
    use crate::rng::stream_rng;

    #[test]
    fn distributions_have_unit_variance() {
        for dist in NoiseDistribution::ALL {
            let mut rng = stream_rng(5, "dist-test", 0);
            let xs: Vec<f64> = (0..200_000).map(|_| dist.sample(&mut rng)).collect();
            let (m, se) = mean_se(&xs);
            assert!(m.abs() < 4.0 * se, "{dist:?} mean {m}");
            let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
            let (v, se) = mean_se(&sq);
            assert!(
                (v - 1.0).abs() < 4.0 * se.max(1e-12),
                "{dist:?} variance {v}"
            );
        }
    }

    #[test]
    fn names_round_trip() {
        for d in NoiseDistribution::ALL {
            assert_eq!(NoiseDistribution::parse(d.name()).unwrap(), d);
        }
        assert!(NoiseDistribution::parse("cauchy").is_err());
    }

    #[test]
    fn settings_require_enough_trials() {
        assert!(MCSettings::new(99, 0, 1.0, NoiseDistribution::Gaussian)
            .validate()
            .is_err());
        assert!(MCSettings::new(100, 0, -1.0, NoiseDistribution::Gaussian)
            .validate()
            .is_err());
        assert!(MCSettings::new(100, 0, 0.0, NoiseDistribution::Gaussian)
            .validate()
            .is_ok());
    }
}
