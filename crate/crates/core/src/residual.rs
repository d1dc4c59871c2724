//! Residual update rules and signal-to-noise bookkeeping.
//!
//! A layer `f` maps the state `Y_ℓ` to a filtered estimate; the residual
//! scheme decides what is added back:
//!
//! * `Standard`: `Y_{ℓ+1} = f(Y_ℓ) + Y_ℓ`
//! * `Generalized`: `Y_{ℓ+1} = f(Y_ℓ) + t_ℓ Y_{i_ℓ}` for an anchor index
//!   sequence `i_ℓ ≤ ℓ`
//! * `Boost`: `Y_{ℓ+1} = f(Y_ℓ) + t Y_0 + (1 − t) Y_ℓ`
//!
//! Re-injecting the input keeps a fixed fraction of the original signal in
//! every layer, where the standard scheme lets it decay geometrically when
//! each filter attenuates the signal.

use rand::Rng;
use rayon::prelude::*;

use crate::cells;
use crate::error::{contract, Error, Result};
use crate::filters::{snr_of, Snr};
use crate::linalg::{matvec, random_orthogonal, random_orthogonal_unit};
use crate::report::{Check, ExperimentReport};
use crate::rng::{normal_vec, stream_rng};
use crate::tensor::{norm, Tensor};

/// How anchor indices `i_ℓ` are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum IndexRule {
    /// `i_ℓ = ℓ`.
    Identity,
    /// `i_ℓ = min(k, ℓ)`: anchored at layer `k` once it exists.
    Constant(usize),
    /// `i_ℓ = ℓ − k` (requires `ℓ ≥ k`).
    Lagged(usize),
    /// Explicit sequence indexed by `ℓ`.
    Custom(Vec<usize>),
}

/// Long-run behaviour of the signal fraction carried by an index rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalFate {
    Vanishing,
    Persistent,
    Undetermined,
}

impl IndexRule {
    pub fn index(&self, layer: usize) -> Result<usize> {
        let i = match self {
            IndexRule::Identity => Some(layer),
            IndexRule::Constant(k) => Some((*k).min(layer)),
            IndexRule::Lagged(k) => layer.checked_sub(*k),
            IndexRule::Custom(seq) => seq.get(layer).copied(),
        };
        match i {
            Some(i) if i <= layer => Ok(i),
            Some(i) => Err(contract(format!("anchor index {i} exceeds layer {layer}"))),
            None => Err(contract(format!(
                "no valid anchor index for layer {layer} under {self:?}"
            ))),
        }
    }

    /// The signal vanishes exactly when the anchors have no bounded
    /// subsequence. For an explicit finite sequence that cannot be decided.
    pub fn fate(&self) -> SignalFate {
        match self {
            IndexRule::Identity | IndexRule::Lagged(_) => SignalFate::Vanishing,
            IndexRule::Constant(_) => SignalFate::Persistent,
            IndexRule::Custom(_) => SignalFate::Undetermined,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ResidualScheme {
    Standard,
    /// `scales[ℓ]` is `t_ℓ`; the last entry repeats for deeper layers.
    Generalized {
        indices: IndexRule,
        scales: Vec<f64>,
    },
    Boost {
        t: f64,
    },
}

impl ResidualScheme {
    pub fn validate(&self) -> Result<()> {
        match self {
            ResidualScheme::Standard => Ok(()),
            ResidualScheme::Generalized { scales, .. } => {
                if scales.is_empty() {
                    return Err(contract("generalized scheme needs at least one scale"));
                }
                if let Some(t) = scales.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
                    return Err(contract(format!("scale {t} outside (0, 1]")));
                }
                Ok(())
            }
            ResidualScheme::Boost { t } => {
                if (0.0..=1.0).contains(t) {
                    Ok(())
                } else {
                    Err(contract(format!("boost weight {t} outside [0, 1]")))
                }
            }
        }
    }

    /// The generalized form that reproduces `Standard`.
    pub fn standard_as_generalized() -> Self {
        ResidualScheme::Generalized {
            indices: IndexRule::Identity,
            scales: vec![1.0],
        }
    }

    pub fn name(&self) -> String {
        match self {
            ResidualScheme::Standard => "rc".into(),
            ResidualScheme::Generalized { .. } => "grc".into(),
            ResidualScheme::Boost { t } => format!("boost({t})"),
        }
    }
}

/// Next state from the history `Y_0..Y_ℓ` and the layer output `f(Y_ℓ)`.
pub fn apply_residual(
    scheme: &ResidualScheme,
    history: &[Tensor],
    f_out: &Tensor,
) -> Result<Tensor> {
    scheme.validate()?;
    let last = history
        .last()
        .ok_or_else(|| contract("residual history is empty"))?;
    let layer = history.len() - 1;
    match scheme {
        ResidualScheme::Standard => f_out.add(last),
        ResidualScheme::Generalized { indices, scales } => {
            let i = indices.index(layer)?;
            let t = scales
                .get(layer)
                .or(scales.last())
                .copied()
                .expect("validated nonempty");
            f_out.add(&history[i].scale(t))
        }
        ResidualScheme::Boost { t } => f_out.add(&history[0].scale(*t))?.add(&last.scale(1.0 - t)),
    }
}

/// Clean part `u` and noise part `η` of a measurement `y = u + η`.
#[derive(Clone, Debug)]
pub struct SignalDecomposition {
    pub u: Tensor,
    pub eta: Tensor,
}

impl SignalDecomposition {
    pub fn new(u: Tensor, eta: Tensor) -> Result<Self> {
        if u.shape() != eta.shape() {
            return Err(Error::Shape {
                op: "signal decomposition",
                lhs: u.shape().to_vec(),
                rhs: eta.shape().to_vec(),
            });
        }
        Ok(Self { u, eta })
    }

    pub fn snr(&self) -> Snr {
        snr_of(self.u.data(), self.eta.data()).expect("shapes checked at construction")
    }
}

/// Quality of a denoiser `y ↦ ŷ = û + η̂`: `‖û‖ = α‖u‖`, `cos(u, û) ≥ β`,
/// `‖η̂‖ ≤ γ‖η‖`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserProfile {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl DenoiserProfile {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Hypothesis(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if alpha.min(beta) <= gamma {
            return Err(Error::Hypothesis(format!(
                "min(alpha, beta) = {} must exceed gamma = {gamma}",
                alpha.min(beta)
            )));
        }
        Ok(Self { alpha, beta, gamma })
    }

    /// Uniform draw from the admissible region: `γ ∈ [0, 0.9)`, then
    /// `α, β ∈ (γ, 1]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let gamma = rng.random_range(0.0..0.9);
        let alpha = 1.0 - rng.random_range(0.0..1.0 - gamma);
        let beta = 1.0 - rng.random_range(0.0..1.0 - gamma);
        Self { alpha, beta, gamma }
    }
}

/// `√(1 + 2αβ + α²) / (1 + γ)`: the guaranteed SNR gain of adding a
/// denoised copy back to the measurement.
pub fn snr_boost_bound(profile: &DenoiserProfile) -> Result<f64> {
    let p = DenoiserProfile::new(profile.alpha, profile.beta, profile.gamma)?;
    Ok((1.0 + 2.0 * p.alpha * p.beta + p.alpha * p.alpha).sqrt() / (1.0 + p.gamma))
}

/// Builds `(û, η̂)` meeting the profile with equality: `û` has norm `α‖u‖`
/// at angle `arccos β` from `u`, and `η̂` is `η` rotated by a random
/// orthogonal matrix and scaled to norm `γ‖η‖`.
pub fn construct_denoised<R: Rng + ?Sized>(
    rng: &mut R,
    profile: &DenoiserProfile,
    u: &[f64],
    eta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let nu = norm(u);
    let u_hat: Vec<f64> = if profile.beta == 1.0 {
        u.iter().map(|x| profile.alpha * x).collect()
    } else {
        let w = random_orthogonal_unit(rng, u);
        let (c, s) = (profile.beta, (1.0 - profile.beta * profile.beta).sqrt());
        u.iter()
            .zip(&w)
            .map(|(ui, wi)| profile.alpha * nu * (c * ui / nu + s * wi))
            .collect()
    };
    let eta_hat: Vec<f64> = if profile.gamma == 0.0 {
        vec![0.0; eta.len()]
    } else {
        let r = random_orthogonal(rng, eta.len());
        let rotated = matvec(&r, eta);
        let scale = profile.gamma * norm(eta) / norm(&rotated);
        rotated.into_iter().map(|x| x * scale).collect()
    };
    (u_hat, eta_hat)
}

/// `σ(y + ŷ) / σ(y)`.
pub fn snr_ratio(u: &[f64], eta: &[f64], u_hat: &[f64], eta_hat: &[f64]) -> f64 {
    let sum = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
    let before = norm(u) / norm(eta);
    let after = norm(&sum(u, u_hat)) / norm(&sum(eta, eta_hat));
    after / before
}

/// Relative slack allowed when comparing a measured ratio with its bound.
pub const SNR_BOUND_SLACK: f64 = 1e-12;

/// Monte Carlo check of the SNR gain bound. With `profile = None` every
/// trial draws its own admissible profile.
pub fn verify_snr_boost(
    profile: Option<DenoiserProfile>,
    trials: usize,
    dim: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if trials == 0 {
        return Err(contract("at least one trial is required"));
    }
    if dim < 2 {
        return Err(contract("dimension must be at least 2"));
    }
    if let Some(p) = &profile {
        snr_boost_bound(p)?;
    }
    let rows: Vec<(DenoiserProfile, f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream_rng(seed, "snr-boost", trial as u64);
            let p = profile.unwrap_or_else(|| DenoiserProfile::random(&mut rng));
            let u = normal_vec(&mut rng, dim, 1.0);
            let eta = normal_vec(&mut rng, dim, 1.0);
            let (uh, eh) = construct_denoised(&mut rng, &p, &u, &eta);
            let ratio = snr_ratio(&u, &eta, &uh, &eh);
            let bound = snr_boost_bound(&p).expect("admissible by construction");
            (p, ratio, bound)
        })
        .collect();

    let mut report = ExperimentReport::new(
        "snr",
        &[
            "trial", "alpha", "beta", "gamma", "ratio", "bound", "violated",
        ],
    );
    report
        .set("trials", trials)
        .set("dim", dim)
        .set("seed", seed);
    let mut violations = 0usize;
    let mut worst_margin = f64::INFINITY;
    for (trial, (p, ratio, bound)) in rows.iter().enumerate() {
        let violated = *ratio < bound * (1.0 - SNR_BOUND_SLACK);
        violations += violated as usize;
        worst_margin = worst_margin.min(ratio / bound - 1.0);
        report.row(cells![
            trial, p.alpha, p.beta, p.gamma, ratio, bound, violated
        ]);
    }
    report.check(
        Check::at_most("snr_boost_violations", violations as f64, 0.0, 0.0).with_detail(format!(
            "{trials} trials, worst ratio/bound − 1 = {worst_margin:.3e}"
        )),
    );
    Ok(report)
}

/// `s_ℓ = α^{i_ℓ}(α^{ℓ − i_ℓ} + 1)‖u_0‖` for `ℓ = 1..=depth`: the clean
/// signal norm after `ℓ` layers that each scale the signal by `α`.
#[derive(Clone, Debug)]
pub struct VanishTrajectory {
    pub values: Vec<f64>,
    pub fate: SignalFate,
}

pub fn signal_vanish_trajectory(
    alpha: f64,
    indices: &IndexRule,
    depth: usize,
    u0_norm: f64,
) -> Result<VanishTrajectory> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(contract(format!("alpha = {alpha} outside (0, 1)")));
    }
    let values = (1..=depth)
        .map(|l| {
            let i = indices.index(l)?;
            Ok(alpha.powi(i as i32) * (alpha.powi((l - i) as i32) + 1.0) * u0_norm)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(VanishTrajectory {
        values,
        fate: indices.fate(),
    })
}

/// Two boost steps with linear layers `Y ↦ A Y`, computed directly and via
/// the rearranged "twicing" form
/// `f₁(f₀(Y_ℓ) + Y_ℓ) + t f₁(Y_0 − Y_ℓ) + t Y_0 + (1 − t) Y_{ℓ+1}`.
/// Returns `(direct, rearranged)`.
pub fn twicing_rollout(
    a0: &Tensor,
    a1: &Tensor,
    y0: &Tensor,
    yl: &Tensor,
    t: f64,
) -> Result<(Tensor, Tensor)> {
    let boost = ResidualScheme::Boost { t };
    let step = |a: &Tensor, y: &Tensor| -> Result<Tensor> {
        let f = a.matmul(y)?;
        apply_residual(&boost, &[y0.clone(), y.clone()], &f)
    };
    let y1 = step(a0, yl)?;
    let direct = step(a1, &y1)?;

    let inner = a0.matmul(yl)?.add(yl)?;
    let rearranged = a1
        .matmul(&inner)?
        .add(&a1.matmul(&y0.sub(yl)?)?.scale(t))?
        .add(&y0.scale(t))?
        .add(&y1.scale(1.0 - t))?;
    Ok((direct, rearranged))
}
