use rand::Rng;
use rayon::prelude::*;

use super::{MCSettings, NoiseDistribution};
use crate::attention::{sinusoidal_pe, PositionalConfig};
use crate::cells;
use crate::error::{contract, Result};
use crate::linalg::{matvec, matvec_t, spectral_norm};
use crate::report::{mean_se, Check, ExperimentReport};
use crate::rng::{normal_matrix, normal_vec, stream_rng};
use crate::tensor::{dot, norm, softmax, Tensor};

/// Logit vector `c_j = pᵀWp_j + eᵀWe_j` for one random query.
///
/// `W = W_QᵀW_K` with `N(0, 1/d)` projection entries, `p` the sinusoidal
/// code of a uniformly drawn query position, `e` and the keys' tokens
/// `N(0, I)`. Because the key tokens enter only through `(Wᵀe)ᵀe_j`, the
/// token term is drawn directly as `‖Wᵀe‖·z_j` with `z_j ~ N(0, 1)`, which
/// has exactly the same distribution.
pub fn logit_source<R: Rng + ?Sized>(rng: &mut R, positions: &Tensor) -> Vec<f64> {
    let (n, d) = (positions.rows(), positions.cols());
    let std = 1.0 / (d as f64).sqrt();
    let wq = normal_matrix(rng, d, d, std);
    let wk = normal_matrix(rng, d, d, std);
    let query = rng.random_range(0..n);
    // Wᵀx = W_Kᵀ(W_Q x)
    let w_t = |x: &[f64]| matvec_t(&wk, &matvec(&wq, x));
    let pos_dir = w_t(positions.row(query));
    let e = normal_vec(rng, d, 1.0);
    let tok_scale = norm(&w_t(&e));
    let z = normal_vec(rng, n, 1.0);
    (0..n)
        .map(|j| dot(&pos_dir, positions.row(j)) + tok_scale * z[j])
        .collect()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Monte Carlo estimate of `E‖softmax(λ(c + η)) − softmax(λc)‖` on a grid of
/// lengths, noise levels and noise laws, compared with `σλ√N`.
///
/// Each trial draws one logit source and one unit-variance noise vector per
/// law, reused across every `σ`. Reported alongside: the per-trial
/// Lipschitz inequality `‖Δ‖ ≤ λ‖η‖`, and `Ê/σ` (the `O(σ)` behaviour).
/// When the grid holds more than one length, the estimate at the largest
/// length must stay above half of that at the smallest (σ = max, Gaussian).
pub fn perturbation_expectation(
    lengths: &[usize],
    d: usize,
    sigmas: &[f64],
    laws: &[NoiseDistribution],
    trials: usize,
    inv_temp: f64,
    seed: u64,
) -> Result<ExperimentReport> {
    if lengths.is_empty() || sigmas.is_empty() || laws.is_empty() {
        return Err(contract("empty perturbation grid"));
    }
    for &s in sigmas {
        MCSettings::new(trials, seed, s, laws[0]).validate()?;
    }
    let mut report = ExperimentReport::new(
        "perturb",
        &[
            "N",
            "sigma",
            "distribution",
            "mean",
            "se",
            "bound",
            "ratio",
            "mean_over_sigma",
            "lipschitz_violations",
        ],
    );
    report
        .set("d", d)
        .set("trials", trials)
        .set("inv_temp", inv_temp)
        .set("seed", seed);
    let mut violations = 0usize;
    let mut worst_ratio = 0.0f64;
    let mut lip_violations = 0usize;
    let mut headline: Vec<(usize, f64)> = Vec::new();
    let s_max = sigmas.iter().copied().fold(0.0, f64::max);
    for &n in lengths {
        let pos = sinusoidal_pe(&PositionalConfig::new(n, d))?;
        // per trial: for each (law, σ) the perturbation norm and the Lipschitz flag
        let per_trial: Vec<Vec<(f64, bool)>> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream_rng(seed, &format!("perturb-{n}"), t as u64);
                let c = logit_source(&mut rng, &pos);
                let base = softmax(&c, inv_temp);
                let mut eta = vec![0.0; n];
                let mut out = Vec::with_capacity(laws.len() * sigmas.len());
                for law in laws {
                    law.fill(&mut rng, &mut eta);
                    let eta_norm = norm(&eta);
                    for &s in sigmas {
                        let shifted: Vec<f64> =
                            c.iter().zip(&eta).map(|(a, b)| a + s * b).collect();
                        let dn = diff_norm(&softmax(&shifted, inv_temp), &base);
                        out.push((dn, dn > inv_temp * s * eta_norm * (1.0 + 1e-12)));
                    }
                }
                out
            })
            .collect();
        let mut k = 0;
        for law in laws {
            for &s in sigmas {
                let vals: Vec<f64> = per_trial.iter().map(|r| r[k].0).collect();
                let lv = per_trial.iter().filter(|r| r[k].1).count();
                k += 1;
                let (mean, se) = mean_se(&vals);
                let bound = s * inv_temp * (n as f64).sqrt();
                let ratio = if bound > 0.0 { mean / bound } else { 0.0 };
                let per_sigma = if s > 0.0 { mean / s } else { 0.0 };
                violations += (mean > bound) as usize;
                lip_violations += lv;
                worst_ratio = worst_ratio.max(ratio);
                if *law == NoiseDistribution::Gaussian && s == s_max {
                    headline.push((n, mean));
                }
                report.row(cells![
                    n,
                    s,
                    law.name(),
                    mean,
                    se,
                    bound,
                    ratio,
                    per_sigma,
                    lv
                ]);
            }
        }
    }
    report.check(
        Check::at_most("perturb_bound_violations", violations as f64, 0.0, 0.0)
            .with_detail(format!("worst Ê/(σλ√N) = {worst_ratio:.4}")),
    );
    report.check(Check::at_most(
        "perturb_lipschitz_violations",
        lip_violations as f64,
        0.0,
        0.0,
    ));
    if headline.len() >= 2 {
        let (n0, first) = headline[0];
        let (n1, last) = headline[headline.len() - 1];
        report.check(
            Check::at_least("perturb_non_vanishing", last, 0.5 * first, 0.0)
                .with_detail(format!("Ê(N={n1}) vs half Ê(N={n0}) at σ={s_max}")),
        );
    }
    Ok(report)
}

/// Chebyshev margins checked for `ξ = ‖η‖²/N`.
const CHEBYSHEV_EPS: [f64; 2] = [0.1, 0.5];

/// Checks `|E‖η‖ − √N| ≤ 1/(2√N)` (plus 3·SE) for unit-variance noise of
/// each law, that `E[ξ] = 1`, and the Chebyshev statement
/// `Pr(|ξ − 1| ≤ ε) ≥ 1 − 1/(Nε²)`. At `N = 1` with Gaussian noise the mean
/// is also compared with the half-normal mean `√(2/π)`.
pub fn noise_norm_bound_check(
    lengths: &[usize],
    laws: &[NoiseDistribution],
    trials: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    MCSettings::new(trials, seed, 1.0, NoiseDistribution::Gaussian).validate()?;
    let mut report = ExperimentReport::new(
        "noise-norm",
        &[
            "N",
            "distribution",
            "mean_norm",
            "se",
            "gap",
            "bound",
            "mean_xi",
            "se_xi",
            "cheb_0.1",
            "cheb_0.5",
        ],
    );
    report.set("trials", trials).set("seed", seed);
    for &n in lengths {
        if n == 0 {
            return Err(contract("noise length must be positive"));
        }
        for &law in laws {
            let tag = format!("noise-norm-{}-{n}", law.name());
            let norms: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = stream_rng(seed, &tag, t as u64);
                    let mut sq = 0.0;
                    for _ in 0..n {
                        let v = law.sample(&mut rng);
                        sq += v * v;
                    }
                    sq.sqrt()
                })
                .collect();
            let nf = n as f64;
            let (mean, se) = mean_se(&norms);
            let gap = (mean - nf.sqrt()).abs();
            let bound = 1.0 / (2.0 * nf.sqrt());
            let xi: Vec<f64> = norms.iter().map(|r| r * r / nf).collect();
            let (mean_xi, se_xi) = mean_se(&xi);
            let label = format!("N={n},{}", law.name());
            report.check(Check::at_most(
                format!("norm_gap[{label}]"),
                gap,
                bound,
                3.0 * se,
            ));
            report.check(Check::at_most(
                format!("xi_mean[{label}]"),
                (mean_xi - 1.0).abs(),
                0.0,
                3.0 * se_xi,
            ));
            let mut cheb = Vec::new();
            for eps in CHEBYSHEV_EPS {
                let inside: Vec<f64> = xi
                    .iter()
                    .map(|x| ((x - 1.0).abs() <= eps) as u8 as f64)
                    .collect();
                let (freq, se_f) = mean_se(&inside);
                let floor = 1.0 - 1.0 / (nf * eps * eps);
                report.check(Check::at_least(
                    format!("chebyshev[{label},eps={eps}]"),
                    freq,
                    floor,
                    3.0 * se_f,
                ));
                cheb.push(freq);
            }
            if n == 1 && law == NoiseDistribution::Gaussian {
                let half_normal = (2.0 / std::f64::consts::PI).sqrt();
                report.check(Check::at_most(
                    "half_normal_mean",
                    (mean - half_normal).abs(),
                    0.0,
                    3.0 * se,
                ));
            }
            report.row(cells![
                n,
                law.name(),
                mean,
                se,
                gap,
                bound,
                mean_xi,
                se_xi,
                cheb[0],
                cheb[1]
            ]);
        }
    }
    Ok(report)
}

/// Which matrix norm the `‖V‖ ≍ √(dN)` band is checked on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandNorm {
    Operator,
    Frobenius,
}

impl BandNorm {
    pub fn name(self) -> &'static str {
        match self {
            BandNorm::Operator => "operator",
            BandNorm::Frobenius => "frobenius",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "operator" | "op" => Ok(BandNorm::Operator),
            "frobenius" | "fro" => Ok(BandNorm::Frobenius),
            other => Err(crate::error::config(format!(
                "unknown band norm '{other}' (operator|frobenius)"
            ))),
        }
    }
}

/// Half-width of the band around the grid mean.
pub const NORM_BAND: f64 = 0.1;

/// Largest singular value of `v` through its `d×d` Gram matrix.
fn op_norm(v: &Tensor) -> Result<f64> {
    let gram = v.transpose()?.matmul(v)?;
    Ok(spectral_norm(&gram, 1e-13, 200_000).sqrt())
}

/// Monte Carlo `E‖(softmax(λ(c+η)) − softmax(λc))V‖` against
/// `σλ‖V‖_op√N`, and the spread of `‖V‖/√(dN)` over the length grid.
///
/// One value matrix with i.i.d. unit Gaussian entries is drawn per length;
/// trials redraw the logit source and the noise. The band check named
/// `cor2_band` uses `band`; the other norm's band deviation is recorded in
/// the config as informational.
pub fn output_perturbation_check(
    lengths: &[usize],
    d: usize,
    settings: &MCSettings,
    inv_temp: f64,
    band: BandNorm,
) -> Result<ExperimentReport> {
    settings.validate()?;
    if lengths.is_empty() {
        return Err(contract("empty length grid"));
    }
    let mut report = ExperimentReport::new(
        "output-perturb",
        &[
            "N",
            "op_norm",
            "op_ratio",
            "frob_ratio",
            "mean",
            "se",
            "bound",
            "violated",
        ],
    );
    report
        .set("d", d)
        .set("sigma", settings.sigma)
        .set("distribution", settings.distribution.name())
        .set("trials", settings.trials)
        .set("inv_temp", inv_temp)
        .set("seed", settings.seed)
        .set("band", band.name());
    let mut violations = 0usize;
    let mut op_ratios = Vec::new();
    let mut frob_ratios = Vec::new();
    for &n in lengths {
        let pos = sinusoidal_pe(&PositionalConfig::new(n, d))?;
        let v = normal_matrix(
            &mut stream_rng(settings.seed, "value-matrix", n as u64),
            n,
            d,
            1.0,
        );
        let op = op_norm(&v)?;
        let scale = ((d * n) as f64).sqrt();
        op_ratios.push(op / scale);
        frob_ratios.push(v.frobenius_norm() / scale);
        let s = settings.sigma;
        let tag = format!("output-perturb-{n}");
        let vals: Vec<f64> = (0..settings.trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream_rng(settings.seed, &tag, t as u64);
                let c = logit_source(&mut rng, &pos);
                let mut eta = vec![0.0; n];
                settings.distribution.fill(&mut rng, &mut eta);
                let shifted: Vec<f64> = c.iter().zip(&eta).map(|(a, b)| a + s * b).collect();
                let delta: Vec<f64> = softmax(&shifted, inv_temp)
                    .iter()
                    .zip(softmax(&c, inv_temp))
                    .map(|(a, b)| a - b)
                    .collect();
                norm(&matvec_t(&v, &delta))
            })
            .collect();
        let (mean, se) = mean_se(&vals);
        let bound = s * inv_temp * op * (n as f64).sqrt();
        let violated = mean > bound;
        violations += violated as usize;
        report.row(cells![
            n,
            op,
            op / scale,
            v.frobenius_norm() / scale,
            mean,
            se,
            bound,
            violated
        ]);
    }
    report.check(Check::at_most(
        "cor2_bound_violations",
        violations as f64,
        0.0,
        0.0,
    ));
    let band_dev = |rs: &[f64]| {
        let m = rs.iter().sum::<f64>() / rs.len() as f64;
        rs.iter().map(|r| (r / m - 1.0).abs()).fold(0.0, f64::max)
    };
    let (op_dev, frob_dev) = (band_dev(&op_ratios), band_dev(&frob_ratios));
    let (chosen, other, other_name) = match band {
        BandNorm::Operator => (op_dev, frob_dev, "frobenius"),
        BandNorm::Frobenius => (frob_dev, op_dev, "operator"),
    };
    report.set(format!("{other_name}_band_max_dev"), other);
    report.check(
        Check::at_most("cor2_band", chosen, NORM_BAND, 0.0)
            .with_detail(format!("max |r/r̄ − 1| of ‖V‖_{}/√(dN)", band.name())),
    );
    Ok(report)
}
