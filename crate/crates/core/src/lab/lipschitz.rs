use rand::Rng;
use rayon::prelude::*;

use crate::cells;
use crate::error::{contract, Result};
use crate::report::{Check, ExperimentReport};
use crate::rng::{normal_vec, stream_rng};
use crate::tensor::{norm, softmax};

/// Default sequence lengths for the sweep.
pub const LIPSCHITZ_GRID: [usize; 7] = [100, 200, 500, 1000, 2000, 5000, 10_000];
/// Height of the single large coordinate in dominated pairs.
pub const DOMINANT_SHIFT: f64 = 5.0;
const NEAR_STEP: f64 = 1e-4;
pub const MIN_PAIRS: usize = 1000;
pub const FIT_MIN_R2: f64 = 0.9;

/// Largest observed difference quotient of softmax at one length.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzEstimate {
    pub n: usize,
    pub l_hat: f64,
    pub pairs_sampled: usize,
    /// Pairs skipped because `x == y`.
    pub skipped: usize,
}

fn quotient(x: &[f64], y: &[f64], inv_temp: f64) -> Option<f64> {
    let dx: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let den = norm(&dx);
    if den == 0.0 {
        return None;
    }
    let (sx, sy) = (softmax(x, inv_temp), softmax(y, inv_temp));
    let ds: Vec<f64> = sx.iter().zip(&sy).map(|(a, b)| a - b).collect();
    Some(norm(&ds) / den)
}

/// Samples `pairs` input pairs in rotation from three families — independent
/// Gaussians, near-coincident points `y = x + 10⁻⁴g`, and dominated inputs
/// with one coordinate raised by [`DOMINANT_SHIFT`] — and keeps the largest
/// quotient `‖softmax(x) − softmax(y)‖ / ‖x − y‖`.
pub fn estimate_local_lipschitz(
    n: usize,
    pairs: usize,
    inv_temp: f64,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if n < 2 {
        return Err(contract("softmax needs at least two inputs"));
    }
    if pairs < MIN_PAIRS {
        return Err(contract(format!(
            "need at least {MIN_PAIRS} pairs, got {pairs}"
        )));
    }
    let tag = format!("lipschitz-{n}");
    let ratios: Vec<Option<f64>> = (0..pairs)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, &tag, k as u64);
            let (x, y) = match k % 3 {
                0 => (normal_vec(&mut rng, n, 1.0), normal_vec(&mut rng, n, 1.0)),
                1 => {
                    let x = normal_vec(&mut rng, n, 1.0);
                    let g = normal_vec(&mut rng, n, 1.0);
                    let y = x.iter().zip(&g).map(|(a, b)| a + NEAR_STEP * b).collect();
                    (x, y)
                }
                _ => {
                    let a = rng.random_range(0..n);
                    let b = rng.random_range(0..n);
                    let mut x = vec![0.0; n];
                    let mut y = vec![0.0; n];
                    x[a] = DOMINANT_SHIFT;
                    y[b] = DOMINANT_SHIFT;
                    (x, y)
                }
            };
            quotient(&x, &y, inv_temp)
        })
        .collect();
    let skipped = ratios.iter().filter(|r| r.is_none()).count();
    let l_hat = ratios.into_iter().flatten().fold(0.0, f64::max);
    Ok(LipschitzEstimate {
        n,
        l_hat,
        pairs_sampled: pairs,
        skipped,
    })
}

/// Least-squares fit of `a/√N + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseSqrtFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
}

impl InverseSqrtFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.a / n.sqrt() + self.b
    }
}

/// Fits `(N, L)` points by ordinary least squares on the regressor `1/√N`.
pub fn fit_inverse_sqrt(points: &[(f64, f64)]) -> Result<InverseSqrtFit> {
    if points.len() < 2 {
        return Err(contract("a two-parameter fit needs at least two points"));
    }
    let m = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(n, _)| 1.0 / n.sqrt()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, l)| *l).collect();
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(contract("fit needs at least two distinct lengths"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - a * x - b).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(InverseSqrtFit { a, b, r2 })
}

/// Largest quotient over one-hot pairs `δe_1`, `δe_2` at `N = 2`, scanning
/// `δ` down to where the quotient approaches the local supremum `λ/2`.
pub fn targeted_pair_ratio(inv_temp: f64) -> f64 {
    [5.0, 1.0, 1e-1, 1e-2, 1e-3, 1e-4]
        .iter()
        .filter_map(|&s| quotient(&[s, 0.0], &[0.0, s], inv_temp))
        .fold(0.0, f64::max)
}

/// Estimates `L̂(N)` over `grid`, fits `a/√N + b`, and checks the global
/// bound `L̂ ≤ λ`, monotonicity in `N`, the fit quality, and that the
/// targeted two-token pair beats the longest length.
pub fn lipschitz_sweep(
    grid: &[usize],
    pairs: usize,
    inv_temp: f64,
    seed: u64,
) -> Result<ExperimentReport> {
    if grid.len() < 2 {
        return Err(contract("sweep needs at least two lengths"));
    }
    let estimates = grid
        .iter()
        .map(|&n| estimate_local_lipschitz(n, pairs, inv_temp, seed))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<(f64, f64)> = estimates.iter().map(|e| (e.n as f64, e.l_hat)).collect();
    let fit = fit_inverse_sqrt(&points)?;

    let mut report = ExperimentReport::new("lipschitz", &["N", "l_hat", "fit", "pairs", "skipped"]);
    report
        .set("pairs", pairs)
        .set("inv_temp", inv_temp)
        .set("seed", seed)
        .set("fit_a", fit.a)
        .set("fit_b", fit.b)
        .set("fit_r2", fit.r2);
    for e in &estimates {
        report.row(cells![
            e.n,
            e.l_hat,
            fit.predict(e.n as f64),
            e.pairs_sampled,
            e.skipped
        ]);
    }
    let max_l = estimates.iter().map(|e| e.l_hat).fold(0.0, f64::max);
    report.check(Check::at_most(
        "lipschitz_global_bound",
        max_l,
        inv_temp,
        0.0,
    ));
    let rises = estimates
        .windows(2)
        .filter(|w| w[1].l_hat > w[0].l_hat)
        .count();
    report.check(
        Check::at_most("lipschitz_monotone", rises as f64, 0.0, 0.0)
            .with_detail("count of increases along N"),
    );
    report.check(
        Check::at_least("lipschitz_fit_r2", fit.r2, FIT_MIN_R2, 0.0)
            .with_detail(format!("a={:.4e} b={:.4e}", fit.a, fit.b)),
    );
    let targeted = targeted_pair_ratio(inv_temp);
    let last = estimates.last().expect("nonempty grid").l_hat;
    report.check(
        Check::at_least("lipschitz_targeted_pair", targeted, last, 0.0)
            .with_detail(format!("N=2 one-hot pair vs L̂({})", grid[grid.len() - 1])),
    );
    report.check(Check::at_most(
        "lipschitz_targeted_near_sup",
        (targeted - inv_temp / 2.0).abs(),
        0.01 * inv_temp,
        0.0,
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_exact_coefficients() {
        let pts: Vec<(f64, f64)> = [4.0, 16.0, 64.0, 256.0]
            .iter()
            .map(|&n| (n, 3.0 / f64::sqrt(n) + 0.25))
            .collect();
        let f = fit_inverse_sqrt(&pts).unwrap();
        assert!((f.a - 3.0).abs() < 1e-12 && (f.b - 0.25).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(fit_inverse_sqrt(&[(4.0, 1.0)]).is_err());
    }

    #[test]
    fn estimate_respects_the_global_bound() {
        for n in [2, 10, 100] {
            let e = estimate_local_lipschitz(n, 1000, 1.0, 3).unwrap();
            assert!(e.l_hat <= 1.0 && e.l_hat > 0.0);
        }
        let hot = estimate_local_lipschitz(50, 1000, 2.0, 3).unwrap();
        assert!(hot.l_hat <= 2.0);
    }

    #[test]
    fn two_token_supremum_is_half() {
        let r = targeted_pair_ratio(1.0);
        assert!((r - 0.5).abs() < 1e-3, "{r}");
    }

    #[test]
    fn dominated_pairs_decay_with_length() {
        let a = estimate_local_lipschitz(100, 1000, 1.0, 0).unwrap();
        let b = estimate_local_lipschitz(1000, 1000, 1.0, 0).unwrap();
        assert!(b.l_hat < a.l_hat);
    }

    #[test]
    fn identical_pairs_are_skipped() {
        // N = 2 dominated pairs pick the same coordinate about half the time
        let e = estimate_local_lipschitz(2, 1200, 1.0, 1).unwrap();
        assert!(e.skipped > 0);
    }
}
