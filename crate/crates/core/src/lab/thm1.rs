use rayon::prelude::*;

use crate::attention::{
    self_attention_forward, sinusoidal_pe, KernelSpec, PositionalConfig, ProjectionSet,
};
use crate::cells;
use crate::error::{contract, Result};
use crate::report::{Check, ExperimentReport};
use crate::rng::{normal_matrix, stream_rng};
use crate::tensor::{dot, norm};

const DESCENT_LR: f64 = 1e-2;
const DESCENT_MAX_STEPS: usize = 10_000;
/// Descent stops once the gradient of the normalized objective is this small.
const DESCENT_TOL: f64 = 1e-13;

pub const THM1_DEVIATION_TOL: f64 = 1e-6;
pub const THM1_STATIONARITY_TOL: f64 = 1e-8;

struct QueryResult {
    rel_dev: f64,
    stationarity: f64,
    steps: usize,
    converged: bool,
}

/// Minimizes `Σ_j w_j ‖y_j − u‖²` (weights summing to one) by plain gradient
/// descent from the origin.
fn descend(weights: &[f64], ys: &[Vec<f64>]) -> (Vec<f64>, usize, bool) {
    let d = ys[0].len();
    let mut u = vec![0.0; d];
    for step in 0..DESCENT_MAX_STEPS {
        let mut g = vec![0.0; d];
        for (w, y) in weights.iter().zip(ys) {
            for k in 0..d {
                g[k] -= 2.0 * w * (y[k] - u[k]);
            }
        }
        if norm(&g) < DESCENT_TOL {
            return (u, step, true);
        }
        for k in 0..d {
            u[k] -= DESCENT_LR * g[k];
        }
    }
    (u, DESCENT_MAX_STEPS, false)
}

/// Compares one layer of identity-projection attention with the weighted
/// least-squares estimate under the kernel `exp((y_i+p_i)ᵀ(y_j+p_j)/√d)`.
///
/// Tokens are `N(0, 1)`, positions sinusoidal. For every query the WLS
/// objective is minimized by gradient descent (an oracle that never forms
/// the weighted average), and the gradient of the unnormalized objective is
/// evaluated at the attention output.
pub fn check_thm1_equivalence(n: usize, d: usize, seed: u64) -> Result<ExperimentReport> {
    if n < 1 {
        return Err(contract("need at least one token"));
    }
    let e = normal_matrix(
        &mut stream_rng(seed, "thm1", n as u64 * 1000 + d as u64),
        n,
        d,
        1.0,
    );
    let p = sinusoidal_pe(&PositionalConfig::new(n, d))?;
    let out = self_attention_forward(&KernelSpec::standard(), &ProjectionSet::identity(d), &e, &p)?;

    // measurements are the position-shifted tokens
    let ys: Vec<Vec<f64>> = (0..n)
        .map(|j| e.row(j).iter().zip(p.row(j)).map(|(a, b)| a + b).collect())
        .collect();
    let scale = (d as f64).sqrt();
    let results: Vec<QueryResult> = (0..n)
        .into_par_iter()
        .map(|i| {
            let k: Vec<f64> = ys
                .iter()
                .map(|yj| (dot(&ys[i], yj) / scale).exp())
                .collect();
            let total: f64 = k.iter().sum();
            let w: Vec<f64> = k.iter().map(|x| x / total).collect();
            let (u, steps, converged) = descend(&w, &ys);
            let attn = out.row(i);
            let diff: Vec<f64> = attn.iter().zip(&u).map(|(a, b)| a - b).collect();
            let rel_dev = norm(&diff) / norm(&u).max(f64::MIN_POSITIVE);
            let mut grad = vec![0.0; d];
            for (kj, yj) in k.iter().zip(&ys) {
                for c in 0..d {
                    grad[c] -= 2.0 * kj * (yj[c] - attn[c]);
                }
            }
            QueryResult {
                rel_dev,
                stationarity: norm(&grad),
                steps,
                converged,
            }
        })
        .collect();

    let mut report = ExperimentReport::new(
        "thm1",
        &[
            "query",
            "rel_deviation",
            "grad_norm",
            "descent_steps",
            "converged",
        ],
    );
    report
        .set("N", n)
        .set("d", d)
        .set("seed", seed)
        .set("lr", DESCENT_LR);
    let (mut max_dev, mut max_grad, mut flagged) = (0.0f64, 0.0f64, 0usize);
    for (i, r) in results.iter().enumerate() {
        max_dev = max_dev.max(r.rel_dev);
        max_grad = max_grad.max(r.stationarity);
        flagged += !r.converged as usize;
        report.row(cells![i, r.rel_dev, r.stationarity, r.steps, r.converged]);
    }
    report.check(
        Check::at_most("thm1_deviation", max_dev, THM1_DEVIATION_TOL, 0.0)
            .with_detail(format!("N={n} d={d}")),
    );
    report.check(
        Check::at_most("thm1_stationarity", max_grad, THM1_STATIONARITY_TOL, 0.0)
            .with_detail(format!("N={n} d={d}")),
    );
    report.check(Check::at_most(
        "thm1_descent_unconverged",
        flagged as f64,
        0.0,
        0.0,
    ));
    Ok(report)
}
