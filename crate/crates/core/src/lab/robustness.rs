use rayon::prelude::*;

use crate::cells;
use crate::error::{contract, Result};
use crate::linalg::{matvec, scale_to_spectral_norm};
use crate::report::{Check, ExperimentReport};
use crate::rng::{normal_matrix, normal_vec, stream_rng};
use crate::tensor::{norm, Tensor};

pub const CLOSED_FORM_TOL: f64 = 1e-9;

/// Perturbation growth factors `K_1..K_n` under both residual schemes.
#[derive(Clone, Debug, PartialEq)]
pub struct Recurrence {
    pub k_rc: Vec<f64>,
    pub k_grc: Vec<f64>,
}

impl Recurrence {
    /// `K_GRC/K_RC` at depth `n` (1-based).
    pub fn ratio(&self, n: usize) -> f64 {
        self.k_grc[n - 1] / self.k_rc[n - 1]
    }
}

fn validate(l: f64, t: f64, n: usize) -> Result<()> {
    if !(l > 0.0 && l.is_finite()) || !(0.0..=1.0).contains(&t) || n == 0 {
        return Err(contract(format!(
            "need L > 0, t ∈ [0, 1], n ≥ 1; got L={l}, t={t}, n={n}"
        )));
    }
    Ok(())
}

/// Iterates `K_{ℓ+1} = (L+1)K_ℓ` and `K_{ℓ+1} = (L+1−t)K_ℓ + t` from
/// `K_1 = L + 1`.
pub fn robustness_recurrence(l: f64, t: f64, n: usize) -> Result<Recurrence> {
    validate(l, t, n)?;
    let a = l + 1.0 - t;
    let mut k_rc = vec![l + 1.0];
    let mut k_grc = vec![l + 1.0];
    for _ in 1..n {
        k_rc.push((l + 1.0) * k_rc.last().expect("nonempty"));
        k_grc.push(a * k_grc.last().expect("nonempty") + t);
    }
    Ok(Recurrence { k_rc, k_grc })
}

/// Which closed form of `K_{ℓ+1} = aK_ℓ + b` to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosedForm {
    /// `(K_1 − b/(a−1))a^{n−1} + b/(a−1)`, as the solution is usually
    /// written. Its offset has the wrong sign: it satisfies the recurrence
    /// only when `b = 0`.
    Stated,
    /// `(K_1 + b/(a−1))a^{n−1} − b/(a−1)`, built around the actual fixed
    /// point `b/(1−a)`.
    Derived,
}

impl ClosedForm {
    pub fn name(self) -> &'static str {
        match self {
            ClosedForm::Stated => "stated",
            ClosedForm::Derived => "derived",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "stated" => Ok(ClosedForm::Stated),
            "derived" => Ok(ClosedForm::Derived),
            other => Err(crate::error::config(format!(
                "unknown closed form '{other}' (stated|derived)"
            ))),
        }
    }
}

/// Closed-form `K_n` of the boosted recurrence with `a = L+1−t`, `b = t`,
/// `K_1 = L+1`. For `a = 1` the recurrence is arithmetic,
/// `K_n = K_1 + b(n−1)`, under either form.
pub fn closed_form_grc(l: f64, t: f64, n: usize, form: ClosedForm) -> Result<f64> {
    validate(l, t, n)?;
    let (a, b, k1) = (l + 1.0 - t, t, l + 1.0);
    if a == 1.0 {
        return Ok(k1 + b * (n as f64 - 1.0));
    }
    let offset = match form {
        ClosedForm::Stated => b / (a - 1.0),
        ClosedForm::Derived => -b / (a - 1.0),
    };
    Ok((k1 - offset) * a.powi(n as i32 - 1) + offset)
}

/// Closed form against iteration over a grid, the rate at `(L=1, t=1)`, and
/// geometric decay of the ratio.
///
/// Values grow like `a^n`, so the comparison is relative once `|K| > 1`:
/// `|Δ| / max(1, |K|) < 10⁻⁹`.
///
/// The check `closed_form_vs_iteration` uses `form`; the other form's worst
/// gap is recorded in the config.
pub fn recurrence_check(
    ls: &[f64],
    ts: &[f64],
    n_max: usize,
    form: ClosedForm,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new(
        "robustness-recurrence",
        &[
            "L",
            "t",
            "n",
            "k_rc",
            "k_grc",
            "closed_stated",
            "closed_derived",
            "ratio",
        ],
    );
    report.set("n_max", n_max).set("closed_form", form.name());
    let gap = |closed: f64, k: f64| (closed - k).abs() / k.abs().max(1.0);
    let (mut worst_stated, mut worst_derived) = (0.0f64, 0.0f64);
    for &l in ls {
        for &t in ts {
            let rec = robustness_recurrence(l, t, n_max)?;
            for n in 1..=n_max {
                let stated = closed_form_grc(l, t, n, ClosedForm::Stated)?;
                let derived = closed_form_grc(l, t, n, ClosedForm::Derived)?;
                let k = rec.k_grc[n - 1];
                worst_stated = worst_stated.max(gap(stated, k));
                worst_derived = worst_derived.max(gap(derived, k));
                report.row(cells![
                    l,
                    t,
                    n,
                    rec.k_rc[n - 1],
                    k,
                    stated,
                    derived,
                    rec.ratio(n)
                ]);
            }
            if t == 0.0 {
                let same = rec.k_rc == rec.k_grc;
                report.check(Check::flag(
                    format!("t0_equals_rc[L={l}]"),
                    same,
                    same as u8 as f64,
                    1.0,
                ));
            }
        }
    }
    let (worst, other, other_name) = match form {
        ClosedForm::Stated => (worst_stated, worst_derived, "derived"),
        ClosedForm::Derived => (worst_derived, worst_stated, "stated"),
    };
    report.set(format!("{other_name}_closed_form_max_gap"), other);
    report.check(
        Check::at_most("closed_form_vs_iteration", worst, CLOSED_FORM_TOL, 0.0)
            .with_detail(format!("{} form, |Δ|/max(1,|K|), n ≤ {n_max}", form.name())),
    );

    // the rate at L = 1, t = 1 (where a = 1, the arithmetic case)
    let rate = (1.0 - 1.0 / 2.0f64).powi(4);
    let rec = robustness_recurrence(1.0, 1.0, n_max.max(4))?;
    let factor = rec.ratio(4) / rate;
    report.check(
        Check::at_most("rate_factor[L=1,t=1,n=4]", factor, 8.0, 0.0).with_detail(format!(
            "K_GRC/K_RC={:.4} vs (1−t/(L+1))⁴={rate}",
            rec.ratio(4)
        )),
    );
    let ratios: Vec<f64> = (1..=rec.k_rc.len()).map(|n| rec.ratio(n)).collect();
    let growth = ratios.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    report.check(
        Check::flag("geometric_decay[L=1,t=1]", growth < 1.0, growth, 1.0)
            .with_detail("largest successive ratio"),
    );

    // non-degenerate regime: successive ratio tends to 1 − t/(L+1)
    let (l, t) = (1.0, 0.5);
    let rec = robustness_recurrence(l, t, 51)?;
    let successive = rec.ratio(51) / rec.ratio(50);
    let target = 1.0 - t / (l + 1.0);
    report.check(
        Check::at_most(
            "successive_ratio[L=1,t=0.5,n=50]",
            (successive / target - 1.0).abs(),
            0.05,
            0.0,
        )
        .with_detail(format!("{successive:.6} vs {target}")),
    );
    Ok(report)
}

/// `x ↦ tanh(Wx)`: Lipschitz with constant `‖W‖_op`.
fn layer(w: &Tensor, x: &[f64]) -> Vec<f64> {
    matvec(w, x).into_iter().map(f64::tanh).collect()
}

/// Relative input perturbation used by the empirical check.
pub const ROBUSTNESS_DELTA: f64 = 1e-3;

/// Propagates two inputs `δ` apart through `n` random layers
/// `tanh(W_ℓ x)` with `‖W_ℓ‖_op = L`, once with standard residuals and once
/// with the boost residual for each `t`, and compares the amplification
/// `‖Y_n − Y_n'‖/‖δ‖`.
///
/// The layers and inputs of a trial are shared by every scheme. Both
/// amplifications are also checked against the recurrence bounds.
pub fn robustness_empirical(
    l: f64,
    ts: &[f64],
    n: usize,
    d: usize,
    trials: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    for &t in ts {
        validate(l, t, n)?;
    }
    if trials == 0 || d == 0 {
        return Err(contract("need at least one trial and a positive width"));
    }
    let rows: Vec<(f64, Vec<f64>)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream_rng(seed, "robustness", trial as u64);
            let ws: Vec<Tensor> = (0..n)
                .map(|_| scale_to_spectral_norm(&normal_matrix(&mut rng, d, d, 1.0), l))
                .collect();
            let y0 = normal_vec(&mut rng, d, 1.0);
            let dir = normal_vec(&mut rng, d, 1.0);
            let dn = norm(&dir);
            let y0p: Vec<f64> = y0
                .iter()
                .zip(&dir)
                .map(|(a, b)| a + ROBUSTNESS_DELTA * b / dn)
                .collect();
            let run = |t: Option<f64>| {
                let (mut y, mut yp) = (y0.clone(), y0p.clone());
                for w in &ws {
                    let (f, fp) = (layer(w, &y), layer(w, &yp));
                    let step = |f: &[f64], cur: &[f64], start: &[f64]| -> Vec<f64> {
                        match t {
                            None => f.iter().zip(cur).map(|(a, b)| a + b).collect(),
                            Some(t) => f
                                .iter()
                                .zip(cur)
                                .zip(start)
                                .map(|((a, b), s)| a + t * s + (1.0 - t) * b)
                                .collect(),
                        }
                    };
                    let next = step(&f, &y, &y0);
                    let nextp = step(&fp, &yp, &y0p);
                    y = next;
                    yp = nextp;
                }
                let diff: Vec<f64> = y.iter().zip(&yp).map(|(a, b)| a - b).collect();
                norm(&diff) / ROBUSTNESS_DELTA
            };
            let rc = run(None);
            let boosts = ts.iter().map(|&t| run(Some(t))).collect();
            (rc, boosts)
        })
        .collect();

    let mut report = ExperimentReport::new(
        "robustness",
        &["trial", "t", "amp_rc", "amp_boost", "boost_le_rc"],
    );
    report
        .set("L", l)
        .set("n", n)
        .set("d", d)
        .set("trials", trials)
        .set("seed", seed);
    let rc_bound = (l + 1.0).powi(n as i32);
    let mut rc_over = 0usize;
    for (ti, &t) in ts.iter().enumerate() {
        let grc_bound = *robustness_recurrence(l, t, n)?.k_grc.last().expect("n ≥ 1");
        let (mut wins, mut over) = (0usize, 0usize);
        for (trial, (rc, boosts)) in rows.iter().enumerate() {
            let b = boosts[ti];
            let ok = b <= *rc;
            wins += ok as usize;
            over += (b > grc_bound * (1.0 + 1e-9)) as usize;
            report.row(cells![trial, t, rc, b, ok]);
        }
        let frac = wins as f64 / trials as f64;
        report.check(
            Check::at_least(format!("boost_le_rc[t={t}]"), frac, 1.0, 0.0)
                .with_detail(format!("{wins}/{trials} trials")),
        );
        report.check(Check::at_most(
            format!("grc_bound_exceeded[t={t}]"),
            over as f64,
            0.0,
            0.0,
        ));
    }
    for (rc, _) in &rows {
        rc_over += (*rc > rc_bound * (1.0 + 1e-9)) as usize;
    }
    report.check(Check::at_most(
        "rc_bound_exceeded",
        rc_over as f64,
        0.0,
        0.0,
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_zero_is_standard() {
        let r = robustness_recurrence(0.7, 0.0, 20).unwrap();
        assert_eq!(r.k_rc, r.k_grc);
    }

    #[test]
    fn degenerate_case_is_arithmetic() {
        let r = robustness_recurrence(1.0, 1.0, 6).unwrap();
        assert_eq!(r.k_grc, vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(
            closed_form_grc(1.0, 1.0, 6, ClosedForm::Stated).unwrap(),
            7.0
        );
        assert!((r.ratio(4) - 5.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn recurrence_grid_passes() {
        let r = recurrence_check(
            &[0.5, 1.0, 2.0],
            &[0.0, 0.25, 0.5, 1.0],
            50,
            ClosedForm::Derived,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    }

    #[test]
    fn stated_closed_form_misses_the_recurrence() {
        // a = 1.5, b = 0.5, K_1 = 2: iteration gives K_2 = 3.5, the stated form 2.5
        assert_eq!(robustness_recurrence(1.0, 0.5, 2).unwrap().k_grc[1], 3.5);
        assert_eq!(
            closed_form_grc(1.0, 0.5, 2, ClosedForm::Stated).unwrap(),
            2.5
        );
        assert_eq!(
            closed_form_grc(1.0, 0.5, 2, ClosedForm::Derived).unwrap(),
            3.5
        );
        let r = recurrence_check(&[1.0], &[0.5], 10, ClosedForm::Stated).unwrap();
        assert!(!r.check_named("closed_form_vs_iteration").unwrap().passed);
        // with t = 0 the offset vanishes and both forms agree
        let r = recurrence_check(&[1.0], &[0.0], 10, ClosedForm::Stated).unwrap();
        assert!(r.check_named("closed_form_vs_iteration").unwrap().passed);
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        assert!(robustness_recurrence(0.0, 0.5, 3).is_err());
        assert!(robustness_recurrence(1.0, 1.5, 3).is_err());
        assert!(closed_form_grc(1.0, 0.5, 0, ClosedForm::Derived).is_err());
    }

    #[test]
    fn small_empirical_run() {
        let r = robustness_empirical(1.0, &[0.25, 1.0], 6, 64, 20, 0).unwrap();
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    }
}
