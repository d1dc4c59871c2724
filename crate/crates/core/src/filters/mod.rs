//! Data-dependent smoothing filters.
//!
//! Every filter here is the same estimator: given measurements `(p_j, y_j)`,
//! the estimate at `i` is the minimizer of
//!
//! ```text
//! J(u) = Σ_j K(i, j) ‖y_j − u‖²
//! ```
//!
//! which is the normalized weighted average `Σ_j K y_j / Σ_j K`. Filters
//! differ only in the weight `K`: the bilateral kernel multiplies a spatial
//! and a photometric Gaussian, non-local means compares whole patches and
//! ignores spatial distance.

mod denoise;
mod image;

pub use denoise::{denoise_image, DenoiseConfig, Denoised, FilterKernel, PatchGrid};
pub use image::{
    add_gaussian_noise, piecewise_constant, psnr, snr_of, Image, Snr, PILOT_SIGMA, PILOT_SIZE,
};

use crate::error::{contract, Error, Result};
use crate::tensor::sq_dist;

/// One observation: where it was taken and what was measured.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub position: Vec<f64>,
    pub value: Vec<f64>,
}

impl Measurement {
    pub fn new(position: Vec<f64>, value: Vec<f64>) -> Self {
        Self { position, value }
    }
}

/// `exp(−‖p_i − p_j‖²/h_p²) · exp(−‖y_i − y_j‖²/h_y²)`.
pub fn kernel_bf(p_i: &[f64], p_j: &[f64], y_i: &[f64], y_j: &[f64], h_p: f64, h_y: f64) -> f64 {
    log_kernel_bf(p_i, p_j, y_i, y_j, h_p, h_y).exp()
}

pub fn log_kernel_bf(
    p_i: &[f64],
    p_j: &[f64],
    y_i: &[f64],
    y_j: &[f64],
    h_p: f64,
    h_y: f64,
) -> f64 {
    -sq_dist(p_i, p_j) / (h_p * h_p) - sq_dist(y_i, y_j) / (h_y * h_y)
}

/// `exp(−‖y_i − y_j‖²/h_y²)` on vectorized patches.
pub fn kernel_nlm(y_i: &[f64], y_j: &[f64], h_y: f64) -> f64 {
    (-sq_dist(y_i, y_j) / (h_y * h_y)).exp()
}

/// Kernel-weighted average of every measurement's value, weighted by
/// `kernel(measurements[i], measurements[j])`.
///
/// Accumulated as `y_i + Σ K (y_j − y_i) / Σ K`, which is the same average
/// but reproduces constant signals exactly.
pub fn wls_denoise<K>(measurements: &[Measurement], kernel: K, i: usize) -> Result<Vec<f64>>
where
    K: Fn(&Measurement, &Measurement) -> f64,
{
    let query = measurements.get(i).ok_or_else(|| {
        contract(format!(
            "query index {i} out of range for {} measurements",
            measurements.len()
        ))
    })?;
    let dim = query.value.len();
    let mut num = vec![0.0; dim];
    let mut den = 0.0;
    for m in measurements {
        if m.value.len() != dim {
            return Err(Error::Shape {
                op: "wls_denoise",
                lhs: vec![dim],
                rhs: vec![m.value.len()],
            });
        }
        let w = kernel(query, m);
        den += w;
        for ((n, v), q) in num.iter_mut().zip(&m.value).zip(&query.value) {
            *n += w * (v - q);
        }
    }
    if !(den > 0.0) {
        return Err(Error::DegenerateKernel { query: i });
    }
    Ok(num
        .into_iter()
        .zip(&query.value)
        .map(|(n, q)| q + n / den)
        .collect())
}

/// `J(u) = Σ_j w_j ‖y_j − u‖²`.
pub fn wls_objective(weights: &[f64], values: &[Vec<f64>], u: &[f64]) -> f64 {
    weights
        .iter()
        .zip(values)
        .map(|(w, y)| w * sq_dist(y, u))
        .sum()
}

/// `∇J(u) = −2 Σ_j w_j (y_j − u)`.
pub fn wls_gradient(weights: &[f64], values: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; u.len()];
    for (w, y) in weights.iter().zip(values) {
        for ((gk, yk), uk) in g.iter_mut().zip(y).zip(u) {
            *gk -= 2.0 * w * (yk - uk);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream_rng};
    use crate::tensor::norm;
    use proptest::prelude::*;

    fn signal(n: usize, seed: u64) -> Vec<Measurement> {
        let mut rng = stream_rng(seed, "wls", 0);
        let noise = normal_vec(&mut rng, n, 0.2);
        (0..n)
            .map(|j| {
                let x = j as f64 / n as f64;
                Measurement::new(vec![j as f64], vec![(6.0 * x).sin() + noise[j]])
            })
            .collect()
    }

    #[test]
    fn uniform_kernel_gives_the_mean() {
        let ms = signal(17, 1);
        let mean = ms.iter().map(|m| m.value[0]).sum::<f64>() / 17.0;
        let u = wls_denoise(&ms, |_, _| 1.0, 4).unwrap();
        assert!((u[0] - mean).abs() < 1e-14);
    }

    #[test]
    fn vanishing_photometric_bandwidth_returns_the_measurement() {
        let ms = signal(30, 2);
        for i in [0, 11, 29] {
            let u = wls_denoise(
                &ms,
                |a, b| kernel_bf(&a.position, &b.position, &a.value, &b.value, 3.0, 1e-4),
                i,
            )
            .unwrap();
            assert!((u[0] - ms[i].value[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_weights_are_degenerate() {
        let ms = signal(5, 3);
        assert!(matches!(
            wls_denoise(&ms, |_, _| 0.0, 2),
            Err(Error::DegenerateKernel { query: 2 })
        ));
    }

    #[test]
    fn estimate_matches_descent_on_the_objective() {
        let ms = signal(40, 4);
        let (h_p, h_y) = (4.0, 0.5);
        let kern = |a: &Measurement, b: &Measurement| {
            kernel_bf(&a.position, &b.position, &a.value, &b.value, h_p, h_y)
        };
        for i in [0, 7, 23, 39] {
            let weights: Vec<f64> = ms.iter().map(|m| kern(&ms[i], m)).collect();
            let values: Vec<Vec<f64>> = ms.iter().map(|m| m.value.clone()).collect();
            // Plain gradient descent; the step is 1/(2Σw) times a damping
            // factor so the iteration contracts toward the minimizer.
            let total: f64 = weights.iter().sum();
            let lr = 0.25 / total;
            let mut u = vec![0.0];
            for _ in 0..500 {
                let g = wls_gradient(&weights, &values, &u);
                u[0] -= lr * g[0];
            }
            let est = wls_denoise(&ms, kern, i).unwrap();
            assert!((est[0] - u[0]).abs() < 1e-6, "{} vs {}", est[0], u[0]);
            let stationarity = norm(&wls_gradient(&weights, &values, &est));
            assert!(stationarity < 1e-8);
            assert!(
                wls_objective(&weights, &values, &est)
                    <= wls_objective(&weights, &values, &[est[0] + 1e-3])
            );
        }
    }

    #[test]
    fn bf_examples() {
        let p = [1.0, 2.0];
        let y = [0.4];
        assert_eq!(kernel_bf(&p, &p, &y, &y, 1.0, 1.0), 1.0);
        let (q, z) = ([3.0, -1.0], [0.9]);
        let wide = kernel_bf(&p, &q, &y, &z, 1e12, 0.3);
        let photometric = (-(0.5f64 * 0.5) / 0.09).exp();
        assert!((wide - photometric).abs() < 1e-12);
    }

    #[test]
    fn nlm_is_the_wide_bf_limit() {
        let mut rng = stream_rng(5, "nlm-limit", 0);
        let a = normal_vec(&mut rng, 9, 0.3);
        let b = normal_vec(&mut rng, 9, 0.3);
        let (pa, pb) = ([2.0, 5.0], [7.0, 1.0]);
        let nlm = kernel_nlm(&a, &b, 0.8);
        let bf = kernel_bf(&pa, &pb, &a, &b, 1e12, 0.8);
        assert!((nlm - bf).abs() < 1e-12);
    }

    #[test]
    fn nlm_decreases_with_distance() {
        let a = [0.0, 0.0, 0.0];
        let mut prev = kernel_nlm(&a, &a, 0.5);
        assert_eq!(prev, 1.0);
        for k in 1..20 {
            let b = [0.05 * k as f64, 0.0, 0.0];
            let cur = kernel_nlm(&a, &b, 0.5);
            assert!(cur < prev);
            prev = cur;
        }
    }

    proptest! {
        #[test]
        fn kernels_are_symmetric(
            pi in prop::collection::vec(-5.0f64..5.0, 2),
            pj in prop::collection::vec(-5.0f64..5.0, 2),
            yi in prop::collection::vec(-1.0f64..1.0, 4),
            yj in prop::collection::vec(-1.0f64..1.0, 4),
            hp in 0.1f64..10.0,
            hy in 0.1f64..10.0,
        ) {
            prop_assert_eq!(kernel_bf(&pi, &pj, &yi, &yj, hp, hy), kernel_bf(&pj, &pi, &yj, &yi, hp, hy));
            prop_assert_eq!(kernel_nlm(&yi, &yj, hy), kernel_nlm(&yj, &yi, hy));
        }

        #[test]
        fn estimate_is_a_convex_combination(
            values in prop::collection::vec(-3.0f64..3.0, 2..30),
            hp in 0.5f64..20.0,
            hy in 0.1f64..5.0,
            pick in 0usize..1000,
        ) {
            let ms: Vec<Measurement> = values.iter().enumerate()
                .map(|(j, &v)| Measurement::new(vec![j as f64], vec![v]))
                .collect();
            let i = pick % ms.len();
            let u = wls_denoise(&ms, |a, b| kernel_bf(&a.position, &b.position, &a.value, &b.value, hp, hy), i).unwrap();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(u[0] >= lo - 1e-12 && u[0] <= hi + 1e-12);
        }
    }
}
