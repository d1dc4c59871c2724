//! Report-producing wrappers around the residual, model and filter
//! modules, so every claim can be run the same way as the theory checks.

use rand::Rng;
use rayon::prelude::*;

use crate::attention::{KernelSpec, KernelVariant};
use crate::cells;
use crate::error::Result;
use crate::filters::{
    add_gaussian_noise, denoise_image, kernel_nlm, piecewise_constant, psnr, wls_denoise,
    DenoiseConfig, FilterKernel, Image, Measurement, PatchGrid, PILOT_SIGMA, PILOT_SIZE,
};
use crate::model::{
    embed_on_tape, layers_on_tape, moe_forward, moe_matrix_form, oversmoothing_curve, positions,
    readout_on_tape, router_weights, train, MoEConfig, ModelParams, ParamVars, TrainTask,
    TransformerConfig,
};
use crate::report::{Check, ExperimentReport};
use crate::residual::{signal_vanish_trajectory, twicing_rollout, IndexRule, ResidualScheme};
use crate::rng::{normal_matrix, normal_vec, stream_rng};
use crate::tensor::{check_gradients, norm, Tensor, DEFAULT_FD_STEP};

pub const TWICING_TOL: f64 = 1e-10;

/// Two boost steps with random linear layers on `16×8` states, direct
/// versus rearranged.
pub fn twicing_check(trials: usize, seed: u64) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("twicing", &["trial", "t", "max_abs_diff"]);
    report
        .set("trials", trials)
        .set("seed", seed)
        .set("shape", "16x8");
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, "twicing", trial as u64);
        let a0 = normal_matrix(&mut rng, 16, 16, 0.25);
        let a1 = normal_matrix(&mut rng, 16, 16, 0.25);
        let y0 = normal_matrix(&mut rng, 16, 8, 1.0);
        let yl = normal_matrix(&mut rng, 16, 8, 1.0);
        let t: f64 = rng.random();
        let (direct, rearranged) = twicing_rollout(&a0, &a1, &y0, &yl, t)?;
        let diff = direct.max_abs_diff(&rearranged)?;
        worst = worst.max(diff);
        report.row(cells![trial, t, diff]);
    }
    report.check(Check::at_most("twicing_identity", worst, TWICING_TOL, 0.0));
    Ok(report)
}

/// Signal trajectories under standard residuals (`i_ℓ = ℓ`) and a boost
/// anchor (`i_ℓ = 0`).
pub fn vanish_check(alpha: f64, depth: usize, u0_norm: f64) -> Result<ExperimentReport> {
    let rc = signal_vanish_trajectory(alpha, &IndexRule::Identity, depth, u0_norm)?;
    let anchored = signal_vanish_trajectory(alpha, &IndexRule::Constant(0), depth, u0_norm)?;
    let mut report = ExperimentReport::new("vanish", &["layer", "standard", "anchored"]);
    report
        .set("alpha", alpha)
        .set("depth", depth)
        .set("u0_norm", u0_norm);
    for (l, (a, b)) in rc.values.iter().zip(&anchored.values).enumerate() {
        report.row(cells![l + 1, a, b]);
    }
    let last = rc.values.last().copied().unwrap_or(f64::NAN);
    report.check(
        Check::at_most("standard_vanishes", last, 1e-6, 0.0).with_detail(format!("s_{depth}")),
    );
    let floor = anchored
        .values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    report.check(
        Check::flag("anchored_persists", floor > u0_norm, floor, u0_norm)
            .with_detail("min_ℓ s_ℓ > ‖u_0‖"),
    );
    Ok(report)
}

/// Mean pairwise token similarity per layer of random-init stacks (N = 32,
/// d = 32, standard kernel) under standard residuals and boost at t = 0.5,
/// on paired inputs and weights.
pub fn oversmoothing_check(layers: usize, samples: usize, seed: u64) -> Result<ExperimentReport> {
    let base = TransformerConfig::new(layers, 32, 32, 2, KernelSpec::standard());
    let rc = oversmoothing_curve(&base, samples, seed)?;
    let boost = oversmoothing_curve(
        &base.clone().with_residual(ResidualScheme::Boost { t: 0.5 }),
        samples,
        seed,
    )?;
    let mut report = ExperimentReport::new("oversmooth", &["layer", "value", "seed", "variant"]);
    report
        .set("layers", layers)
        .set("samples", samples)
        .set("seed", seed)
        .set("N", 32)
        .set("d", 32);
    for (name, curve) in [("rc", &rc), ("boost0.5", &boost)] {
        for (l, v) in curve.per_layer.iter().enumerate() {
            report.row(cells![l, v, seed, name]);
        }
    }
    report.set("excluded_pairs", rc.excluded + boost.excluded);
    report.check(
        Check::flag(
            "rc_exceeds_boost_last_layer",
            rc.last() > boost.last(),
            rc.last(),
            boost.last(),
        )
        .with_detail("value = RC, bound = boost"),
    );
    let drops = rc
        .per_layer
        .iter()
        .skip(2)
        .collect::<Vec<_>>()
        .windows(2)
        .filter(|w| w[1] < w[0])
        .count();
    report.check(Check::at_most(
        "rc_non_decreasing_from_layer_2",
        drops as f64,
        0.0,
        0.0,
    ));
    Ok(report)
}

pub const MOE_TOL: f64 = 1e-12;

/// Dense mixture against its sparse matrix form on seeded random configs
/// with `M = 8`, `k = 2`, `d = 16`, `k' = 32`.
pub fn moe_check(configs: usize, seed: u64) -> Result<ExperimentReport> {
    moe_check_sized(configs, 8, 2, 16, 32, seed)
}

/// [`moe_check`] with `m` experts, top-`k` routing, width `d` and expert
/// hidden width `ki`.
pub fn moe_check_sized(
    configs: usize,
    m: usize,
    k: usize,
    d: usize,
    ki: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("moe", &["config", "diff", "nnz", "gate_sum"]);
    report
        .set("configs", configs)
        .set("seed", seed)
        .set("M", m)
        .set("k", k)
        .set("d", d)
        .set("k_inner", ki);
    let (mut worst, mut max_nnz, mut worst_sum) = (0.0f64, 0usize, 0.0f64);
    for c in 0..configs {
        let mut rng = stream_rng(seed, "moe", c as u64);
        let cfg = MoEConfig::random(&mut rng, m, k, d, ki)?;
        let x = normal_vec(&mut rng, d, 1.0);
        let y = moe_forward(&cfg, &x)?;
        let sf = moe_matrix_form(&cfg, &x)?;
        let diff: Vec<f64> = y.iter().zip(&sf.y).map(|(a, b)| a - b).collect();
        let dn = norm(&diff);
        let g = router_weights(&cfg, &x)?;
        let gsum = g.iter().sum::<f64>();
        worst = worst.max(dn);
        max_nnz = max_nnz.max(sf.nnz());
        worst_sum = worst_sum.max((gsum - 1.0).abs());
        report.row(cells![c, dn, sf.nnz(), gsum]);
    }
    report.check(Check::at_most("moe_sparse_form", worst, MOE_TOL, 0.0));
    report.check(Check::at_most(
        "moe_nnz",
        max_nnz as f64,
        (k * ki) as f64,
        0.0,
    ));
    report.check(Check::at_most("moe_gate_sum", worst_sum, 1e-12, 0.0));
    Ok(report)
}

/// Minimum PSNR gain, in dB, required of each filter on the pilot image.
pub const PSNR_GAIN_THRESHOLD: f64 = 2.0;

/// Brute-force non-local means: every pixel averaged over the whole image
/// through the generic weighted least-squares estimator.
fn nlm_unrestricted(img: &Image, h_y: f64, patch_size: usize) -> Result<Image> {
    let grid = PatchGrid::from_image(img, patch_size, 1)?;
    // the patch plays the role of the kernel's comparison vector
    let ms: Vec<Measurement> = grid
        .patches
        .iter()
        .map(|(r, c, patch)| Measurement::new(patch.clone(), vec![img.get(*r, *c)]))
        .collect();
    let pixels = (0..ms.len())
        .map(|i| Ok(wls_denoise(&ms, |a, b| kernel_nlm(&a.position, &b.position, h_y), i)?[0]))
        .collect::<Result<Vec<f64>>>()?;
    Image::new(img.width(), img.height(), pixels)
}

/// Bilateral and non-local-means denoising of the seeded piecewise-constant
/// pilot image, plus whole-image NLM against the unrestricted estimator on
/// a 16×16 crop.
///
/// Rows follow the filter CSV schema
/// `(image, filter, h_p, h_y, window, sigma, psnr_in, psnr_out)`.
pub fn denoise_check(seed: u64) -> Result<ExperimentReport> {
    let clean = piecewise_constant(PILOT_SIZE, PILOT_SIZE);
    let noisy = add_gaussian_noise(&clean, PILOT_SIGMA, seed);
    let psnr_in = psnr(&clean, &noisy)?;
    let mut report = ExperimentReport::new(
        "denoise",
        &[
            "image", "filter", "h_p", "h_y", "window", "sigma", "psnr_in", "psnr_out",
        ],
    );
    report
        .set("seed", seed)
        .set("size", PILOT_SIZE)
        .set("sigma", PILOT_SIGMA);
    for cfg in [DenoiseConfig::pilot_bilateral(), DenoiseConfig::pilot_nlm()] {
        let out = denoise_image(&noisy, &cfg)?;
        let psnr_out = psnr(&clean, &out.image)?;
        let (hp, hy) = match cfg.kernel {
            FilterKernel::Bilateral { h_p, h_y } => (h_p.to_string(), h_y),
            FilterKernel::NonLocalMeans { h_y, .. } => (String::new(), h_y),
        };
        report.row(cells![
            "pilot",
            cfg.name(),
            hp,
            hy,
            cfg.search_window,
            PILOT_SIGMA,
            psnr_in,
            psnr_out
        ]);
        report.check(
            Check::at_least(
                format!("psnr_gain[{}]", cfg.name()),
                psnr_out - psnr_in,
                PSNR_GAIN_THRESHOLD,
                0.0,
            )
            .with_detail(format!("{psnr_in:.2} dB → {psnr_out:.2} dB")),
        );
    }

    let small_clean = piecewise_constant(16, 16);
    let small = add_gaussian_noise(&small_clean, PILOT_SIGMA, seed);
    let cfg = DenoiseConfig {
        search_window: 16,
        ..DenoiseConfig::pilot_nlm()
    };
    let FilterKernel::NonLocalMeans { h_y, patch_size } = cfg.kernel else {
        unreachable!("pilot_nlm is non-local means")
    };
    let windowed = denoise_image(&small, &cfg)?.image;
    let oracle = nlm_unrestricted(&small, h_y, patch_size)?;
    let gap = windowed
        .pixels()
        .iter()
        .zip(oracle.pixels())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    report.check(
        Check::at_most("nlm_full_window_exact", gap, 0.0, 0.0)
            .with_detail("16×16, window covers the image"),
    );
    Ok(report)
}

/// Per-run summary of a training comparison.
#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub report: ExperimentReport,
    /// `(seed, variant, initial loss, final loss)`.
    pub runs: Vec<(u64, String, f64, f64)>,
}

/// Copy-task training (N = 64, vocab 16, 2 layers, d = 32) for each kernel
/// variant and seed at equal budget. Checks that every run lowers its loss
/// and that the bilateral kernel ends at or below the standard one in at
/// least 3 of every 5 seeds.
pub fn training_check(seeds: &[u64], steps: usize, lr: f64) -> Result<TrainingOutcome> {
    const BATCH: usize = 4;
    const SAMPLES: usize = 256;
    let variants = ["standard", "bilateral", "nonlocal", "distance"];
    let mut report = ExperimentReport::new("train", &["step", "value", "seed", "variant"]);
    report
        .set("N", 64)
        .set("vocab", 16)
        .set("layers", 2)
        .set("d", 32)
        .set("steps", steps)
        .set("lr", lr)
        .set("batch", BATCH)
        .set("samples", SAMPLES);
    let mut runs = Vec::new();
    let mut all_reduce = true;
    let mut bsa_wins = 0usize;
    for &seed in seeds {
        let task = TrainTask::copy(64, 16, SAMPLES, seed);
        let mut finals = Vec::new();
        for name in variants {
            let cfg = TransformerConfig::new(2, 64, 32, 16, KernelSpec::from_name(name, 32)?)
                .with_seed(seed);
            let (trace, _) = train(&cfg, &task, steps, lr, BATCH)?;
            for (step, l) in trace.losses.iter().enumerate() {
                report.row(cells![step, l, seed, name]);
            }
            let (init, fin) = (trace.initial(), trace.final_loss());
            all_reduce &= fin < init;
            finals.push(fin);
            runs.push((seed, name.to_string(), init, fin));
        }
        bsa_wins += (finals[1] <= finals[0]) as usize;
    }
    report.check(Check::flag(
        "all_variants_reduce_loss",
        all_reduce,
        all_reduce as u8 as f64,
        1.0,
    ));
    let need = (3 * seeds.len()).div_ceil(5);
    report.check(
        Check::at_least("bsa_le_sa_seeds", bsa_wins as f64, need as f64, 0.0)
            .with_detail(format!("of {} seeds", seeds.len())),
    );
    Ok(TrainingOutcome { report, runs })
}

pub const GRAD_TOL: f64 = 1e-4;

/// Full-stack backward pass against central differences for every kernel
/// variant under every residual scheme, `instances` seeded draws each.
pub fn gradient_check_suite(instances: usize, seed: u64) -> Result<ExperimentReport> {
    let mut kernels: Vec<(String, KernelSpec)> = ["standard", "bilateral", "nonlocal", "distance"]
        .iter()
        .map(|n| Ok((n.to_string(), KernelSpec::from_name(n, 4)?)))
        .collect::<Result<_>>()?;
    let mut dis = KernelSpec::bilateral(4);
    if let KernelVariant::Bilateral { disentangled, .. } = &mut dis.variant {
        *disentangled = true;
    }
    kernels.push(("bilateral-disentangled".into(), dis));
    let residuals: Vec<(&str, ResidualScheme, bool)> = vec![
        ("rc", ResidualScheme::Standard, false),
        (
            "grc",
            ResidualScheme::Generalized {
                indices: IndexRule::Constant(0),
                scales: vec![0.6],
            },
            false,
        ),
        ("boost", ResidualScheme::Boost { t: 0.4 }, false),
        ("boost-learnable", ResidualScheme::Boost { t: 0.4 }, true),
    ];
    let jobs: Vec<(usize, usize, usize)> = (0..kernels.len())
        .flat_map(|k| {
            (0..residuals.len()).flat_map(move |r| (0..instances).map(move |i| (k, r, i)))
        })
        .collect();
    let errs: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(k, r, i)| {
            let (_, res, learn) = &residuals[r];
            let mut cfg =
                TransformerConfig::new(2, 5, 4, 6, kernels[k].1).with_residual(res.clone());
            cfg.learnable_t = *learn;
            cfg.seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let params = ModelParams::init(&cfg)?;
            let mut rng = stream_rng(cfg.seed, "gradcheck-data", (k * 16 + r) as u64);
            let toks: Vec<usize> = (0..cfg.n).map(|_| rng.random_range(0..cfg.vocab)).collect();
            let targets: Vec<(usize, usize)> = (0..cfg.n)
                .map(|p| (p, rng.random_range(0..cfg.vocab)))
                .collect();
            let pos = positions(&cfg)?;
            let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
            let check = check_gradients(&inputs, DEFAULT_FD_STEP, |tape, vars| {
                let pv = ParamVars::bind(&params, vars);
                let y0 = embed_on_tape(tape, &cfg, &pv, &toks, &pos)?;
                let hist = layers_on_tape(tape, &cfg, &pv, y0, &pos)?;
                let logits = readout_on_tape(tape, &pv, *hist.last().expect("nonempty"))?;
                tape.cross_entropy(logits, &targets)
            })?;
            Ok(check.max_rel_err)
        })
        .collect();
    let mut report = ExperimentReport::new(
        "gradcheck",
        &["kernel", "residual", "instance", "max_rel_err"],
    );
    report
        .set("instances", instances)
        .set("seed", seed)
        .set("fd_step", DEFAULT_FD_STEP);
    let mut worst = 0.0f64;
    for (&(k, r, i), e) in jobs.iter().zip(errs) {
        let e = e?;
        worst = worst.max(e);
        report.row(cells![kernels[k].0, residuals[r].0, i, e]);
    }
    report.check(
        Check::at_most("gradient_rel_err", worst, GRAD_TOL, 0.0).with_detail(format!(
            "{} kernels × {} residual schemes × {instances}",
            kernels.len(),
            residuals.len()
        )),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twicing_and_vanish_pass() {
        assert!(twicing_check(5, 0).unwrap().passed());
        let v = vanish_check(0.5, 50, 1.0).unwrap();
        assert!(v.passed(), "{:?}", v.checks);
        assert!(!vanish_check(0.9, 50, 1.0).unwrap().passed());
    }

    #[test]
    fn moe_small_run_passes() {
        assert!(moe_check(5, 1).unwrap().passed());
    }

    #[test]
    fn unrestricted_nlm_matches_windowed() {
        let img = add_gaussian_noise(&piecewise_constant(8, 8), 0.1, 3);
        let cfg = DenoiseConfig {
            search_window: 8,
            ..DenoiseConfig::nlm(0.4)
        };
        let a = denoise_image(&img, &cfg).unwrap().image;
        let b = nlm_unrestricted(&img, 0.4, 3).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn gradient_suite_single_instance() {
        let r = gradient_check_suite(1, 0).unwrap();
        assert!(r.passed(), "{:?}", r.checks);
        assert_eq!(r.rows.len(), 20);
    }
}
