//! Subcommand definitions: declared keys with their defaults, and the
//! mapping from a resolved [`RunConfig`] to library calls.

use std::path::Path;

use filterlab::error::{Error, Result};
use filterlab::filters::{
    add_gaussian_noise, denoise_image, piecewise_constant, psnr, DenoiseConfig, FilterKernel, Image,
};
use filterlab::lab::{
    check_prop3_factorization, check_thm1_equivalence, lipschitz_sweep, moe_check_sized,
    noise_norm_bound_check, output_perturbation_check, oversmoothing_check,
    perturbation_expectation, recurrence_check, robustness_empirical, run_group, AlphaC, BandNorm,
    ClosedForm, MCSettings, NoiseDistribution, SuiteOptions, SUITE_GROUPS,
};
use filterlab::model::{train, TaskKind, TrainTask, TransformerConfig};
use filterlab::report::{Check, ExperimentReport};
use filterlab::residual::{signal_vanish_trajectory, verify_snr_boost, DenoiserProfile, IndexRule};
use filterlab::{cells, lab};

use crate::run_config::RunConfig;

/// Declared keys and defaults of each subcommand.
pub fn defaults(command: &str) -> &'static [(&'static str, &'static str)] {
    match command {
        "verify" => &[
            ("only", "all"),
            ("alpha", "derived"),
            ("band", "frobenius"),
            ("form", "derived"),
        ],
        "thm1" => &[("N", "16"), ("d", "8"), ("seeds", "20")],
        "prop3" => &[("N", "64"), ("d", "16"), ("c", "1"), ("alpha", "derived")],
        "lipschitz" => &[
            ("N", "100,200,500,1000,2000,5000,10000"),
            ("pairs", "3000"),
            ("lambda", "1"),
        ],
        "perturb" => &[
            ("N", "100,1000,10000"),
            ("d", "64"),
            ("sigma", "0.1,1"),
            ("trials", "1000"),
            ("lambda", "1"),
            ("dist", "gaussian"),
        ],
        "noise-norm" => &[
            ("N", "1,16,64,256,1024,4096"),
            ("trials", "100000"),
            ("dist", "gaussian,rademacher,uniform"),
        ],
        "output-perturb" => &[
            ("N", "128,256,512,1024,2048,4096"),
            ("d", "64"),
            ("sigma", "1"),
            ("trials", "1000"),
            ("lambda", "1"),
            ("dist", "gaussian"),
            ("band", "frobenius"),
        ],
        "snr" => &[("trials", "10000"), ("dim", "32"), ("profile", "random")],
        "vanish" => &[("scale", "0.5"), ("layers", "50"), ("u0", "1")],
        "robustness" => &[
            ("L", "1"),
            ("t", "0.25,0.5,1"),
            ("layers", "12"),
            ("d", "64"),
            ("trials", "1000"),
            ("n_max", "50"),
            ("form", "derived"),
        ],
        "oversmooth" => &[("layers", "12"), ("samples", "1000")],
        "denoise" => &[
            ("input", ""),
            ("size", "64"),
            ("filter", "bf"),
            ("hp", "3"),
            ("hy", "auto"),
            ("window", "auto"),
            ("patch", "3"),
            ("sigma", "0.1"),
        ],
        "train" => &[
            ("task", "copy"),
            ("N", "64"),
            ("vocab", "16"),
            ("layers", "2"),
            ("d", "32"),
            ("kernel", "standard"),
            ("residual", "rc"),
            ("t", "0.5"),
            ("steps", "150"),
            ("lr", "0.01"),
            ("batch", "4"),
            ("samples", "256"),
        ],
        "moe-check" => &[
            ("configs", "100"),
            ("m", "8"),
            ("k", "2"),
            ("d", "16"),
            ("k_inner", "32"),
        ],
        other => unreachable!("no defaults for '{other}'"),
    }
}

/// Reports produced by a run, each tagged with the group it belongs to.
pub struct Outcome {
    pub reports: Vec<(String, ExperimentReport)>,
    /// Extra files (name, contents) to write next to the CSVs.
    pub files: Vec<(String, String)>,
}

impl Outcome {
    fn of(command: &str, reports: Vec<ExperimentReport>) -> Self {
        Self {
            reports: reports
                .into_iter()
                .map(|r| (command.to_string(), r))
                .collect(),
            files: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.reports.iter().all(|(_, r)| r.passed())
    }
}

fn dists(cfg: &RunConfig) -> Result<Vec<NoiseDistribution>> {
    cfg.list::<String>("dist")?
        .iter()
        .map(|s| NoiseDistribution::parse(s))
        .collect()
}

pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    let seed = cfg.seed;
    let cmd = cfg.command.as_str();
    let reports = match cmd {
        "verify" => return verify(cfg),
        "thm1" => {
            let (n, d) = (cfg.parse("N")?, cfg.parse("d")?);
            let seeds: u64 = cfg.parse("seeds")?;
            (0..seeds)
                .map(|k| check_thm1_equivalence(n, d, seed.wrapping_add(k)))
                .collect::<Result<Vec<_>>>()?
        }
        "prop3" => vec![check_prop3_factorization(
            cfg.parse("N")?,
            cfg.parse("d")?,
            cfg.parse("c")?,
            AlphaC::parse(cfg.get("alpha"))?,
            seed,
        )?],
        "lipschitz" => vec![lipschitz_sweep(
            &cfg.list("N")?,
            cfg.parse("pairs")?,
            cfg.parse("lambda")?,
            seed,
        )?],
        "perturb" => vec![perturbation_expectation(
            &cfg.list("N")?,
            cfg.parse("d")?,
            &cfg.list("sigma")?,
            &dists(cfg)?,
            cfg.parse("trials")?,
            cfg.parse("lambda")?,
            seed,
        )?],
        "noise-norm" => vec![noise_norm_bound_check(
            &cfg.list("N")?,
            &dists(cfg)?,
            cfg.parse("trials")?,
            seed,
        )?],
        "output-perturb" => {
            let dist = NoiseDistribution::parse(cfg.get("dist"))?;
            let settings = MCSettings::new(cfg.parse("trials")?, seed, cfg.parse("sigma")?, dist);
            vec![output_perturbation_check(
                &cfg.list("N")?,
                cfg.parse("d")?,
                &settings,
                cfg.parse("lambda")?,
                BandNorm::parse(cfg.get("band"))?,
            )?]
        }
        "snr" => {
            let profile = match cfg.get("profile") {
                "random" => None,
                spec => {
                    let v: Vec<f64> = cfg.list("profile")?;
                    let [a, b, g] = v[..] else {
                        return Err(Error::Config(format!(
                            "profile must be 'random' or 'α,β,γ', got '{spec}'"
                        )));
                    };
                    Some(DenoiserProfile::new(a, b, g)?)
                }
            };
            vec![verify_snr_boost(
                profile,
                cfg.parse("trials")?,
                cfg.parse("dim")?,
                seed,
            )?]
        }
        "vanish" => vec![vanish(cfg)?],
        "robustness" => {
            let ls: Vec<f64> = cfg.list("L")?;
            let ts: Vec<f64> = cfg.list("t")?;
            let form = ClosedForm::parse(cfg.get("form"))?;
            let mut out = vec![recurrence_check(&ls, &ts, cfg.parse("n_max")?, form)?];
            for &l in &ls {
                out.push(robustness_empirical(
                    l,
                    &ts,
                    cfg.parse("layers")?,
                    cfg.parse("d")?,
                    cfg.parse("trials")?,
                    seed,
                )?);
            }
            out
        }
        "oversmooth" => vec![oversmoothing_check(
            cfg.parse("layers")?,
            cfg.parse("samples")?,
            seed,
        )?],
        "denoise" => return denoise(cfg),
        "train" => vec![train_run(cfg)?],
        "moe-check" => vec![moe_check_sized(
            cfg.parse("configs")?,
            cfg.parse("m")?,
            cfg.parse("k")?,
            cfg.parse("d")?,
            cfg.parse("k_inner")?,
            seed,
        )?],
        other => unreachable!("unhandled command '{other}'"),
    };
    Ok(Outcome::of(cmd, reports))
}

fn verify(cfg: &RunConfig) -> Result<Outcome> {
    let opts = SuiteOptions {
        seed: cfg.seed,
        alpha: AlphaC::parse(cfg.get("alpha"))?,
        band: BandNorm::parse(cfg.get("band"))?,
        closed_form: ClosedForm::parse(cfg.get("form"))?,
    };
    let groups: Vec<String> = match cfg.get("only") {
        "all" => SUITE_GROUPS.iter().map(|s| s.to_string()).collect(),
        _ => cfg.list("only")?,
    };
    let mut reports = Vec::new();
    for g in &groups {
        log::info!("running {g}");
        for r in run_group(g, &opts)? {
            reports.push((g.clone(), r));
        }
    }
    Ok(Outcome {
        reports,
        files: Vec::new(),
    })
}

fn vanish(cfg: &RunConfig) -> Result<ExperimentReport> {
    let scale: f64 = cfg.parse("scale")?;
    let layers: usize = cfg.parse("layers")?;
    let u0: f64 = cfg.parse("u0")?;
    let mut report = lab::vanish_check(scale, layers, u0)?;
    // the full trajectories, for plotting
    let standard = signal_vanish_trajectory(scale, &IndexRule::Identity, layers, u0)?;
    let anchored = signal_vanish_trajectory(scale, &IndexRule::Constant(0), layers, u0)?;
    report.columns = vec!["layer".into(), "standard".into(), "anchored".into()];
    report.rows = standard
        .values
        .iter()
        .zip(&anchored.values)
        .enumerate()
        .map(|(l, (s, a))| cells![l + 1, s, a])
        .collect();
    Ok(report)
}

fn denoise(cfg: &RunConfig) -> Result<Outcome> {
    let seed = cfg.seed;
    let clean = match cfg.get("input") {
        "" => {
            let size: usize = cfg.parse("size")?;
            piecewise_constant(size, size)
        }
        path => Image::read_pgm(Path::new(path))?,
    };
    let sigma: f64 = cfg.parse("sigma")?;
    let noisy = if sigma > 0.0 {
        add_gaussian_noise(&clean, sigma, seed)
    } else {
        clean.clone()
    };
    let auto = |key: &str, default: &str| -> String {
        match cfg.get(key) {
            "auto" => default.to_string(),
            v => v.to_string(),
        }
    };
    let mut dc = match cfg.get("filter") {
        "bf" => DenoiseConfig::bilateral(
            cfg.parse("hp")?,
            filterlab::config::parse_value("hy", &auto("hy", "0.3"))?,
        ),
        "nlm" => DenoiseConfig::nlm(filterlab::config::parse_value("hy", &auto("hy", "0.4"))?),
        other => return Err(Error::Config(format!("unknown filter '{other}' (bf|nlm)"))),
    };
    if let FilterKernel::NonLocalMeans { patch_size, .. } = &mut dc.kernel {
        *patch_size = cfg.parse("patch")?;
    }
    if cfg.get("window") != "auto" {
        dc.search_window = cfg.parse("window")?;
    }
    let out = denoise_image(&noisy, &dc)?;
    if out.clipped {
        log::warn!("search window clipped to the image size");
    }
    let (hp, hy) = match dc.kernel {
        FilterKernel::Bilateral { h_p, h_y } => (h_p.to_string(), h_y),
        FilterKernel::NonLocalMeans { h_y, .. } => (String::new(), h_y),
    };
    let (psnr_in, psnr_out) = if sigma > 0.0 {
        (
            psnr(&clean, &noisy)?.to_string(),
            psnr(&clean, &out.image)?.to_string(),
        )
    } else {
        (String::new(), String::new())
    };
    let mut report = ExperimentReport::new(
        "denoise",
        &[
            "image", "filter", "h_p", "h_y", "window", "sigma", "psnr_in", "psnr_out",
        ],
    );
    let image_name = match cfg.get("input") {
        "" => "synthetic".to_string(),
        p => Path::new(p)
            .file_name()
            .map_or(p.to_string(), |f| f.to_string_lossy().into_owned()),
    };
    report.row(cells![
        image_name,
        dc.name(),
        hp,
        hy,
        dc.search_window,
        sigma,
        psnr_in,
        psnr_out
    ]);
    let mut files = vec![("denoised.pgm".to_string(), out.image.to_pgm_string())];
    if sigma > 0.0 {
        files.push(("noisy.pgm".to_string(), noisy.to_pgm_string()));
    }
    Ok(Outcome {
        reports: vec![("denoise".into(), report)],
        files,
    })
}

fn train_run(cfg: &RunConfig) -> Result<ExperimentReport> {
    let model_keys = ["N", "vocab", "layers", "d", "kernel", "residual", "t"];
    let mut kv: String = model_keys
        .iter()
        .map(|k| format!("{k}={}\n", cfg.get(k)))
        .collect();
    kv.push_str(&format!("seed={}\n", cfg.seed));
    let model = TransformerConfig::from_kv(&kv)?;
    let task = TrainTask {
        kind: TaskKind::parse(cfg.get("task"))?,
        ..TrainTask::copy(model.n, model.vocab, cfg.parse("samples")?, cfg.seed)
    };
    let (trace, _) = train(
        &model,
        &task,
        cfg.parse("steps")?,
        cfg.parse("lr")?,
        cfg.parse("batch")?,
    )?;
    let mut report = ExperimentReport::new("train", &["step", "loss"]);
    for (step, l) in trace.losses.iter().enumerate() {
        report.row(cells![step, l]);
    }
    let (init, fin) = (trace.initial(), trace.final_loss());
    report.check(
        Check::flag("loss_reduced", fin < init, fin, init)
            .with_detail("value = final (mean of last 10), bound = initial"),
    );
    Ok(report)
}
