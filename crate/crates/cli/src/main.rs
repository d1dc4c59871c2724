//! `filterlab`: runs any experiment or the whole invariant suite, writing
//! CSV tables, check summaries and a manifest of the resolved parameters.
//!
//! Exit status: 0 when every check passes, 1 when a check fails or a run
//! errors, 2 on a usage or configuration error.

mod commands;
mod run_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use filterlab::error::{Error, Result};
use filterlab::report::ExperimentReport;

use crate::commands::{defaults, execute, Outcome};
use crate::run_config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "filterlab",
    version,
    about = "Seeded numerical checks of attention as image filtering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Run the full invariant suite and print a check table
    Verify,
    /// Attention output against a descent minimizer of the weighted least-squares objective
    Thm1,
    /// Factorization of the attention kernel into two bilateral kernels
    Prop3,
    /// Local Lipschitz constant of softmax over sequence length
    Lipschitz,
    /// Expected softmax perturbation under logit noise
    Perturb,
    /// Expected noise norm against √N
    NoiseNorm,
    /// Perturbation of the attention output and the value-matrix norm band
    OutputPerturb,
    /// SNR gain of adding a denoised copy back to the measurement
    Snr,
    /// Signal decay under standard and anchored residual indices
    Vanish,
    /// Error propagation under standard and boosted residuals
    Robustness,
    /// Token similarity per layer of random-init stacks
    Oversmooth,
    /// Bilateral or non-local-means denoising of a P2 graymap
    Denoise,
    /// Train a small transformer on a synthetic task
    Train,
    /// Mixture-of-experts layer against its sparse matrix form
    MoeCheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Thm1 => "thm1",
            Command::Prop3 => "prop3",
            Command::Lipschitz => "lipschitz",
            Command::Perturb => "perturb",
            Command::NoiseNorm => "noise-norm",
            Command::OutputPerturb => "output-perturb",
            Command::Snr => "snr",
            Command::Vanish => "vanish",
            Command::Robustness => "robustness",
            Command::Oversmooth => "oversmooth",
            Command::Denoise => "denoise",
            Command::Train => "train",
            Command::MoeCheck => "moe-check",
        }
    }
}

/// Flags shared by every subcommand. Parameter flags are shorthands for
/// `--set key=value`; a flag the subcommand does not use is an error.
#[derive(Args, Debug)]
struct Common {
    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(
        long,
        global = true,
        env = "FILTERLAB_OUT",
        default_value = "filterlab-out"
    )]
    out: PathBuf,
    /// key=value file applied over the defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (results do not depend on it)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Generic override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[arg(long = "N", global = true, help = "Sequence length(s)")]
    n: Option<String>,
    #[arg(long, global = true, help = "Feature dimension")]
    d: Option<String>,
    #[arg(long, global = true, help = "Token norm")]
    c: Option<String>,
    #[arg(long, global = true, help = "Noise level(s)")]
    sigma: Option<String>,
    #[arg(long, global = true, help = "Monte Carlo trials")]
    trials: Option<String>,
    #[arg(long, global = true, help = "Boost weight(s)")]
    t: Option<String>,
    #[arg(long = "L", global = true, help = "Layer Lipschitz constant(s)")]
    l: Option<String>,
    #[arg(long, global = true, help = "Depth")]
    layers: Option<String>,
    #[arg(long, global = true, help = "Spatial bandwidth")]
    hp: Option<String>,
    #[arg(long, global = true, help = "Photometric bandwidth")]
    hy: Option<String>,
    #[arg(long, global = true, help = "Number of experts")]
    m: Option<String>,
    #[arg(long, global = true, help = "Kernel constant reading: stated|derived")]
    alpha: Option<String>,
    #[arg(
        long,
        global = true,
        help = "Norm for the value-matrix band: operator|frobenius"
    )]
    band: Option<String>,
    #[arg(
        long,
        global = true,
        help = "Closed form of the error recurrence: stated|derived"
    )]
    form: Option<String>,
    #[arg(long, global = true, help = "Comma-separated check groups for verify")]
    only: Option<String>,
    #[arg(long, global = true, help = "Input P2 graymap for denoise")]
    input: Option<String>,
    #[arg(long, global = true, help = "Filter for denoise: bf|nlm")]
    filter: Option<String>,
    #[arg(long, global = true, help = "Attention kernel for train")]
    kernel: Option<String>,
}

impl Common {
    fn flag_overrides(&self) -> Vec<(&'static str, &str)> {
        let flags: [(&'static str, &Option<String>); 18] = [
            ("N", &self.n),
            ("d", &self.d),
            ("c", &self.c),
            ("sigma", &self.sigma),
            ("trials", &self.trials),
            ("t", &self.t),
            ("L", &self.l),
            ("layers", &self.layers),
            ("hp", &self.hp),
            ("hy", &self.hy),
            ("m", &self.m),
            ("alpha", &self.alpha),
            ("band", &self.band),
            ("form", &self.form),
            ("only", &self.only),
            ("input", &self.input),
            ("filter", &self.filter),
            ("kernel", &self.kernel),
        ];
        flags
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

fn resolve(command: Command, common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::with_defaults(command.name(), defaults(command.name()));
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for (k, v) in common.flag_overrides() {
        cfg.set(k, v)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// File stem for each report, suffixed when a name repeats.
fn stems(outcome: &Outcome) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    outcome
        .reports
        .iter()
        .map(|(group, r)| {
            let base = if group == &r.name {
                r.name.clone()
            } else {
                format!("{group}.{}", r.name)
            };
            let count = seen.iter().filter(|s| **s == base).count();
            seen.push(base.clone());
            if count == 0 {
                base
            } else {
                format!("{base}-{count}")
            }
        })
        .collect()
}

fn write_outputs(dir: &Path, cfg: &RunConfig, outcome: &Outcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for ((_, report), stem) in outcome.reports.iter().zip(stems(outcome)) {
        report.write_csv(&dir.join(format!("{stem}.csv")))?;
        if !report.checks.is_empty() {
            report.write_checks_csv(&dir.join(format!("{stem}.checks.csv")))?;
        }
    }
    for (name, contents) in &outcome.files {
        std::fs::write(dir.join(name), contents)?;
    }
    std::fs::write(dir.join("manifest.txt"), cfg.manifest())?;
    log::info!("wrote results to {}", dir.display());
    Ok(())
}

fn print_checks(command: Command, outcome: &Outcome) {
    let all: Vec<(&str, &ExperimentReport)> = outcome
        .reports
        .iter()
        .map(|(g, r)| (g.as_str(), r))
        .collect();
    if let Command::Verify = command {
        println!(
            "{:<15} {:<40} {:>13} {:>13}  status",
            "group", "check", "value", "bound"
        );
        for (group, r) in &all {
            for c in &r.checks {
                println!(
                    "{group:<15} {:<40} {:>13.6e} {:>13.6e}  {}",
                    c.name,
                    c.value,
                    c.bound,
                    c.status()
                );
            }
        }
        let (total, failed) = all
            .iter()
            .flat_map(|(_, r)| &r.checks)
            .fold((0, 0), |(t, f), c| (t + 1, f + !c.passed as usize));
        println!("{} of {total} checks passed", total - failed);
    } else {
        for (_, r) in &all {
            for c in &r.checks {
                println!("{c}");
            }
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    let cfg = resolve(cli.command, &cli.common)?;
    log::debug!("resolved config:\n{}", cfg.manifest());
    let outcome = execute(&cfg)?;
    write_outputs(&cli.common.out.join(cfg.command.as_str()), &cfg, &outcome)?;
    print_checks(cli.command, &outcome);
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ (Error::Config(_) | Error::Parse(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
