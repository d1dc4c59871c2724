//! A small attention-only transformer.
//!
//! Each layer is one attention head followed by a residual update; there are
//! no MLP blocks and no layer normalization, so the stack is exactly an
//! iterated data-dependent filter. Token ids are embedded, optionally shifted
//! by sinusoidal positions, filtered through the layers, and read out by a
//! linear map to vocabulary logits.

mod moe;
mod smoothing;
mod train;

pub use moe::{moe_forward, moe_matrix_form, router_weights, MoEConfig, SparseForm};
pub use smoothing::{
    history_similarity, mean_pairwise_cosine, oversmoothing_curve, SimilarityCurve,
};
pub use train::{train, Adam, Sample, TaskKind, TrainTask, TrainTrace};

use rand::Rng;

use crate::attention::{
    attention_on_tape, sinusoidal_pe, KernelSpec, KernelVariant, PositionalConfig, ProjectionSet,
    ProjectionVars,
};
use crate::config::{parse_kv, parse_value, render_kv};
use crate::error::{config, contract, Result};
use crate::residual::{IndexRule, ResidualScheme};
use crate::rng::{normal_matrix, stream_rng};
use crate::tensor::{Tape, Tensor, Var};

/// Shape and behaviour of the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n: usize,
    pub d: usize,
    pub vocab: usize,
    pub kernel: KernelSpec,
    pub residual: ResidualScheme,
    /// Train the boost weight `t` of every layer.
    pub learnable_t: bool,
    pub seed: u64,
    /// Multiplier on the positional table.
    pub pe_scale: f64,
    /// Standard deviation of projection weights; `None` means `1/√d`.
    pub init_std: Option<f64>,
}

impl TransformerConfig {
    pub fn new(n_layers: usize, n: usize, d: usize, vocab: usize, kernel: KernelSpec) -> Self {
        Self {
            n_layers,
            n,
            d,
            vocab,
            kernel,
            residual: ResidualScheme::Standard,
            learnable_t: false,
            seed: 0,
            pe_scale: 1.0,
            init_std: None,
        }
    }

    pub fn with_residual(mut self, residual: ResidualScheme) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn weight_std(&self) -> f64 {
        self.init_std.unwrap_or(1.0 / (self.d as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.vocab == 0 {
            return Err(config("N, d and vocab must be positive"));
        }
        if !self.d.is_multiple_of(2) {
            return Err(config(format!(
                "d must be even for sinusoidal positions, got {}",
                self.d
            )));
        }
        self.kernel.validate()?;
        self.residual.validate()?;
        if self.learnable_t && !matches!(self.residual, ResidualScheme::Boost { .. }) {
            return Err(config("learnable_t requires the boost residual scheme"));
        }
        if !(self.pe_scale.is_finite() && self.pe_scale >= 0.0) {
            return Err(config("pe_scale must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Reads `key=value` text over a default of 2 layers, N=64, d=32,
    /// vocab=16, standard kernel and standard residuals.
    ///
    /// Keys: `layers`, `N`, `d`, `vocab`, `kernel`, `hp`, `hy`, `m`,
    /// `disentangled`, `inv_temp`, `residual` (`rc`, `boost`, `grc`), `t`,
    /// `anchor` (GRC constant anchor index), `learnable_t`, `seed`,
    /// `pe_scale`, `init_std`.
    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
        };
        const KNOWN: &[&str] = &[
            "layers",
            "N",
            "d",
            "vocab",
            "kernel",
            "hp",
            "hy",
            "m",
            "disentangled",
            "inv_temp",
            "residual",
            "t",
            "anchor",
            "learnable_t",
            "seed",
            "pe_scale",
            "init_std",
        ];
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !KNOWN.contains(&k.as_str())) {
            return Err(config(format!("unknown model key '{k}'")));
        }
        let num = |k: &str, default: usize| -> Result<usize> {
            get(k).map_or(Ok(default), |v| parse_value(k, v))
        };
        let real =
            |k: &str| -> Result<Option<f64>> { get(k).map(|v| parse_value(k, v)).transpose() };
        let d = num("d", 32)?;
        let mut kernel = KernelSpec::from_name(get("kernel").unwrap_or("standard"), d)?;
        match &mut kernel.variant {
            KernelVariant::Standard => {}
            KernelVariant::Bilateral {
                h_p,
                h_y,
                disentangled,
            } => {
                *h_p = real("hp")?.unwrap_or(*h_p);
                *h_y = real("hy")?.unwrap_or(*h_y);
                if let Some(v) = get("disentangled") {
                    *disentangled = parse_value("disentangled", v)?;
                }
            }
            KernelVariant::Nonlocal { h_y } => *h_y = real("hy")?.unwrap_or(*h_y),
            KernelVariant::DistanceProxy { m, h_y } => {
                *m = real("m")?.unwrap_or(*m);
                *h_y = real("hy")?.unwrap_or(*h_y);
            }
        }
        kernel.inv_temp = real("inv_temp")?.unwrap_or(1.0);
        let t = real("t")?.unwrap_or(0.5);
        let residual = match get("residual").unwrap_or("rc") {
            "rc" | "standard" => ResidualScheme::Standard,
            "boost" => ResidualScheme::Boost { t },
            "grc" => ResidualScheme::Generalized {
                indices: IndexRule::Constant(num("anchor", 0)?),
                scales: vec![t],
            },
            other => return Err(config(format!("unknown residual scheme '{other}'"))),
        };
        let cfg = Self {
            n_layers: num("layers", 2)?,
            n: num("N", 64)?,
            d,
            vocab: num("vocab", 16)?,
            kernel,
            residual,
            learnable_t: get("learnable_t").map_or(Ok(false), |v| parse_value("learnable_t", v))?,
            seed: get("seed").map_or(Ok(0), |v| parse_value("seed", v))?,
            pe_scale: real("pe_scale")?.unwrap_or(1.0),
            init_std: real("init_std")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`TransformerConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("layers".into(), self.n_layers.to_string()),
            ("N".into(), self.n.to_string()),
            ("d".into(), self.d.to_string()),
            ("vocab".into(), self.vocab.to_string()),
            ("kernel".into(), self.kernel.name().into()),
        ];
        match self.kernel.variant {
            KernelVariant::Standard => {}
            KernelVariant::Bilateral {
                h_p,
                h_y,
                disentangled,
            } => {
                pairs.push(("hp".into(), h_p.to_string()));
                pairs.push(("hy".into(), h_y.to_string()));
                pairs.push(("disentangled".into(), disentangled.to_string()));
            }
            KernelVariant::Nonlocal { h_y } => pairs.push(("hy".into(), h_y.to_string())),
            KernelVariant::DistanceProxy { m, h_y } => {
                pairs.push(("m".into(), m.to_string()));
                pairs.push(("hy".into(), h_y.to_string()));
            }
        }
        pairs.push(("inv_temp".into(), self.kernel.inv_temp.to_string()));
        match &self.residual {
            ResidualScheme::Standard => pairs.push(("residual".into(), "rc".into())),
            ResidualScheme::Boost { t } => {
                pairs.push(("residual".into(), "boost".into()));
                pairs.push(("t".into(), t.to_string()));
            }
            ResidualScheme::Generalized { indices, scales } => {
                pairs.push(("residual".into(), "grc".into()));
                pairs.push((
                    "t".into(),
                    scales.last().copied().unwrap_or(1.0).to_string(),
                ));
                if let IndexRule::Constant(k) = indices {
                    pairs.push(("anchor".into(), k.to_string()));
                }
            }
        }
        pairs.push(("learnable_t".into(), self.learnable_t.to_string()));
        pairs.push(("seed".into(), self.seed.to_string()));
        pairs.push(("pe_scale".into(), self.pe_scale.to_string()));
        if let Some(s) = self.init_std {
            pairs.push(("init_std".into(), s.to_string()));
        }
        render_kv(&pairs)
    }

    fn needs_positional_projections(&self) -> bool {
        matches!(
            self.kernel.variant,
            KernelVariant::Bilateral {
                disentangled: true,
                ..
            }
        )
    }
}

/// Trainable parameters. The boost weights are one-element tensors so every
/// parameter can be handled uniformly by the optimizer.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub layers: Vec<ProjectionSet>,
    pub t: Vec<Tensor>,
    pub readout: Tensor,
}

impl ModelParams {
    /// Embedding entries `N(0, 1)`, projection and readout entries
    /// `N(0, std²)`, drawn from the config's seed.
    pub fn init(cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, "model-init", 0);
        Ok(Self::init_with(&mut rng, cfg))
    }

    pub fn init_with<R: Rng + ?Sized>(rng: &mut R, cfg: &TransformerConfig) -> Self {
        let std = cfg.weight_std();
        let embedding = normal_matrix(rng, cfg.vocab, cfg.d, 1.0);
        let layers = (0..cfg.n_layers)
            .map(|_| ProjectionSet::random(rng, cfg.d, std, cfg.needs_positional_projections()))
            .collect();
        let t0 = match cfg.residual {
            ResidualScheme::Boost { t } => t,
            _ => 0.0,
        };
        let t = if cfg.learnable_t {
            (0..cfg.n_layers).map(|_| Tensor::scalar(t0)).collect()
        } else {
            Vec::new()
        };
        let readout = normal_matrix(rng, cfg.vocab, cfg.d, std);
        Self {
            embedding,
            layers,
            t,
            readout,
        }
    }

    /// Every parameter in a fixed order shared with [`ParamVars::all`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            if let Some(h) = l.hq.as_mut() {
                out.push(h);
            }
            if let Some(h) = l.hk.as_mut() {
                out.push(h);
            }
        }
        out.extend(self.t.iter_mut());
        out.push(&mut self.readout);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend([&l.wq, &l.wk, &l.wv]);
            out.extend(l.hq.as_ref());
            out.extend(l.hk.as_ref());
        }
        out.extend(self.t.iter());
        out.push(&self.readout);
        out
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embedding: Var,
    pub layers: Vec<ProjectionVars>,
    pub t: Vec<Var>,
    pub readout: Var,
}

impl ParamVars {
    pub fn record(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars: Vec<Var> = params
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self::bind(params, &vars)
    }

    /// Assigns already-recorded handles, given in [`ModelParams::tensors`]
    /// order, to the parameter slots of `params`.
    pub fn bind(params: &ModelParams, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("one handle per parameter");
        let embedding = next();
        let layers = params
            .layers
            .iter()
            .map(|l| ProjectionVars {
                wq: next(),
                wk: next(),
                wv: next(),
                hq: l.hq.as_ref().map(|_| next()),
                hk: l.hk.as_ref().map(|_| next()),
            })
            .collect();
        let t = params.t.iter().map(|_| next()).collect();
        let readout = next();
        Self {
            embedding,
            layers,
            t,
            readout,
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv]);
            out.extend(l.hq);
            out.extend(l.hk);
        }
        out.extend(self.t.iter().copied());
        out.push(self.readout);
        out
    }
}

/// Positional table scaled by `pe_scale`.
pub fn positions(cfg: &TransformerConfig) -> Result<Tensor> {
    Ok(sinusoidal_pe(&PositionalConfig::new(cfg.n, cfg.d))?.scale(cfg.pe_scale))
}

/// Records `Y_0`: the embedded tokens, plus positions when the kernel uses
/// additive positional encoding.
pub fn embed_on_tape(
    tape: &mut Tape,
    cfg: &TransformerConfig,
    pv: &ParamVars,
    tokens: &[usize],
    pos: &Tensor,
) -> Result<Var> {
    if tokens.len() != cfg.n {
        return Err(contract(format!(
            "expected {} tokens, got {}",
            cfg.n,
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(contract(format!(
            "token {bad} outside vocabulary of {}",
            cfg.vocab
        )));
    }
    let e = tape.gather_rows(pv.embedding, tokens)?;
    if cfg.kernel.uses_additive_positions() {
        let p = tape.constant(pos.clone());
        tape.add(e, p)
    } else {
        Ok(e)
    }
}

/// Records the layer stack from `Y_0` and returns `Y_0..Y_n`.
///
/// Kernels with additive positions already carry them in `Y_0`, so their
/// layers see a zero positional table; the others receive `pos` at every
/// layer.
pub fn layers_on_tape(
    tape: &mut Tape,
    cfg: &TransformerConfig,
    pv: &ParamVars,
    y0: Var,
    pos: &Tensor,
) -> Result<Vec<Var>> {
    let layer_pos = if cfg.kernel.uses_additive_positions() {
        Tensor::zeros(pos.shape())
    } else {
        pos.clone()
    };
    let p = tape.constant(layer_pos);
    let mut history = vec![y0];
    for (l, proj) in pv.layers.iter().enumerate() {
        let y = *history.last().expect("nonempty");
        let f = attention_on_tape(tape, &cfg.kernel, proj, y, p, None)?;
        let next = match (&cfg.residual, cfg.learnable_t) {
            (ResidualScheme::Boost { .. }, true) => {
                // f + Y_ℓ + t (Y_0 − Y_ℓ); identical to the standard update at t = 0
                let pull = tape.sub(history[0], y)?;
                let pull = tape.scale_by(pull, pv.t[l])?;
                let base = tape.add(f, y)?;
                tape.add(base, pull)?
            }
            (ResidualScheme::Standard, _) => tape.add(f, y)?,
            (ResidualScheme::Boost { t }, false) => {
                let a = tape.scale(history[0], *t);
                let b = tape.scale(y, 1.0 - t);
                let fa = tape.add(f, a)?;
                tape.add(fa, b)?
            }
            (ResidualScheme::Generalized { indices, scales }, _) => {
                let i = indices.index(l)?;
                let t = scales.get(l).or(scales.last()).copied().unwrap_or(1.0);
                let anchor = tape.scale(history[i], t);
                tape.add(f, anchor)?
            }
        };
        history.push(next);
    }
    Ok(history)
}

/// `Y_n · readoutᵀ`: one row of vocabulary logits per position.
pub fn readout_on_tape(tape: &mut Tape, pv: &ParamVars, last: Var) -> Result<Var> {
    tape.matmul_t(last, pv.readout)
}

/// States of every layer and the final logits.
#[derive(Clone, Debug)]
pub struct StackOutput {
    pub history: Vec<Tensor>,
    pub logits: Tensor,
}

pub fn stack_forward(
    cfg: &TransformerConfig,
    params: &ModelParams,
    tokens: &[usize],
) -> Result<StackOutput> {
    cfg.validate()?;
    let pos = positions(cfg)?;
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, false);
    let y0 = embed_on_tape(&mut tape, cfg, &pv, tokens, &pos)?;
    let hist = layers_on_tape(&mut tape, cfg, &pv, y0, &pos)?;
    let logits = readout_on_tape(&mut tape, &pv, *hist.last().expect("nonempty"))?;
    Ok(StackOutput {
        history: hist.iter().map(|v| tape.value(*v).clone()).collect(),
        logits: tape.value(logits).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, DEFAULT_FD_STEP};

    fn tokens(cfg: &TransformerConfig) -> Vec<usize> {
        (0..cfg.n).map(|i| (i * 5 + 3) % cfg.vocab).collect()
    }

    #[test]
    fn zero_layers_read_out_the_embedding() {
        let cfg = TransformerConfig::new(0, 6, 4, 7, KernelSpec::nonlocal(4));
        let params = ModelParams::init(&cfg).unwrap();
        let toks = tokens(&cfg);
        let out = stack_forward(&cfg, &params, &toks).unwrap();
        assert_eq!(out.history.len(), 1);
        for (i, &t) in toks.iter().enumerate() {
            for v in 0..cfg.vocab {
                let want = crate::tensor::dot(params.embedding.row(t), params.readout.row(v));
                assert!((out.logits.get(i, v) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn history_is_complete_and_finite() {
        for name in ["standard", "bilateral", "nonlocal", "distance"] {
            let cfg = TransformerConfig::new(3, 8, 6, 5, KernelSpec::from_name(name, 6).unwrap());
            let params = ModelParams::init(&cfg).unwrap();
            let out = stack_forward(&cfg, &params, &tokens(&cfg)).unwrap();
            assert_eq!(out.history.len(), 4);
            assert!(out.history.iter().all(Tensor::is_finite));
        }
    }

    #[test]
    fn boost_at_zero_is_the_standard_stack() {
        let base = TransformerConfig::new(3, 8, 6, 5, KernelSpec::standard()).with_seed(4);
        let params = ModelParams::init(&base).unwrap();
        let toks = tokens(&base);
        let rc = stack_forward(&base, &params, &toks).unwrap();
        let boost0 = base.clone().with_residual(ResidualScheme::Boost { t: 0.0 });
        assert_eq!(
            stack_forward(&boost0, &params, &toks).unwrap().logits,
            rc.logits
        );

        let mut learn = boost0.clone();
        learn.learnable_t = true;
        let lp = ModelParams::init(&learn).unwrap();
        assert!(lp.t.iter().all(|t| t.data()[0] == 0.0));
        assert_eq!(lp.embedding, params.embedding);
        assert_eq!(stack_forward(&learn, &lp, &toks).unwrap().logits, rc.logits);
    }

    #[test]
    fn learnable_t_requires_boost() {
        let mut cfg = TransformerConfig::new(1, 4, 4, 3, KernelSpec::standard());
        cfg.learnable_t = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_tokens_are_rejected() {
        let cfg = TransformerConfig::new(1, 4, 4, 3, KernelSpec::standard());
        let params = ModelParams::init(&cfg).unwrap();
        assert!(stack_forward(&cfg, &params, &[0, 1, 2]).is_err());
        assert!(stack_forward(&cfg, &params, &[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn config_round_trips_through_text() {
        let text = "layers=3\nN=16\nd=8\nvocab=10\nkernel=bilateral\nhp=1.5\nresidual=boost\nt=0.25\nlearnable_t=true\nseed=9\n";
        let cfg = TransformerConfig::from_kv(text).unwrap();
        assert_eq!(cfg.n_layers, 3);
        assert_eq!(cfg.residual, ResidualScheme::Boost { t: 0.25 });
        assert!(matches!(cfg.kernel.variant, KernelVariant::Bilateral { h_p, .. } if h_p == 1.5));
        assert_eq!(TransformerConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(TransformerConfig::from_kv("depth=3").is_err());
        assert!(TransformerConfig::from_kv("residual=weird").is_err());
    }

    #[test]
    fn full_stack_gradient_check() {
        for (name, residual, learn) in [
            ("standard", ResidualScheme::Standard, false),
            ("bilateral", ResidualScheme::Boost { t: 0.3 }, true),
            ("distance", ResidualScheme::Boost { t: 0.5 }, false),
            (
                "nonlocal",
                ResidualScheme::Generalized {
                    indices: IndexRule::Constant(0),
                    scales: vec![0.7],
                },
                false,
            ),
        ] {
            let mut cfg =
                TransformerConfig::new(2, 5, 4, 6, KernelSpec::from_name(name, 4).unwrap())
                    .with_residual(residual);
            cfg.learnable_t = learn;
            let mut params = ModelParams::init(&cfg).unwrap();
            for t in params.t.iter_mut() {
                t.data_mut()[0] = 0.3;
            }
            let toks = tokens(&cfg);
            let pos = positions(&cfg).unwrap();
            let targets: Vec<(usize, usize)> =
                (0..cfg.n).map(|i| (i, (i + 1) % cfg.vocab)).collect();
            let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
            let check = check_gradients(&inputs, DEFAULT_FD_STEP, |tape, vars| {
                let pv = ParamVars::bind(&params, vars);
                let y0 = embed_on_tape(tape, &cfg, &pv, &toks, &pos)?;
                let hist = layers_on_tape(tape, &cfg, &pv, y0, &pos)?;
                let logits = readout_on_tape(tape, &pv, *hist.last().unwrap())?;
                tape.cross_entropy(logits, &targets)
            })
            .unwrap();
            assert!(check.max_rel_err < 1e-4, "{name}: {check:?}");
        }
    }
}
