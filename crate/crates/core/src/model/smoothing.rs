use rayon::prelude::*;

use super::{layers_on_tape, positions, ModelParams, ParamVars, TransformerConfig};
use crate::attention::ProjectionSet;
use crate::error::{contract, Result};
use crate::rng::{normal_matrix, stream_rng};
use crate::tensor::{dot, norm, Tape, Tensor};

/// Mean cosine similarity over all unordered row pairs of `y`.
///
/// Pairs involving a zero row have no defined cosine and are skipped; the
/// second value counts them.
pub fn mean_pairwise_cosine(y: &Tensor) -> Result<(f64, usize)> {
    let n = y.rows();
    if n < 2 {
        return Err(contract("pairwise similarity needs at least two tokens"));
    }
    let norms: Vec<f64> = (0..n).map(|i| norm(y.row(i))).collect();
    let (mut sum, mut count, mut excluded) = (0.0, 0usize, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                excluded += 1;
                continue;
            }
            sum += dot(y.row(i), y.row(j)) / (norms[i] * norms[j]);
            count += 1;
        }
    }
    let mean = if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    };
    Ok((mean, excluded))
}

/// Per-layer similarity averaged over samples, entry `ℓ` describing `Y_ℓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityCurve {
    pub per_layer: Vec<f64>,
    pub excluded: usize,
}

impl SimilarityCurve {
    pub fn last(&self) -> f64 {
        *self.per_layer.last().expect("curve has layer 0")
    }

    /// True when the curve never drops from layer `from` onward.
    pub fn non_decreasing_from(&self, from: usize) -> bool {
        self.per_layer
            .iter()
            .skip(from)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[1] >= w[0])
    }
}

/// Similarity of every state in a stack history.
pub fn history_similarity(history: &[Tensor]) -> Result<SimilarityCurve> {
    let mut per_layer = Vec::with_capacity(history.len());
    let mut excluded = 0;
    for y in history {
        let (m, e) = mean_pairwise_cosine(y)?;
        per_layer.push(m);
        excluded += e;
    }
    Ok(SimilarityCurve {
        per_layer,
        excluded,
    })
}

/// Runs a randomly initialized stack on random continuous inputs and records
/// how similar the tokens become with depth.
///
/// Sample `k` draws token features `E ~ N(0, 1)` and fresh layer weights from
/// the stream `(seed, "oversmooth", k)`, so two configs that differ only in
/// their residual scheme see identical inputs and weights. Inputs are
/// `E + P` for additive-position kernels and `E` otherwise.
pub fn oversmoothing_curve(
    cfg: &TransformerConfig,
    samples: usize,
    seed: u64,
) -> Result<SimilarityCurve> {
    cfg.validate()?;
    if samples == 0 {
        return Err(contract("oversmoothing curve needs at least one sample"));
    }
    if cfg.n < 2 {
        return Err(contract("oversmoothing curve needs at least two tokens"));
    }
    let pos = positions(cfg)?;
    let curves: Vec<Result<SimilarityCurve>> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, "oversmooth", k as u64);
            let e = normal_matrix(&mut rng, cfg.n, cfg.d, 1.0);
            let layers: Vec<ProjectionSet> = (0..cfg.n_layers)
                .map(|_| {
                    ProjectionSet::random(
                        &mut rng,
                        cfg.d,
                        cfg.weight_std(),
                        cfg.needs_positional_projections(),
                    )
                })
                .collect();
            let t = match cfg.residual {
                crate::residual::ResidualScheme::Boost { t } if cfg.learnable_t => {
                    vec![Tensor::scalar(t); cfg.n_layers]
                }
                _ => Vec::new(),
            };
            let params = ModelParams {
                embedding: Tensor::zeros(&[1, cfg.d]),
                layers,
                t,
                readout: Tensor::zeros(&[1, cfg.d]),
            };
            let mut tape = Tape::new();
            let pv = ParamVars::record(&mut tape, &params, false);
            let y0 = if cfg.kernel.uses_additive_positions() {
                e.add(&pos)?
            } else {
                e
            };
            let y0 = tape.constant(y0);
            let hist = layers_on_tape(&mut tape, cfg, &pv, y0, &pos)?;
            let states: Vec<Tensor> = hist.iter().map(|v| tape.value(*v).clone()).collect();
            history_similarity(&states)
        })
        .collect();
    let mut per_layer = vec![0.0; cfg.n_layers + 1];
    let mut excluded = 0;
    for c in curves {
        let c = c?;
        for (acc, v) in per_layer.iter_mut().zip(&c.per_layer) {
            *acc += v;
        }
        excluded += c.excluded;
    }
    for v in &mut per_layer {
        *v /= samples as f64;
    }
    Ok(SimilarityCurve {
        per_layer,
        excluded,
    })
}
