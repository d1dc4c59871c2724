use super::{KernelSpec, KernelVariant, ProjectionSet};
use crate::error::{config, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Projection matrices already recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub hq: Option<Var>,
    pub hk: Option<Var>,
}

impl ProjectionVars {
    /// Records every matrix of `proj` as a differentiable leaf.
    pub fn leaves(tape: &mut Tape, proj: &ProjectionSet) -> Self {
        Self {
            wq: tape.leaf(proj.wq.clone()),
            wk: tape.leaf(proj.wk.clone()),
            wv: tape.leaf(proj.wv.clone()),
            hq: proj.hq.as_ref().map(|h| tape.leaf(h.clone())),
            hk: proj.hk.as_ref().map(|h| tape.leaf(h.clone())),
        }
    }

    /// Records every matrix of `proj` as a constant.
    pub fn constants(tape: &mut Tape, proj: &ProjectionSet) -> Self {
        Self {
            wq: tape.constant(proj.wq.clone()),
            wk: tape.constant(proj.wk.clone()),
            wv: tape.constant(proj.wv.clone()),
            hq: proj.hq.as_ref().map(|h| tape.constant(h.clone())),
            hk: proj.hk.as_ref().map(|h| tape.constant(h.clone())),
        }
    }
}

/// `(A W_Qᵀ)(A W_Kᵀ)ᵀ`, i.e. `a_iᵀ W_Qᵀ W_K a_j` for every pair of rows.
fn bilinear(tape: &mut Tape, a: Var, wq: Var, wk: Var) -> Result<Var> {
    let q = tape.matmul_t(a, wq)?;
    let k = tape.matmul_t(a, wk)?;
    tape.matmul_t(q, k)
}

/// `−m |i − j|` for an `n×n` grid.
fn distance_penalty(n: usize, m: f64) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            t.set(i, j, -m * (i as f64 - j as f64).abs());
        }
    }
    t
}

fn check_inputs(
    spec: &KernelSpec,
    e: &Tensor,
    p: &Tensor,
    d: usize,
    bias: Option<&Tensor>,
) -> Result<()> {
    spec.validate()?;
    if e.shape() != p.shape() {
        return Err(Error::Shape {
            op: "attention inputs",
            lhs: e.shape().to_vec(),
            rhs: p.shape().to_vec(),
        });
    }
    if e.shape().len() != 2 || e.cols() != d {
        return Err(Error::Shape {
            op: "attention token width",
            lhs: e.shape().to_vec(),
            rhs: vec![e.rows(), d],
        });
    }
    if let Some(b) = bias {
        let n = e.rows();
        if b.shape() != [n, n] {
            return Err(Error::Shape {
                op: "attention bias",
                lhs: vec![n, n],
                rhs: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Records the `N×N` logit matrix for `spec`. `bias`, when given, is added
/// as a constant.
pub fn logits_on_tape(
    tape: &mut Tape,
    spec: &KernelSpec,
    proj: &ProjectionVars,
    e: Var,
    p: Var,
    bias: Option<&Tensor>,
) -> Result<Var> {
    let d = tape.value(proj.wq).rows();
    check_inputs(spec, tape.value(e), tape.value(p), d, bias)?;
    let n = tape.value(e).rows();
    let logits = match spec.variant {
        KernelVariant::Standard => {
            let x = tape.add(e, p)?;
            let raw = bilinear(tape, x, proj.wq, proj.wk)?;
            tape.scale(raw, 1.0 / (d as f64).sqrt())
        }
        KernelVariant::Bilateral {
            h_p,
            h_y,
            disentangled,
        } => {
            let tok = bilinear(tape, e, proj.wq, proj.wk)?;
            let tok = tape.scale(tok, 1.0 / (h_y * h_y));
            let (pq, pk) = if disentangled {
                match (proj.hq, proj.hk) {
                    (Some(hq), Some(hk)) => (hq, hk),
                    _ => return Err(config("disentangled bilateral kernel requires H_Q and H_K")),
                }
            } else {
                (proj.wq, proj.wk)
            };
            let pos = bilinear(tape, p, pq, pk)?;
            let pos = tape.scale(pos, 1.0 / (h_p * h_p));
            tape.add(tok, pos)?
        }
        KernelVariant::Nonlocal { h_y } => {
            let tok = bilinear(tape, e, proj.wq, proj.wk)?;
            tape.scale(tok, 1.0 / (h_y * h_y))
        }
        KernelVariant::DistanceProxy { m, h_y } => {
            let tok = bilinear(tape, e, proj.wq, proj.wk)?;
            let tok = tape.scale(tok, 1.0 / (h_y * h_y));
            let pen = tape.constant(distance_penalty(n, m));
            tape.add(tok, pen)?
        }
    };
    match bias {
        Some(b) => {
            let b = tape.constant(b.clone());
            tape.add(logits, b)
        }
        None => Ok(logits),
    }
}

/// Records `softmax_rows(logits) · V` and returns the output rows.
///
/// Values are `V = X W_Vᵀ` with `X = E + P` for `Standard` and `X = E` for
/// the kernels that carry position in the logits only.
pub fn attention_on_tape(
    tape: &mut Tape,
    spec: &KernelSpec,
    proj: &ProjectionVars,
    e: Var,
    p: Var,
    bias: Option<&Tensor>,
) -> Result<Var> {
    let logits = logits_on_tape(tape, spec, proj, e, p, bias)?;
    let weights = tape.softmax_rows(logits, spec.inv_temp)?;
    let x = if spec.uses_additive_positions() {
        tape.add(e, p)?
    } else {
        e
    };
    let v = tape.matmul_t(x, proj.wv)?;
    tape.matmul(weights, v)
}

/// Logit matrix of `spec` for tokens `E` at positions `P`.
pub fn attention_logits(
    spec: &KernelSpec,
    proj: &ProjectionSet,
    e: &Tensor,
    p: &Tensor,
) -> Result<Tensor> {
    proj.validate(spec)?;
    let mut tape = Tape::new();
    let vars = ProjectionVars::constants(&mut tape, proj);
    let ev = tape.constant(e.clone());
    let pv = tape.constant(p.clone());
    let l = logits_on_tape(&mut tape, spec, &vars, ev, pv, proj.bias.as_ref())?;
    Ok(tape.value(l).clone())
}

/// `U = softmax_rows(logits) · V`.
pub fn self_attention_forward(
    spec: &KernelSpec,
    proj: &ProjectionSet,
    e: &Tensor,
    p: &Tensor,
) -> Result<Tensor> {
    proj.validate(spec)?;
    let mut tape = Tape::new();
    let vars = ProjectionVars::constants(&mut tape, proj);
    let ev = tape.constant(e.clone());
    let pv = tape.constant(p.clone());
    let u = attention_on_tape(&mut tape, spec, &vars, ev, pv, proj.bias.as_ref())?;
    Ok(tape.value(u).clone())
}

/// Attention layer bound to a fixed positional table.
///
/// For every kernel except `Standard` the positional contribution to the
/// logits does not depend on the tokens, so it is computed once here and
/// reused by every forward call.
#[derive(Clone, Debug)]
pub struct Attention {
    spec: KernelSpec,
    proj: ProjectionSet,
    positions: Tensor,
    positional_logits: Option<Tensor>,
}

impl Attention {
    pub fn new(spec: KernelSpec, proj: ProjectionSet, positions: Tensor) -> Result<Self> {
        proj.validate(&spec)?;
        spec.validate()?;
        let n = positions.rows();
        let d = proj.dim();
        if positions.cols() != d {
            return Err(Error::Shape {
                op: "positional table",
                lhs: vec![n, d],
                rhs: positions.shape().to_vec(),
            });
        }
        let bilinear = |a: &Tensor, wq: &Tensor, wk: &Tensor| -> Result<Tensor> {
            let q = a.matmul(&wq.transpose()?)?;
            let k = a.matmul(&wk.transpose()?)?;
            q.matmul(&k.transpose()?)
        };
        let mut positional_logits = match spec.variant {
            KernelVariant::Standard | KernelVariant::Nonlocal { .. } => None,
            KernelVariant::Bilateral {
                h_p, disentangled, ..
            } => {
                let (wq, wk) = if disentangled {
                    (
                        proj.hq.as_ref().expect("validated"),
                        proj.hk.as_ref().expect("validated"),
                    )
                } else {
                    (&proj.wq, &proj.wk)
                };
                Some(bilinear(&positions, wq, wk)?.scale(1.0 / (h_p * h_p)))
            }
            KernelVariant::DistanceProxy { m, .. } => Some(distance_penalty(n, m)),
        };
        if let Some(b) = &proj.bias {
            positional_logits = Some(match positional_logits {
                Some(t) => t.add(b)?,
                None => b.clone(),
            });
        }
        Ok(Self {
            spec,
            proj,
            positions,
            positional_logits,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn positional_logits(&self) -> Option<&Tensor> {
        self.positional_logits.as_ref()
    }

    pub fn logits(&self, e: &Tensor) -> Result<Tensor> {
        let d = self.proj.dim();
        check_inputs(&self.spec, e, &self.positions, d, None)?;
        let token = |a: &Tensor| -> Result<Tensor> {
            let q = a.matmul(&self.proj.wq.transpose()?)?;
            let k = a.matmul(&self.proj.wk.transpose()?)?;
            q.matmul(&k.transpose()?)
        };
        let base = match self.spec.variant {
            KernelVariant::Standard => {
                token(&e.add(&self.positions)?)?.scale(1.0 / (d as f64).sqrt())
            }
            KernelVariant::Bilateral { h_y, .. }
            | KernelVariant::Nonlocal { h_y }
            | KernelVariant::DistanceProxy { h_y, .. } => token(e)?.scale(1.0 / (h_y * h_y)),
        };
        match &self.positional_logits {
            Some(pos) => base.add(pos),
            None => Ok(base),
        }
    }

    pub fn forward(&self, e: &Tensor) -> Result<Tensor> {
        let w = self.logits(e)?.softmax_rows(self.spec.inv_temp)?;
        let x = if self.spec.uses_additive_positions() {
            e.add(&self.positions)?
        } else {
            e.clone()
        };
        w.matmul(&x.matmul(&self.proj.wv.transpose()?)?)
    }
}
