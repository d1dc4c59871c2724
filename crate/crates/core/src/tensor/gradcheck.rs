use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used when callers have no better choice.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference estimate of ∇f at `x`.
pub fn finite_diff_grad(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[k] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {k} (f+ = {fp}, f- = {fm})"
            )));
        }
        grad.data_mut()[k] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor). The floor keeps all-zero gradients from
/// dividing by zero while still reporting absolute disagreement.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm()).max(1e-8);
    diff / scale
}

/// Outcome of comparing tape gradients with finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Builds the graph with `build` on fresh tapes, once for the reverse sweep
/// and once per perturbed coordinate, and compares the two gradients for
/// every input.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.shape());
        let numeric = finite_diff_grad(
            |x| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, orig)| t.leaf(if j == k { x.clone() } else { orig.clone() }))
                    .collect();
                let r = build(&mut t, &vs)?;
                Ok(t.value(r).data()[0])
            },
            input,
            step,
        )?;
        per_input.push(relative_error(&analytic, &numeric));
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_err,
        per_input,
    })
}
