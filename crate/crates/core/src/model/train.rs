use rand::Rng;
use rayon::prelude::*;

use super::{
    embed_on_tape, layers_on_tape, positions, readout_on_tape, ModelParams, ParamVars,
    TransformerConfig,
};
use crate::error::{config, Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// The second half of the sequence repeats the first; the model predicts
    /// each next token of the repeat.
    Copy,
    /// Key/value pairs followed by a query key; the model predicts the value
    /// bound to the query at the last position.
    AssociativeRecall,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "copy" => Ok(TaskKind::Copy),
            "recall" | "associative-recall" => Ok(TaskKind::AssociativeRecall),
            other => Err(config(format!("unknown task '{other}'"))),
        }
    }
}

/// Token sequence with `(position, next-token)` supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTask {
    pub kind: TaskKind,
    pub n: usize,
    pub vocab: usize,
    pub samples: usize,
    pub seed: u64,
}

impl TrainTask {
    pub fn copy(n: usize, vocab: usize, samples: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Copy,
            n,
            vocab,
            samples,
            seed,
        }
    }

    pub fn generate(&self) -> Result<Vec<Sample>> {
        if self.samples == 0 {
            return Err(config("task needs at least one sample"));
        }
        match self.kind {
            TaskKind::Copy if self.n < 4 || !self.n.is_multiple_of(2) => {
                return Err(config("copy task needs an even length of at least 4"))
            }
            TaskKind::AssociativeRecall if self.n < 3 || self.vocab < 4 => {
                return Err(config("recall task needs length ≥ 3 and vocabulary ≥ 4"))
            }
            _ => {}
        }
        Ok((0..self.samples)
            .map(|k| {
                let mut rng = stream_rng(self.seed, "task", k as u64);
                match self.kind {
                    TaskKind::Copy => self.copy_sample(&mut rng),
                    TaskKind::AssociativeRecall => self.recall_sample(&mut rng),
                }
            })
            .collect())
    }

    fn copy_sample<R: Rng>(&self, rng: &mut R) -> Sample {
        let half = self.n / 2;
        let first: Vec<usize> = (0..half).map(|_| rng.random_range(0..self.vocab)).collect();
        let tokens: Vec<usize> = first.iter().chain(&first).copied().collect();
        // from the last token of the first half onward, the next token is
        // determined by the copy
        let targets = (half - 1..self.n - 1).map(|i| (i, tokens[i + 1])).collect();
        Sample { tokens, targets }
    }

    fn recall_sample<R: Rng>(&self, rng: &mut R) -> Sample {
        let keys = self.vocab / 2;
        let pairs = (self.n - 1) / 2;
        let mut tokens = Vec::with_capacity(self.n);
        let mut bound = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            let k = rng.random_range(0..keys);
            let v = keys + rng.random_range(0..self.vocab - keys);
            tokens.extend([k, v]);
            bound.push((k, v));
        }
        while tokens.len() < self.n - 1 {
            tokens.push(rng.random_range(0..keys));
        }
        let (qk, _) = bound[rng.random_range(0..pairs)];
        // the latest binding of a repeated key wins
        let answer = bound
            .iter()
            .rev()
            .find(|(k, _)| *k == qk)
            .map(|(_, v)| *v)
            .expect("query drawn from pairs");
        tokens.push(qk);
        Sample {
            targets: vec![(self.n - 1, answer)],
            tokens,
        }
    }
}

/// Adam with the usual bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pk, &gk), mk), vk) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                *pk -= self.lr * (*mk / c1) / ((*vk / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-step mean batch loss.
#[derive(Clone, Debug)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

impl TrainTrace {
    pub fn initial(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    /// Mean of the last `min(10, len)` losses, which smooths minibatch noise.
    pub fn final_loss(&self) -> f64 {
        let k = self.losses.len().min(10);
        self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64
    }
}

fn sample_loss_and_grads(
    cfg: &TransformerConfig,
    params: &ModelParams,
    pos: &Tensor,
    sample: &Sample,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, true);
    let y0 = embed_on_tape(&mut tape, cfg, &pv, &sample.tokens, pos)?;
    let hist = layers_on_tape(&mut tape, cfg, &pv, y0, pos)?;
    let logits = readout_on_tape(&mut tape, &pv, *hist.last().expect("nonempty"))?;
    let loss = tape.cross_entropy(logits, &sample.targets)?;
    let grads = tape.backward(loss)?;
    let per_param = pv
        .all()
        .into_iter()
        .map(|v| grads.get_or_zeros(v, tape.value(v).shape()))
        .collect();
    Ok((tape.value(loss).data()[0], per_param))
}

/// Trains a freshly initialized model with Adam on minibatches that cycle
/// through the task's samples in order. Batch items are evaluated in
/// parallel and reduced in a fixed order, so the trace depends only on the
/// seeds.
pub fn train(
    cfg: &TransformerConfig,
    task: &TrainTask,
    steps: usize,
    lr: f64,
    batch: usize,
) -> Result<(TrainTrace, ModelParams)> {
    cfg.validate()?;
    if task.n != cfg.n || task.vocab != cfg.vocab {
        return Err(config("task length and vocabulary must match the model"));
    }
    if batch == 0 {
        return Err(config("batch size must be positive"));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(config(format!(
            "learning rate must be finite and nonnegative, got {lr}"
        )));
    }
    let data = task.generate()?;
    let pos = positions(cfg)?;
    let mut params = ModelParams::init(cfg)?;
    let mut opt = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let items: Vec<&Sample> = (0..batch)
            .map(|b| &data[(step * batch + b) % data.len()])
            .collect();
        let results: Vec<Result<(f64, Vec<Tensor>)>> = items
            .par_iter()
            .map(|s| sample_loss_and_grads(cfg, &params, &pos, s))
            .collect();
        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, g) = r?;
            loss += l;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, gk) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(gk.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let loss = loss / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        let grads: Vec<Tensor> = grads
            .expect("batch is nonempty")
            .into_iter()
            .map(|g| g.scale(1.0 / batch as f64))
            .collect();
        opt.update(params.tensors_mut(), &grads);
        for t in params.t.iter_mut() {
            let v = t.data()[0].clamp(0.0, 1.0);
            t.data_mut()[0] = v;
        }
        log::debug!("step {step}: loss {loss:.6}");
    }
    Ok((TrainTrace { losses }, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::KernelSpec;

    #[test]
    fn copy_samples_repeat_their_first_half() {
        let s = &TrainTask::copy(8, 5, 3, 1).generate().unwrap()[0];
        assert_eq!(s.tokens[..4], s.tokens[4..]);
        assert_eq!(s.targets.len(), 4);
        for &(i, t) in &s.targets {
            assert_eq!(s.tokens[i + 1], t);
        }
    }

    #[test]
    fn recall_answer_is_bound_to_the_query() {
        let task = TrainTask {
            kind: TaskKind::AssociativeRecall,
            n: 10,
            vocab: 8,
            samples: 20,
            seed: 2,
        };
        for s in task.generate().unwrap() {
            assert_eq!(s.tokens.len(), 10);
            let (pos, ans) = s.targets[0];
            assert_eq!(pos, 9);
            let q = s.tokens[9];
            assert!(q < 4 && ans >= 4);
            let last_binding = (0..4)
                .rev()
                .map(|p| (s.tokens[2 * p], s.tokens[2 * p + 1]))
                .find(|(k, _)| *k == q);
            assert_eq!(last_binding.map(|(_, v)| v), Some(ans));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let t = TrainTask::copy(8, 5, 4, 9);
        assert_eq!(t.generate().unwrap(), t.generate().unwrap());
        assert_ne!(
            t.generate().unwrap(),
            TrainTask::copy(8, 5, 4, 10).generate().unwrap()
        );
    }

    #[test]
    fn zero_learning_rate_gives_a_flat_trace() {
        let cfg = TransformerConfig::new(1, 8, 4, 5, KernelSpec::standard());
        let task = TrainTask::copy(8, 5, 3, 0);
        let (trace, _) = train(&cfg, &task, 5, 0.0, 3).unwrap();
        assert!(trace.losses.iter().all(|&l| l == trace.losses[0]));
    }

    #[test]
    fn short_run_reduces_loss_and_is_deterministic() {
        let cfg = TransformerConfig::new(1, 8, 8, 5, KernelSpec::bilateral(8));
        let task = TrainTask::copy(8, 5, 16, 3);
        let (a, _) = train(&cfg, &task, 40, 0.02, 4).unwrap();
        let (b, _) = train(&cfg, &task, 40, 0.02, 4).unwrap();
        assert_eq!(a.losses, b.losses);
        assert!(a.final_loss() < a.initial());
    }

    #[test]
    fn diverging_run_aborts() {
        let mut cfg = TransformerConfig::new(1, 8, 4, 5, KernelSpec::standard());
        cfg.init_std = Some(1e200);
        let task = TrainTask::copy(8, 5, 2, 0);
        assert!(matches!(
            train(&cfg, &task, 3, 0.1, 1),
            Err(Error::Divergence { .. })
        ));
    }
}
