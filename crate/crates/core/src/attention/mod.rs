//! Positional encodings, attention kernels and the single-head forward pass.
//!
//! Four similarity kernels are supported. `Standard` is ordinary dot-product
//! attention over token-plus-position embeddings. `Bilateral` separates the
//! token–token and position–position terms and gives each its own bandwidth,
//! dropping the token–position cross terms. `Nonlocal` keeps only the token
//! term, which is attention without positional information. `DistanceProxy`
//! replaces the positional term with a linear penalty on `|i − j|`.
//!
//! Each kernel produces an `N×N` logit matrix; a row-wise softmax turns it
//! into averaging weights over the value rows.

mod forward;

pub use forward::{
    attention_logits, attention_on_tape, logits_on_tape, self_attention_forward, Attention,
    ProjectionVars,
};

use crate::error::{config, contract, Error, Result};
use crate::rng::normal_matrix;
use crate::tensor::{dot, Tensor};

/// Conventional period base for sinusoidal encodings.
pub const DEFAULT_PERIOD: f64 = 10_000.0;

/// Default slope of the linear distance penalty.
pub const DEFAULT_SLOPE: f64 = 0.125;

/// Shape of a sinusoidal positional encoding table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionalConfig {
    pub n: usize,
    pub d: usize,
    pub period: f64,
}

impl PositionalConfig {
    pub fn new(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            period: DEFAULT_PERIOD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(contract(format!(
                "embedding dimension must be even and positive, got {}",
                self.d
            )));
        }
        if self.n == 0 {
            return Err(contract("sequence length must be at least 1"));
        }
        if !(self.period > 1.0) {
            return Err(contract(format!(
                "period base must exceed 1, got {}",
                self.period
            )));
        }
        Ok(())
    }
}

/// `p[i][2t] = sin(i / T^{2t/d})`, `p[i][2t+1] = cos(i / T^{2t/d})`.
///
/// Each row pairs a sine with a cosine of the same angle, so every row has
/// squared norm exactly `d/2`.
pub fn sinusoidal_pe(cfg: &PositionalConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, d) = (cfg.n, cfg.d);
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        for t in 0..d / 2 {
            let angle = i as f64 / cfg.period.powf(2.0 * t as f64 / d as f64);
            data[i * d + 2 * t] = angle.sin();
            data[i * d + 2 * t + 1] = angle.cos();
        }
    }
    Tensor::matrix(n, d, data)
}

/// `x_i = e_i + p_i`.
pub fn additive_embed(e: &Tensor, p: &Tensor) -> Result<Tensor> {
    e.add(p)
}

/// `(4d)^{1/4}`: with this bandwidth a Gaussian kernel's exponent
/// `−‖a − b‖²/h²` carries the inner product `aᵀb/√d` of dot-product
/// attention.
pub fn default_bandwidth(d: usize) -> f64 {
    (4.0 * d as f64).powf(0.25)
}

/// Which similarity the logits are built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelVariant {
    Standard,
    Bilateral {
        h_p: f64,
        h_y: f64,
        disentangled: bool,
    },
    Nonlocal {
        h_y: f64,
    },
    DistanceProxy {
        m: f64,
        h_y: f64,
    },
}

/// Kernel choice plus the inverse temperature applied inside the softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub variant: KernelVariant,
    pub inv_temp: f64,
}

impl KernelSpec {
    pub fn standard() -> Self {
        Self {
            variant: KernelVariant::Standard,
            inv_temp: 1.0,
        }
    }

    pub fn bilateral(d: usize) -> Self {
        let h = default_bandwidth(d);
        Self {
            variant: KernelVariant::Bilateral {
                h_p: h,
                h_y: h,
                disentangled: false,
            },
            inv_temp: 1.0,
        }
    }

    pub fn nonlocal(d: usize) -> Self {
        Self {
            variant: KernelVariant::Nonlocal {
                h_y: default_bandwidth(d),
            },
            inv_temp: 1.0,
        }
    }

    pub fn distance_proxy(d: usize) -> Self {
        Self {
            variant: KernelVariant::DistanceProxy {
                m: DEFAULT_SLOPE,
                h_y: default_bandwidth(d),
            },
            inv_temp: 1.0,
        }
    }

    /// Parses `standard`, `bilateral`, `nonlocal` or `distance` with default
    /// bandwidths for dimension `d`.
    pub fn from_name(name: &str, d: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "standard" | "sa" => Ok(Self::standard()),
            "bilateral" | "bsa" => Ok(Self::bilateral(d)),
            "nonlocal" | "nlsa" => Ok(Self::nonlocal(d)),
            "distance" | "distance-proxy" | "alibi" => Ok(Self::distance_proxy(d)),
            other => Err(config(format!("unknown kernel '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.variant {
            KernelVariant::Standard => "standard",
            KernelVariant::Bilateral { .. } => "bilateral",
            KernelVariant::Nonlocal { .. } => "nonlocal",
            KernelVariant::DistanceProxy { .. } => "distance",
        }
    }

    /// Whether `P` is added to the tokens before projection.
    pub fn uses_additive_positions(&self) -> bool {
        matches!(self.variant, KernelVariant::Standard)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("inverse temperature", self.inv_temp)?;
        match self.variant {
            KernelVariant::Standard => Ok(()),
            KernelVariant::Bilateral { h_p, h_y, .. } => {
                positive("h_p", h_p)?;
                positive("h_y", h_y)
            }
            KernelVariant::Nonlocal { h_y } => positive("h_y", h_y),
            KernelVariant::DistanceProxy { m, h_y } => {
                positive("slope m", m)?;
                positive("h_y", h_y)
            }
        }
    }
}

/// Query/key/value projections, optional position-only projections, and an
/// optional additive `N×N` logit bias.
///
/// Kernels that need `W = W_Qᵀ W_K` evaluate it through the two factors;
/// the product is never stored.
#[derive(Clone, Debug)]
pub struct ProjectionSet {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub hq: Option<Tensor>,
    pub hk: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl ProjectionSet {
    pub fn identity(d: usize) -> Self {
        Self {
            wq: Tensor::eye(d),
            wk: Tensor::eye(d),
            wv: Tensor::eye(d),
            hq: None,
            hk: None,
            bias: None,
        }
    }

    /// i.i.d. `N(0, std²)` entries; position projections drawn only when
    /// `with_positional` is set.
    pub fn random<R: rand::Rng + ?Sized>(
        rng: &mut R,
        d: usize,
        std: f64,
        with_positional: bool,
    ) -> Self {
        let wq = normal_matrix(rng, d, d, std);
        let wk = normal_matrix(rng, d, d, std);
        let wv = normal_matrix(rng, d, d, std);
        let (hq, hk) = if with_positional {
            (
                Some(normal_matrix(rng, d, d, std)),
                Some(normal_matrix(rng, d, d, std)),
            )
        } else {
            (None, None)
        };
        Self {
            wq,
            wk,
            wv,
            hq,
            hk,
            bias: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn validate(&self, spec: &KernelSpec) -> Result<()> {
        let d = self.dim();
        for (name, m) in [("W_Q", &self.wq), ("W_K", &self.wk), ("W_V", &self.wv)] {
            if m.shape() != [d, d] {
                return Err(Error::Shape {
                    op: "projection",
                    lhs: vec![d, d],
                    rhs: m.shape().to_vec(),
                });
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("{name} has non-finite entries")));
            }
        }
        if let KernelVariant::Bilateral {
            disentangled: true, ..
        } = spec.variant
        {
            match (&self.hq, &self.hk) {
                (Some(hq), Some(hk)) if hq.shape() == [d, d] && hk.shape() == [d, d] => {}
                (Some(_), Some(_)) => return Err(config("H_Q and H_K must be d×d")),
                _ => return Err(config("disentangled bilateral kernel requires H_Q and H_K")),
            }
        }
        Ok(())
    }
}

/// `exp((y_i + p_i)ᵀ(y_j + p_j)/√d)`.
pub fn kernel_sa(y_i: &[f64], p_i: &[f64], y_j: &[f64], p_j: &[f64]) -> f64 {
    log_kernel_sa(y_i, p_i, y_j, p_j).exp()
}

/// Logarithm of [`kernel_sa`], safe for large arguments.
pub fn log_kernel_sa(y_i: &[f64], p_i: &[f64], y_j: &[f64], p_j: &[f64]) -> f64 {
    let d = y_i.len();
    let xi: Vec<f64> = y_i.iter().zip(p_i).map(|(a, b)| a + b).collect();
    let xj: Vec<f64> = y_j.iter().zip(p_j).map(|(a, b)| a + b).collect();
    dot(&xi, &xj) / (d as f64).sqrt()
}
