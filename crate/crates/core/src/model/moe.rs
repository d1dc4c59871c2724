use rand::Rng;

use crate::error::{config, contract, Result};
use crate::linalg::matvec;
use crate::rng::normal_matrix;
use crate::tensor::{dot, softmax, Tensor};

/// Sparse mixture of `m` two-layer experts with a top-`k` router.
#[derive(Clone, Debug)]
pub struct MoEConfig {
    pub m: usize,
    pub k: usize,
    pub d: usize,
    pub k_inner: usize,
    /// `m × d`; row `j` is the router vector `θ_j`.
    pub router: Tensor,
    /// Expert output maps, each `d × k_inner`.
    pub p: Vec<Tensor>,
    /// Expert input maps, each `k_inner × d`.
    pub q: Vec<Tensor>,
}

impl MoEConfig {
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        m: usize,
        k: usize,
        d: usize,
        k_inner: usize,
    ) -> Result<Self> {
        let router = normal_matrix(rng, m, d, 1.0);
        let mut p = Vec::with_capacity(m);
        let mut q = Vec::with_capacity(m);
        for _ in 0..m {
            q.push(normal_matrix(rng, k_inner, d, 1.0 / (d as f64).sqrt()));
            p.push(normal_matrix(
                rng,
                d,
                k_inner,
                1.0 / (k_inner as f64).sqrt(),
            ));
        }
        let cfg = Self {
            m,
            k,
            d,
            k_inner,
            router,
            p,
            q,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d == 0 || self.k_inner == 0 {
            return Err(config("expert count and dimensions must be positive"));
        }
        if self.k == 0 || self.k > self.m {
            return Err(config(format!(
                "need 1 ≤ k ≤ M, got k={} with M={}",
                self.k, self.m
            )));
        }
        let shapes_ok = self.router.shape() == [self.m, self.d]
            && self.p.len() == self.m
            && self.q.len() == self.m
            && self.p.iter().all(|p| p.shape() == [self.d, self.k_inner])
            && self.q.iter().all(|q| q.shape() == [self.k_inner, self.d]);
        if !shapes_ok {
            return Err(config("expert or router shapes do not match (M, d, k')"));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        self.validate()?;
        if x.len() != self.d {
            return Err(contract(format!(
                "input has length {}, expected {}",
                x.len(),
                self.d
            )));
        }
        Ok(())
    }
}

/// Gate values `g_j`: softmax over the `k` largest router scores `xᵀθ_j`,
/// zero for unselected experts. Ties go to the lower expert index.
pub fn router_weights(cfg: &MoEConfig, x: &[f64]) -> Result<Vec<f64>> {
    cfg.check_input(x)?;
    let scores: Vec<f64> = (0..cfg.m).map(|j| dot(cfg.router.row(j), x)).collect();
    let mut order: Vec<usize> = (0..cfg.m).collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let chosen = &order[..cfg.k];
    let sel: Vec<f64> = chosen.iter().map(|&j| scores[j]).collect();
    let probs = softmax(&sel, 1.0);
    let mut g = vec![0.0; cfg.m];
    for (&j, w) in chosen.iter().zip(probs) {
        g[j] = w;
    }
    Ok(g)
}

fn expert_hidden(cfg: &MoEConfig, j: usize, x: &[f64]) -> Vec<f64> {
    matvec(&cfg.q[j], x)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect()
}

/// `Σ_j g_j P_j relu(Q_j x)`, evaluating only the selected experts.
pub fn moe_forward(cfg: &MoEConfig, x: &[f64]) -> Result<Vec<f64>> {
    let g = router_weights(cfg, x)?;
    let mut y = vec![0.0; cfg.d];
    for (j, &gj) in g.iter().enumerate() {
        if gj == 0.0 {
            continue;
        }
        let out = matvec(&cfg.p[j], &expert_hidden(cfg, j, x));
        for (yi, oi) in y.iter_mut().zip(out) {
            *yi += gj * oi;
        }
    }
    Ok(y)
}

/// The mixture written as one product `y = D z`.
#[derive(Clone, Debug)]
pub struct SparseForm {
    /// `[P_1 … P_M]`, shape `d × M·k'`.
    pub d_matrix: Tensor,
    /// Stacked blocks `g_j relu(Q_j x)`; unselected blocks are zero.
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

impl SparseForm {
    pub fn nnz(&self) -> usize {
        self.z.iter().filter(|v| **v != 0.0).count()
    }
}

pub fn moe_matrix_form(cfg: &MoEConfig, x: &[f64]) -> Result<SparseForm> {
    let g = router_weights(cfg, x)?;
    let width = cfg.m * cfg.k_inner;
    let mut d_matrix = Tensor::zeros(&[cfg.d, width]);
    for (j, p) in cfg.p.iter().enumerate() {
        for r in 0..cfg.d {
            d_matrix.row_mut(r)[j * cfg.k_inner..(j + 1) * cfg.k_inner].copy_from_slice(p.row(r));
        }
    }
    let mut z = vec![0.0; width];
    for (j, &gj) in g.iter().enumerate() {
        if gj == 0.0 {
            continue;
        }
        for (slot, h) in z[j * cfg.k_inner..]
            .iter_mut()
            .zip(expert_hidden(cfg, j, x))
        {
            *slot = gj * h;
        }
    }
    let y = matvec(&d_matrix, &z);
    Ok(SparseForm { d_matrix, z, y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream_rng};

    fn sample(m: usize, k: usize, d: usize, ki: usize, seed: u64) -> (MoEConfig, Vec<f64>) {
        let mut rng = stream_rng(seed, "moe-test", 0);
        let cfg = MoEConfig::random(&mut rng, m, k, d, ki).unwrap();
        let x = normal_vec(&mut rng, d, 1.0);
        (cfg, x)
    }

    #[test]
    fn dense_mixture_matches_exactly() {
        let (cfg, x) = sample(4, 4, 6, 5, 1);
        let g = router_weights(&cfg, &x).unwrap();
        assert!(g.iter().all(|&w| w > 0.0));
        let y = moe_forward(&cfg, &x).unwrap();
        let sf = moe_matrix_form(&cfg, &x).unwrap();
        let diff: f64 = y
            .iter()
            .zip(&sf.y)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff < 1e-12);
    }

    #[test]
    fn top_one_leaves_a_single_block() {
        let (cfg, x) = sample(5, 1, 4, 3, 2);
        let sf = moe_matrix_form(&cfg, &x).unwrap();
        let live: Vec<usize> = (0..5)
            .filter(|j| sf.z[j * 3..(j + 1) * 3].iter().any(|v| *v != 0.0))
            .collect();
        assert!(live.len() <= 1);
        let g = router_weights(&cfg, &x).unwrap();
        assert_eq!(g.iter().filter(|&&w| w == 1.0).count(), 1);
    }

    #[test]
    fn ties_prefer_the_lower_index() {
        let mut cfg = sample(3, 1, 2, 2, 3).0;
        cfg.router = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            router_weights(&cfg, &[1.0, 0.0]).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn k_larger_than_m_is_rejected() {
        let mut rng = stream_rng(0, "moe-test", 1);
        assert!(MoEConfig::random(&mut rng, 2, 3, 4, 4).is_err());
        let (cfg, _) = sample(2, 1, 4, 4, 0);
        assert!(moe_forward(&cfg, &[1.0]).is_err());
    }

    #[test]
    fn gates_form_a_distribution_over_the_selection() {
        for seed in 0..20 {
            let (cfg, x) = sample(8, 3, 5, 4, seed);
            let g = router_weights(&cfg, &x).unwrap();
            assert_eq!(g.iter().filter(|&&w| w > 0.0).count(), 3);
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
