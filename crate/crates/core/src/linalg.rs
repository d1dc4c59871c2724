//! Small dense linear-algebra helpers: random orthogonal matrices and
//! spectral norms by power iteration.

use rand::Rng;

use crate::rng::{normal_matrix, normal_vec};
use crate::tensor::{dot, norm, Tensor};

/// Haar-distributed orthogonal `n×n` matrix: Gram–Schmidt on a Gaussian
/// matrix (columns orthonormalized twice for stability).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor {
    let g = normal_matrix(rng, n, n, 1.0);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for c in 0..n {
        let mut v: Vec<f64> = (0..n).map(|r| g.get(r, c)).collect();
        for _ in 0..2 {
            for q in &cols {
                let proj = dot(&v, q);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= proj * qi;
                }
            }
        }
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        cols.push(v);
    }
    let mut out = Tensor::zeros(&[n, n]);
    for (c, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            out.set(r, c, v);
        }
    }
    out
}

/// Random unit vector orthogonal to `u` (which must be nonzero and have at
/// least two coordinates).
pub fn random_orthogonal_unit<R: Rng + ?Sized>(rng: &mut R, u: &[f64]) -> Vec<f64> {
    let nu = norm(u);
    let e: Vec<f64> = u.iter().map(|x| x / nu).collect();
    loop {
        let mut w = normal_vec(rng, u.len(), 1.0);
        for _ in 0..2 {
            let p = dot(&w, &e);
            for (wi, ei) in w.iter_mut().zip(&e) {
                *wi -= p * ei;
            }
        }
        let nw = norm(&w);
        if nw > 1e-8 {
            w.iter_mut().for_each(|x| *x /= nw);
            return w;
        }
    }
}

/// `y = A x` for a matrix and a plain vector.
pub fn matvec(a: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|r| dot(a.row(r), x)).collect()
}

/// `y = Aᵀ x`.
pub fn matvec_t(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.cols()];
    for (r, &xr) in x.iter().enumerate() {
        for (yc, &arc) in y.iter_mut().zip(a.row(r)) {
            *yc += arc * xr;
        }
    }
    y
}

/// Largest singular value of `a`, by power iteration on `AᵀA` from a fixed
/// all-ones start, stopping once the estimate changes by less than `tol`
/// relative.
pub fn spectral_norm(a: &Tensor, tol: f64, max_iter: usize) -> f64 {
    let n = a.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    // Perturb the start slightly so it is unlikely to be orthogonal to the
    // top singular vector for structured inputs.
    for (k, x) in v.iter_mut().enumerate() {
        *x += 1e-3 * ((k * 7919 % 97) as f64 / 97.0 - 0.5);
    }
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        let w = matvec_t(a, &matvec(a, &v));
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        let next = nw.sqrt();
        v = w.into_iter().map(|x| x / nw).collect();
        if (next - sigma).abs() <= tol * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// `a` rescaled so its spectral norm is `target`.
pub fn scale_to_spectral_norm(a: &Tensor, target: f64) -> Tensor {
    let s = spectral_norm(a, 1e-12, 100_000);
    if s == 0.0 {
        return a.clone();
    }
    a.scale(target / s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn orthogonal_matrix_has_orthonormal_columns() {
        let mut rng = stream_rng(1, "linalg", 0);
        let q = random_orthogonal(&mut rng, 12);
        let qtq = q.transpose().unwrap().matmul(&q).unwrap();
        assert!(qtq.max_abs_diff(&Tensor::eye(12)).unwrap() < 1e-12);
    }

    #[test]
    fn orthogonal_unit_is_orthogonal() {
        let mut rng = stream_rng(2, "linalg", 0);
        let u = normal_vec(&mut rng, 9, 1.0);
        let w = random_orthogonal_unit(&mut rng, &u);
        assert!(dot(&u, &w).abs() < 1e-12);
        assert!((norm(&w) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let mut d = Tensor::zeros(&[3, 3]);
        d.set(0, 0, 1.0);
        d.set(1, 1, -4.0);
        d.set(2, 2, 2.5);
        assert!((spectral_norm(&d, 1e-14, 10_000) - 4.0).abs() < 1e-10);
        assert_eq!(spectral_norm(&Tensor::zeros(&[2, 5]), 1e-12, 100), 0.0);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let mut rng = stream_rng(3, "linalg", 0);
        let a = normal_matrix(&mut rng, 7, 5, 1.0);
        let m = nalgebra::DMatrix::from_row_slice(7, 5, a.data());
        let top = m.singular_values().max();
        assert!((spectral_norm(&a, 1e-14, 100_000) - top).abs() < 1e-8 * top);
        let scaled = scale_to_spectral_norm(&a, 1.0);
        let ms = nalgebra::DMatrix::from_row_slice(7, 5, scaled.data());
        assert!((ms.singular_values().max() - 1.0).abs() < 1e-8);
    }
}
