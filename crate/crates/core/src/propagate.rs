//! `exp(-iHt)` for real symmetric sparse `H`.
//!
//! Small operators are diagonalized once and reused for every time. Larger
//! ones go through a Lanczos-Krylov propagator with a posteriori step control.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hilbert::SparseOperator;

/// Above this dimension the Krylov path is used.
pub const DENSE_LIMIT: usize = 4000;

const KRYLOV_DIM: usize = 30;

#[derive(Debug, Clone)]
pub enum Propagator {
    Dense { energies: DVector<f64>, vectors: DMatrix<f64> },
    Krylov { op: SparseOperator<f64>, tolerance: f64 },
}

impl Propagator {
    pub fn new(h: &SparseOperator<f64>) -> Self {
        if h.dim() <= DENSE_LIMIT {
            Self::dense(h)
        } else {
            Self::krylov(h.clone(), 1e-12)
        }
    }

    pub fn dense(h: &SparseOperator<f64>) -> Self {
        let eig = SymmetricEigen::new(h.to_dense());
        Self::Dense { energies: eig.eigenvalues, vectors: eig.eigenvectors }
    }

    pub fn krylov(op: SparseOperator<f64>, tolerance: f64) -> Self {
        Self::Krylov { op, tolerance }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Dense { energies, .. } => energies.len(),
            Self::Krylov { op, .. } => op.dim(),
        }
    }

    /// `exp(-iHt) psi`.
    pub fn evolve(&self, psi: &[Complex64], t: f64) -> Result<Vec<Complex64>> {
        if psi.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: psi.len() });
        }
        if t == 0.0 {
            return Ok(psi.to_vec());
        }
        match self {
            Self::Dense { energies, vectors } => {
                let coeffs = spectral_coefficients(vectors, psi);
                let phased: Vec<Complex64> = coeffs
                    .iter()
                    .zip(energies.iter())
                    .map(|(c, &e)| c * Complex64::from_polar(1.0, -e * t))
                    .collect();
                Ok(synthesize(vectors, &phased))
            }
            Self::Krylov { op, tolerance } => krylov_expm(op, psi, t, *tolerance),
        }
    }

    /// Eigen-decomposition, when dense.
    pub fn spectrum(&self) -> Option<(&DVector<f64>, &DMatrix<f64>)> {
        match self {
            Self::Dense { energies, vectors } => Some((energies, vectors)),
            Self::Krylov { .. } => None,
        }
    }
}

/// `U^T psi` for real orthogonal `U`.
fn spectral_coefficients(u: &DMatrix<f64>, psi: &[Complex64]) -> Vec<Complex64> {
    let n = u.nrows();
    (0..u.ncols())
        .map(|k| {
            let col = u.column(k);
            (0..n).fold(Complex64::new(0.0, 0.0), |acc, r| acc + psi[r] * col[r])
        })
        .collect()
}

fn synthesize(u: &DMatrix<f64>, coeffs: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); u.nrows()];
    for (k, c) in coeffs.iter().enumerate() {
        if c.norm_sqr() == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(u.column(k).iter()) {
            *o += c * x;
        }
    }
    out
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Lanczos basis of `H` started at `psi / |psi|`, with full reorthogonalization.
/// Returns the basis, the tridiagonal coefficients and the residual `beta_m`.
fn lanczos_basis(op: &SparseOperator<f64>, psi: &[Complex64], m_max: usize) -> (Vec<Vec<Complex64>>, Vec<f64>, Vec<f64>, f64) {
    let nrm = norm(psi);
    let mut basis = vec![psi.iter().map(|x| x / nrm).collect::<Vec<_>>()];
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let m_max = m_max.min(op.dim());
    loop {
        let k = basis.len() - 1;
        let mut w = op.apply(&basis[k]);
        let a = dot(&basis[k], &w).re;
        alpha.push(a);
        for _ in 0..2 {
            for v in &basis {
                let c = dot(v, &w);
                for (wi, vi) in w.iter_mut().zip(v) {
                    *wi -= c * vi;
                }
            }
        }
        let b = norm(&w);
        if basis.len() == m_max || b < 1e-14 * (1.0 + a.abs()) {
            return (basis, alpha, beta, b);
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
}

fn krylov_expm(op: &SparseOperator<f64>, psi: &[Complex64], t: f64, tol: f64) -> Result<Vec<Complex64>> {
    let mut state = psi.to_vec();
    let nrm0 = norm(psi);
    if nrm0 == 0.0 {
        return Ok(state);
    }
    let mut remaining = t;
    let mut step = t;
    while remaining.abs() > 0.0 {
        let (basis, alpha, beta, residual) = lanczos_basis(op, &state, KRYLOV_DIM);
        let m = alpha.len();
        let mut tri = DMatrix::zeros(m, m);
        for i in 0..m {
            tri[(i, i)] = alpha[i];
            if i + 1 < m {
                tri[(i, i + 1)] = beta[i];
                tri[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(tri);
        let nrm = norm(&state);
        let exact_subspace = m < KRYLOV_DIM || residual < 1e-14;
        let mut tau = step.abs().min(remaining.abs()).copysign(t);
        loop {
            // c = exp(-i T tau) e_1
            let c: Vec<Complex64> = (0..m)
                .map(|r| {
                    (0..m)
                        .map(|k| {
                            eig.eigenvectors[(r, k)]
                                * eig.eigenvectors[(0, k)]
                                * Complex64::from_polar(1.0, -eig.eigenvalues[k] * tau)
                        })
                        .sum::<Complex64>()
                })
                .collect();
            let err = if exact_subspace { 0.0 } else { residual * c[m - 1].norm() };
            if err <= tol {
                let mut next = vec![Complex64::new(0.0, 0.0); state.len()];
                for (ck, vk) in c.iter().zip(&basis) {
                    for (n, v) in next.iter_mut().zip(vk) {
                        *n += ck * v * nrm;
                    }
                }
                state = next;
                remaining -= tau;
                step = tau.abs() * if err < tol * 1e-3 { 2.0 } else { 1.0 };
                break;
            }
            tau *= 0.5;
            if tau.abs() < 1e-12 * t.abs().max(1.0) {
                return Err(Error::ConvergenceFailure(format!("Krylov step underflow, residual {err:e}")));
            }
        }
    }
    Ok(state)
}

/// One-shot `exp(-iHt) psi`.
pub fn evolve(h: &SparseOperator<f64>, psi: &[Complex64], t: f64) -> Result<Vec<Complex64>> {
    if psi.len() != h.dim() {
        return Err(Error::DimensionMismatch { expected: h.dim(), found: psi.len() });
    }
    if t == 0.0 {
        return Ok(psi.to_vec());
    }
    Propagator::new(h).evolve(psi, t)
}
