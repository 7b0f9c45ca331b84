//! Linear model chain: the one-excitation matrix and the operator-series
//! recursion for `X_1(t)`.
//!
//! `X_1(t) = sum_i alpha_i(t) S^X_i + beta_i(t) S^Y_i`, where the strings
//! `S_i` alternate between `Z..ZX` and `Z..ZY` along the chain, and
//! `alpha_i = sum_j delta_ij t^j / j!`, `beta_i = sum_j gamma_ij t^j / j!`.

use serde::{Deserialize, Serialize};

use crate::dynamics::SeriesCoefficients;
use crate::hilbert::SparseOperator;
use crate::scalar::{factorial, Scalar};
use crate::topology::ModelChainSpec;

/// Global factor relating `beta_1` to `g_Y`. The recursion taken literally
/// already matches the exact traces, so no correction is applied.
pub const RECURSION_CONVENTION: i32 = 1;

/// Tridiagonal one-excitation matrix: `J_i` off the diagonal, `B'_i` on it.
pub fn oes_matrix<T: Scalar>(model: &ModelChainSpec<T>) -> SparseOperator<T> {
    let n = model.site_count();
    let mut triplets = Vec::with_capacity(3 * n);
    for i in 0..n {
        triplets.push((i, i, model.effective_fields[i].clone()));
        if i + 1 < n {
            triplets.push((i, i + 1, model.couplings[i].clone()));
            triplets.push((i + 1, i, model.couplings[i].clone()));
        }
    }
    SparseOperator::from_triplets(n, n, triplets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeisenbergSeries<T> {
    pub max_order: usize,
    /// `delta[i - 1][j]`
    pub delta: Vec<Vec<T>>,
    /// `gamma[i - 1][j]`
    pub gamma: Vec<Vec<T>>,
}

/// Fills the tables by the recursion
///
/// `delta_ij = (-1)^i (J_{i-1} delta_{i-1,j-1} + J_i delta_{i+1,j-1} + B'_i gamma_{i,j-1})`
/// `gamma_ij = (-1)^(i+1) (J_{i-1} gamma_{i-1,j-1} + J_i gamma_{i+1,j-1} + B'_i delta_{i,j-1})`
///
/// with `delta_i0 = [i = 1]`, `gamma_i0 = 0`, and anything outside the chain zero.
pub fn heisenberg_series<T: Scalar>(model: &ModelChainSpec<T>, max_order: usize) -> HeisenbergSeries<T> {
    let n = model.site_count();
    let mut delta = vec![vec![T::zero(); max_order + 1]; n];
    let mut gamma = vec![vec![T::zero(); max_order + 1]; n];
    if n > 0 {
        delta[0][0] = T::one();
    }
    let at = |table: &Vec<Vec<T>>, i: usize, j: usize| -> T {
        if (1..=n).contains(&i) {
            table[i - 1][j].clone()
        } else {
            T::zero()
        }
    };
    for j in 1..=max_order {
        for i in 1..=n {
            let left = model.coupling(i as isize - 2);
            let right = model.coupling(i as isize - 1);
            let field = model.effective_fields[i - 1].clone();
            let d = left.clone() * at(&delta, i - 1, j - 1)
                + right.clone() * at(&delta, i + 1, j - 1)
                + field.clone() * at(&gamma, i, j - 1);
            let g = left * at(&gamma, i - 1, j - 1) + right * at(&gamma, i + 1, j - 1) + field * at(&delta, i, j - 1);
            let (sd, sg) = if i % 2 == 0 { (T::one(), -T::one()) } else { (-T::one(), T::one()) };
            delta[i - 1][j] = sd * d;
            gamma[i - 1][j] = sg * g;
        }
    }
    HeisenbergSeries { max_order, delta, gamma }
}

impl<T: Scalar> HeisenbergSeries<T> {
    pub fn site_count(&self) -> usize {
        self.delta.len()
    }

    fn polynomial(&self, row: &[T], note: String) -> SeriesCoefficients<T> {
        SeriesCoefficients {
            coefficients: row.iter().enumerate().map(|(j, c)| c.clone() / factorial::<T>(j)).collect(),
            note,
        }
    }

    /// Taylor coefficients of `alpha_i` (site `i` is 1-based).
    pub fn alpha(&self, i: usize) -> SeriesCoefficients<T> {
        self.polynomial(&self.delta[i - 1], format!("alpha_{i}"))
    }

    pub fn beta(&self, i: usize) -> SeriesCoefficients<T> {
        self.polynomial(&self.gamma[i - 1], format!("beta_{i}"))
    }

    /// `g_X` of the chain, equal to `alpha_1`.
    pub fn correlator_x(&self) -> SeriesCoefficients<T> {
        let mut s = self.alpha(1);
        s.note = "g_X from alpha_1".into();
        s
    }

    /// `g_Y` of the chain, equal to `beta_1` up to the recorded convention.
    pub fn correlator_y(&self) -> SeriesCoefficients<T> {
        let mut s = self.beta(1);
        if RECURSION_CONVENTION < 0 {
            s.coefficients.iter_mut().for_each(|c| *c = -c.clone());
        }
        s.note = "g_Y from beta_1".into();
        s
    }

    /// Lowest order at which site `i` carries weight, or `None` if it never does.
    pub fn onset(&self, i: usize) -> Option<usize> {
        (0..=self.max_order).find(|&j| !self.delta[i - 1][j].is_zero() || !self.gamma[i - 1][j].is_zero())
    }

    pub fn to_f64(&self) -> HeisenbergSeries<f64> {
        let conv = |t: &Vec<Vec<T>>| t.iter().map(|r| r.iter().map(Scalar::to_f64).collect()).collect();
        HeisenbergSeries { max_order: self.max_order, delta: conv(&self.delta), gamma: conv(&self.gamma) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::correlator_series_pair;
    use crate::scalar::ratio;
    use nalgebra::SymmetricEigen;
    use num_rational::BigRational;

    #[test]
    fn oes_matrix_examples() {
        let path = ModelChainSpec::new(vec![1.0, 1.0], vec![0.0; 3]).unwrap();
        let mut ev = SymmetricEigen::new(oes_matrix(&path).to_dense()).eigenvalues.as_slice().to_vec();
        ev.sort_by(f64::total_cmp);
        let r2 = 2f64.sqrt();
        for (a, b) in ev.iter().zip([-r2, 0.0, r2]) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = ModelChainSpec::new(vec![], vec![0.4]).unwrap();
        assert_eq!(oes_matrix(&single).get(0, 0), 0.4);
        let pair = ModelChainSpec::new(vec![2.0], vec![0.0; 2]).unwrap();
        let ev = SymmetricEigen::new(oes_matrix(&pair).to_dense()).eigenvalues;
        assert!((ev.amax() - 2.0).abs() < 1e-12 && (ev.sum()).abs() < 1e-12);
    }

    #[test]
    fn initial_conditions_and_front() {
        let model = ModelChainSpec::new(vec![1.0, -0.5, 0.8, 1.2], vec![0.3, 0.1, -0.2, 0.0, 0.5]).unwrap();
        let s = heisenberg_series(&model, 8);
        assert_eq!(s.alpha(1).get(0), 1.0);
        for i in 1..=5 {
            assert_eq!(s.gamma[i - 1][0], 0.0);
            if i > 1 {
                assert_eq!(s.delta[i - 1][0], 0.0);
            }
            for j in 0..i.saturating_sub(1) {
                assert_eq!(s.delta[i - 1][j], 0.0);
                assert_eq!(s.gamma[i - 1][j], 0.0);
            }
            assert_eq!(s.onset(i), Some(i - 1));
        }
    }

    #[test]
    fn uniform_three_site_matches_traces_exactly() {
        let model = ModelChainSpec::new(vec![ratio::<BigRational>(1, 1); 2], vec![ratio(0, 1); 3]).unwrap();
        let s = heisenberg_series(&model, 8);
        let (gx, gy) = correlator_series_pair(&model, 8).unwrap();
        assert_eq!(s.correlator_x().coefficients, gx.coefficients);
        assert_eq!(s.correlator_y().coefficients, gy.coefficients);
    }

    #[test]
    fn rational_fields_match_traces_exactly() {
        let model = ModelChainSpec::new(
            vec![ratio::<BigRational>(3, 2), ratio(-1, 3), ratio(2, 1)],
            vec![ratio(1, 4), ratio(-2, 5), ratio(0, 1), ratio(7, 3)],
        )
        .unwrap();
        let s = heisenberg_series(&model, 10);
        let (gx, gy) = correlator_series_pair(&model, 10).unwrap();
        assert_eq!(s.correlator_x().coefficients, gx.coefficients);
        assert_eq!(s.correlator_y().coefficients, gy.coefficients);
    }

    #[test]
    fn tables_serialize() {
        let model = ModelChainSpec::new(vec![1.0], vec![0.5, 0.0]).unwrap();
        let s = heisenberg_series(&model, 3);
        let json = serde_json::to_string(&s).unwrap();
        let back: HeisenbergSeries<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
