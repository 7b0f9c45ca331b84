//! Time evolution probes and exact infinite-temperature correlators.
//!
//! The correlators are `g_B(t) = Tr(B exp(iHt) X_1 exp(-iHt)) / 2^M` for
//! `B = X_1` or `Y_1`. Their Taylor coefficients come from exact traces of
//! `R H^k L H^l`, where `R` raises and `L` lowers site 1 (`X = R + L`,
//! `Y = i(R - L)`). Only real arithmetic is involved, so the same code runs
//! on `f64` and on exact rationals.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{build_hamiltonian, ChainGeometry, Pauli, SectorBasis, SparseOperator};
use crate::propagate::{Propagator, DENSE_LIMIT};
use crate::scalar::{binomial, factorial, sign_power, Scalar};

/// Largest spin count for exact trace computations.
pub const TRACE_CAP: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries<V> {
    pub times: Vec<f64>,
    pub values: Vec<V>,
}

impl<V> TimeSeries<V> {
    pub fn new(times: Vec<f64>, values: Vec<V>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::LengthMismatch { what: "values", expected: times.len(), found: values.len() });
        }
        check_grid(&times)?;
        Ok(Self { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Grid spacing if the grid is uniform to relative `1e-9`.
    pub fn uniform_step(&self) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        let dt = self.times[1] - self.times[0];
        let uniform = self.times.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1.0));
        uniform.then_some(dt)
    }

    pub fn map<U>(&self, f: impl Fn(&V) -> U) -> TimeSeries<U> {
        TimeSeries { times: self.times.clone(), values: self.values.iter().map(f).collect() }
    }
}

pub fn check_grid(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteParameter("time grid".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// `n` points `t0, t0 + dt, ...`.
pub fn uniform_grid(t0: f64, dt: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| t0 + dt * k as f64).collect()
}

/// Taylor coefficients `c_0..c_n` of a function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesCoefficients<T> {
    pub coefficients: Vec<T>,
    pub note: String,
}

impl<T: Scalar> SeriesCoefficients<T> {
    pub fn max_order(&self) -> usize {
        self.coefficients.len().saturating_sub(1)
    }

    pub fn get(&self, order: usize) -> T {
        self.coefficients.get(order).cloned().unwrap_or_else(T::zero)
    }

    /// Term-wise difference, padding with zeros.
    pub fn minus(&self, other: &Self) -> Self {
        let n = self.coefficients.len().max(other.coefficients.len());
        Self {
            coefficients: (0..n).map(|k| self.get(k) - other.get(k)).collect(),
            note: format!("difference ({}) - ({})", self.note, other.note),
        }
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * t + c.to_f64())
    }

    pub fn to_f64(&self) -> SeriesCoefficients<f64> {
        SeriesCoefficients { coefficients: self.coefficients.iter().map(Scalar::to_f64).collect(), note: self.note.clone() }
    }
}

fn unit(dim: usize, k: usize) -> Vec<Complex64> {
    let mut v = vec![Complex64::new(0.0, 0.0); dim];
    v[k] = Complex64::new(1.0, 0.0);
    v
}

/// Evolution inside one excitation sector, prepared once.
pub struct SectorDynamics {
    pub basis: SectorBasis,
    pub hamiltonian: SparseOperator<f64>,
    pub propagator: Propagator,
}

impl SectorDynamics {
    pub fn new<G: ChainGeometry<f64> + ?Sized>(geom: &G, excitations: usize) -> Result<Self> {
        let basis = SectorBasis::new(geom.spin_count(), excitations)?;
        let hamiltonian = build_hamiltonian(geom, excitations)?;
        let propagator = Propagator::new(&hamiltonian);
        Ok(Self { basis, hamiltonian, propagator })
    }

    pub fn basis_state(&self, mask: u64) -> Result<Vec<Complex64>> {
        let k = self
            .basis
            .rank(mask)
            .ok_or_else(|| Error::OutOfRange(format!("mask {mask:#b} is not in this sector")))?;
        Ok(unit(self.basis.dim(), k))
    }

    pub fn evolve(&self, psi: &[Complex64], t: f64) -> Result<Vec<Complex64>> {
        self.propagator.evolve(psi, t)
    }

    /// `<target| exp(-iHt) |psi>` over a grid.
    pub fn amplitudes(&self, psi: &[Complex64], target: u64, times: &[f64]) -> Result<Vec<Complex64>> {
        let idx = self.basis.rank(target).ok_or_else(|| Error::OutOfRange(format!("mask {target:#b}")))?;
        times.iter().map(|&t| Ok(self.evolve(psi, t)?[idx])).collect()
    }

    /// Probability that `bit` is excited after evolving `psi` for `t`.
    pub fn occupation(&self, psi: &[Complex64], bit: usize, t: f64) -> Result<f64> {
        let out = self.evolve(psi, t)?;
        Ok(self
            .basis
            .states()
            .iter()
            .zip(&out)
            .filter(|(s, _)| *s >> bit & 1 == 1)
            .map(|(_, a)| a.norm_sqr())
            .sum())
    }
}

/// `<e_1| exp(-iHt) |e_1>` in the one-excitation sector.
pub fn survival_amplitude<G: ChainGeometry<f64> + ?Sized>(geom: &G, times: &[f64]) -> Result<TimeSeries<Complex64>> {
    check_grid(times)?;
    let dynamics = SectorDynamics::new(geom, 1)?;
    let psi = dynamics.basis_state(1)?;
    TimeSeries::new(times.to_vec(), dynamics.amplitudes(&psi, 1, times)?)
}

/// `|<e_M| exp(-iHt) |e_1>|^2` in the one-excitation sector.
pub fn transfer_probability<G: ChainGeometry<f64> + ?Sized>(geom: &G, times: &[f64]) -> Result<TimeSeries<f64>> {
    check_grid(times)?;
    let dynamics = SectorDynamics::new(geom, 1)?;
    let psi = dynamics.basis_state(1)?;
    let last = 1u64 << (geom.spin_count() - 1);
    let amps = dynamics.amplitudes(&psi, last, times)?;
    TimeSeries::new(times.to_vec(), amps.iter().map(|a| a.norm_sqr()).collect())
}

/// The two-excitation state with both end sites excited.
pub fn end_pair_mask(spin_count: usize) -> u64 {
    1 | 1 << (spin_count - 1)
}

/// `|<psi| exp(-iHt) |psi>|^2` for `psi = |10...01>`.
pub fn return_probability<G: ChainGeometry<f64> + ?Sized>(geom: &G, times: &[f64]) -> Result<TimeSeries<f64>> {
    check_grid(times)?;
    let m = geom.spin_count();
    if m < 2 {
        return Err(Error::OutOfRange("return probability needs two end sites".into()));
    }
    let dynamics = SectorDynamics::new(geom, 2)?;
    let mask = end_pair_mask(m);
    let psi = dynamics.basis_state(mask)?;
    let amps = dynamics.amplitudes(&psi, mask, times)?;
    TimeSeries::new(times.to_vec(), amps.iter().map(|a| a.norm_sqr()).collect())
}

/// `<psi| H^n |psi>` by `n` matrix-vector products.
///
/// For a non-symmetric (gauged) operator this is the physical moment only
/// when `psi` is a basis vector.
pub fn moment<T: Scalar>(h: &SparseOperator<T>, psi: &[T], n: usize) -> Result<T> {
    Ok(moments(h, psi, n)?.pop().expect("at least order zero"))
}

/// `<psi| H^k |psi>` for `k = 0..=n`.
pub fn moments<T: Scalar>(h: &SparseOperator<T>, psi: &[T], n: usize) -> Result<Vec<T>> {
    if psi.len() != h.dim() {
        return Err(Error::DimensionMismatch { expected: h.dim(), found: psi.len() });
    }
    let inner = |w: &[T]| psi.iter().zip(w).fold(T::zero(), |acc, (a, b)| acc + a.clone() * b.clone());
    let mut w = psi.to_vec();
    let mut out = vec![inner(&w)];
    for _ in 0..n {
        w = h.apply(&w);
        out.push(inner(&w));
    }
    Ok(out)
}

/// `<10...01| H^k |10...01>` for `k = 0..=n`.
pub fn end_pair_moments<T: Scalar, G: ChainGeometry<T> + ?Sized>(geom: &G, n: usize) -> Result<Vec<T>> {
    let m = geom.spin_count();
    let basis = SectorBasis::new(m, 2)?;
    let h = build_hamiltonian(geom, 2)?;
    let mut psi = vec![T::zero(); basis.dim()];
    psi[basis.rank(end_pair_mask(m)).expect("end pair is a two-excitation state")] = T::one();
    moments(&h, &psi, n)
}

fn check_trace_cap(m: usize) -> Result<()> {
    if m > TRACE_CAP {
        return Err(Error::CapExceeded { what: "spin count for exact traces", value: m, cap: TRACE_CAP });
    }
    Ok(())
}

/// Sector data for the site-1 ladder: `lower[s][idx]` is the index in sector
/// `s - 1` of the state obtained by de-exciting site 1, if it was excited.
struct Ladder<T> {
    bases: Vec<SectorBasis>,
    hamiltonians: Vec<SparseOperator<T>>,
    lower: Vec<Vec<Option<usize>>>,
}

impl<T: Scalar> Ladder<T> {
    fn new<G: ChainGeometry<T> + ?Sized>(geom: &G) -> Result<Self> {
        let m = geom.spin_count();
        let bases: Vec<SectorBasis> = (0..=m).map(|k| SectorBasis::new(m, k)).collect::<Result<_>>()?;
        let hamiltonians = (0..=m).map(|k| build_hamiltonian(geom, k)).collect::<Result<_>>()?;
        let lower = bases
            .iter()
            .enumerate()
            .map(|(s, b)| {
                b.states()
                    .iter()
                    .map(|&x| if s > 0 && x & 1 == 1 { bases[s - 1].rank(x ^ 1) } else { None })
                    .collect()
            })
            .collect();
        Ok(Self { bases, hamiltonians, lower })
    }
}

/// `T(k, l) = Tr(R H^k L H^l)` for `k + l <= n`, stored as `table[k][l]`.
fn ladder_traces<T: Scalar, G: ChainGeometry<T> + ?Sized>(geom: &G, n: usize) -> Result<Vec<Vec<T>>> {
    let m = geom.spin_count();
    check_trace_cap(m)?;
    let ladder = Ladder::new(geom)?;
    let zero_table = || vec![vec![T::zero(); n + 1]; n + 1];
    // every basis state with site 1 excited
    let seeds: Vec<(usize, usize)> = (1..=m)
        .flat_map(|s| {
            let lower = &ladder.lower[s];
            (0..ladder.bases[s].dim()).filter(move |&i| lower[i].is_some()).map(move |i| (s, i))
        })
        .collect();
    let table = seeds
        .par_iter()
        .fold(zero_table, |mut acc, &(s, i)| {
            let h_up = &ladder.hamiltonians[s];
            let h_down = &ladder.hamiltonians[s - 1];
            let lower = &ladder.lower[s];
            let dim_down = ladder.bases[s - 1].dim();
            // v_l = H^l e, projected through L
            let mut v = vec![T::zero(); ladder.bases[s].dim()];
            v[i] = T::one();
            let mut lowered = Vec::with_capacity(n + 1);
            for l in 0..=n {
                if l > 0 {
                    v = h_up.apply(&v);
                }
                let mut lv = vec![T::zero(); dim_down];
                for (idx, val) in v.iter().enumerate() {
                    if let Some(j) = lower[idx] {
                        lv[j] = val.clone();
                    }
                }
                lowered.push(lv);
            }
            // w_k = (H^T)^k (e with site 1 cleared)
            let mut w = vec![T::zero(); dim_down];
            w[lower[i].expect("seed has site 1 excited")] = T::one();
            for k in 0..=n {
                if k > 0 {
                    w = h_down.apply_transpose(&w);
                }
                for l in 0..=n - k {
                    let d = w.iter().zip(&lowered[l]).fold(T::zero(), |a, (x, y)| {
                        if x.is_zero() || y.is_zero() {
                            a
                        } else {
                            a + x.clone() * y.clone()
                        }
                    });
                    acc[k][l] += d;
                }
            }
            acc
        })
        .reduce(zero_table, |mut a, b| {
            for (ra, rb) in a.iter_mut().zip(b) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += y;
                }
            }
            a
        });
    Ok(table)
}

/// Exact Taylor coefficients of `g_X` and `g_Y` through `max_order`.
///
/// `g_X` has only even orders and `g_Y` only odd orders; the other parity is
/// exactly zero.
pub fn correlator_series_pair<T: Scalar, G: ChainGeometry<T> + ?Sized>(
    geom: &G,
    max_order: usize,
) -> Result<(SeriesCoefficients<T>, SeriesCoefficients<T>)> {
    let m = geom.spin_count();
    let traces = ladder_traces(geom, max_order)?;
    let norm = T::from_usize(1usize << m);
    let mut gx = Vec::with_capacity(max_order + 1);
    let mut gy = Vec::with_capacity(max_order + 1);
    for n in 0..=max_order {
        let mut sym = T::zero();
        let mut anti = T::zero();
        for k in 0..=n {
            let w = binomial::<T>(n, k) * sign_power::<T>(n - k);
            sym += w.clone() * (traces[k][n - k].clone() + traces[n - k][k].clone());
            anti += w * (traces[k][n - k].clone() - traces[n - k][k].clone());
        }
        let scale = factorial::<T>(n) * norm.clone();
        if n % 2 == 0 {
            gx.push(sign_power::<T>(n / 2) * sym / scale);
            gy.push(T::zero());
        } else {
            gx.push(T::zero());
            gy.push(sign_power::<T>((n + 1) / 2) * anti / scale);
        }
    }
    Ok((
        SeriesCoefficients { coefficients: gx, note: "g_X = Tr(X1 X1(t))/2^M, normalized to 1 at t = 0".into() },
        SeriesCoefficients { coefficients: gy, note: "g_Y = Tr(Y1 X1(t))/2^M".into() },
    ))
}

/// Exact Taylor coefficients of `g_B` for `B = X_1` or `Y_1`.
pub fn correlator_series<T: Scalar, G: ChainGeometry<T> + ?Sized>(
    geom: &G,
    observable: Pauli,
    max_order: usize,
) -> Result<SeriesCoefficients<T>> {
    let (gx, gy) = correlator_series_pair(geom, max_order)?;
    match observable {
        Pauli::X => Ok(gx),
        Pauli::Y => Ok(gy),
        Pauli::Z => Err(Error::InvalidArgument("correlators are defined for B = X or Y".into())),
    }
}

/// `g_X` and `g_Y` sampled on a grid.
///
/// With eigenbases `U_s` of every sector and `R~ = U_{s+1}^T R U_s`,
/// `g_X(t) = 2^(1-M) sum R~_ab^2 cos((E_a - E_b) t)` and the same with `sin`
/// for `g_Y`.
pub fn mixed_correlators<G: ChainGeometry<f64> + ?Sized>(
    geom: &G,
    times: &[f64],
) -> Result<(TimeSeries<f64>, TimeSeries<f64>)> {
    check_grid(times)?;
    let m = geom.spin_count();
    check_trace_cap(m)?;
    let max_dim = crate::hilbert::binomial(m, m / 2);
    let (gx, gy) = if max_dim <= DENSE_LIMIT {
        spectral_correlators(geom, times)?
    } else {
        krylov_correlators(geom, times)?
    };
    Ok((TimeSeries::new(times.to_vec(), gx)?, TimeSeries::new(times.to_vec(), gy)?))
}

/// `g_B` for a single observable.
pub fn mixed_correlator<G: ChainGeometry<f64> + ?Sized>(geom: &G, observable: Pauli, times: &[f64]) -> Result<TimeSeries<f64>> {
    let (gx, gy) = mixed_correlators(geom, times)?;
    match observable {
        Pauli::X => Ok(gx),
        Pauli::Y => Ok(gy),
        Pauli::Z => Err(Error::InvalidArgument("correlators are defined for B = X or Y".into())),
    }
}

fn spectral_correlators<G: ChainGeometry<f64> + ?Sized>(geom: &G, times: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = geom.spin_count();
    let sectors: Vec<SectorDynamics> = (0..=m).map(|k| SectorDynamics::new(geom, k)).collect::<Result<_>>()?;
    let norm = 2.0 / (1u64 << m) as f64;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|s| {
            let (lo, hi) = (&sectors[s], &sectors[s + 1]);
            let (e_lo, u_lo) = lo.propagator.spectrum().expect("dense sector");
            let (e_hi, u_hi) = hi.propagator.spectrum().expect("dense sector");
            // rows of R U_lo: row a' of the upper sector copies row a'^1 of U_lo
            let mut raised = DMatrix::zeros(hi.basis.dim(), lo.basis.dim());
            for (r, &state) in hi.basis.states().iter().enumerate() {
                if state & 1 == 1 {
                    let src = lo.basis.rank(state ^ 1).expect("lowered state");
                    raised.row_mut(r).copy_from(&u_lo.row(src));
                }
            }
            let rt = u_hi.transpose() * raised;
            let mut gx = vec![0.0; times.len()];
            let mut gy = vec![0.0; times.len()];
            for a in 0..rt.nrows() {
                for b in 0..rt.ncols() {
                    let w = rt[(a, b)] * rt[(a, b)];
                    if w < 1e-300 {
                        continue;
                    }
                    let gap = e_hi[a] - e_lo[b];
                    for (k, &t) in times.iter().enumerate() {
                        let (sn, cs) = (gap * t).sin_cos();
                        gx[k] += w * cs;
                        gy[k] += w * sn;
                    }
                }
            }
            (gx, gy)
        })
        .collect();
    let mut gx = vec![0.0; times.len()];
    let mut gy = vec![0.0; times.len()];
    for (px, py) in partials {
        for k in 0..times.len() {
            gx[k] += norm * px[k];
            gy[k] += norm * py[k];
        }
    }
    Ok((gx, gy))
}

/// Same traces by propagating every basis state; used when sectors are too
/// large for dense diagonalization.
fn krylov_correlators<G: ChainGeometry<f64> + ?Sized>(geom: &G, times: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let ladder = Ladder::<f64>::new(geom)?;
    let m = geom.spin_count();
    let props: Vec<Propagator> = ladder.hamiltonians.iter().map(|h| Propagator::krylov(h.clone(), 1e-12)).collect();
    let norm = 2.0 / (1u64 << m) as f64;
    let mut gx = vec![0.0; times.len()];
    let mut gy = vec![0.0; times.len()];
    for (k, &t) in times.iter().enumerate() {
        // Tr(L e^{iHt} R e^{-iHt}) = sum_e <e^{-iHt} R e | R e^{-iHt} e> over e with site 1 empty
        let total: Complex64 = (1..=m)
            .into_par_iter()
            .map(|s| -> Result<Complex64> {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, low) in ladder.lower[s].iter().enumerate() {
                    let Some(j) = *low else { continue };
                    let up = props[s].evolve(&unit(ladder.bases[s].dim(), i), t)?;
                    let down = props[s - 1].evolve(&unit(ladder.bases[s - 1].dim(), j), t)?;
                    for (idx, l) in ladder.lower[s].iter().enumerate() {
                        if let Some(jj) = l {
                            acc += up[idx].conj() * down[*jj];
                        }
                    }
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        // total = sum R~^2 e^{i gap t}
        gx[k] = norm * total.re;
        gy[k] = norm * total.im;
    }
    Ok((gx, gy))
}
