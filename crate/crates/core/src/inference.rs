//! Structure inference from end-site data.
//!
//! Two probes are combined. The two-excitation probe compares the return
//! probability of `|10...01>` with the model-chain prediction; its leading
//! difference sits at order `t^(2N-2)` and is tabulated over block-size
//! patterns. The mixed-state probe compares the infinite-temperature
//! correlators `g_X`, `g_Y` with the current reference; the first
//! nonvanishing order locates the next oversized block and its two leading
//! coefficients fix `(N_i, K_i)`.
//!
//! Relations used by the block solver, for block `i` (1-based) with the
//! blocks before it already in the reference:
//!
//! ```text
//! c_odd  = (-1)^i  prod_{j<i} (J_j^2 / N_j) (N_i - 1) K_i / (2i-1)!
//! c_even = (-1)^i  prod_{j<i} J_j^2 ((N_i - 1)/N_i)
//!          [3 J_{i-1}^2 - J_i^2 + N_i K_i (N_i K_i - 2 sum_{j<=i} B'_j)] / (2i)!
//! ```
//!
//! The even relation holds when no earlier block is oversized. Otherwise the
//! even coefficient of each hypothesis is obtained by splicing it into the
//! reference and computing the exact series.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBoxChain, Mode};
use crate::dynamics::{self, correlator_series_pair, end_pair_moments, uniform_grid};
use crate::error::{Error, Result};
use crate::hilbert::{Pauli, RationalGauge};
use crate::scalar::{binomial, factorial, powi, ratio, Scalar};
use crate::tomography::{run_tomography, TomographyOptions, TomographyReport};
use crate::topology::{BlockSpec, ModelChainSpec, PseudoChainSpec};

/// Default enumeration bound on block sizes.
pub const DEFAULT_SIZE_BOUND: usize = 4;

/// `2 prod J^2 sum_i C(N-1, i-1)^2 (N_i - 1)/N_i`: the leading
/// `<psi|H^(2N-2)|psi> - <psi|H0^(2N-2)|psi>` for `psi = |10...01>`.
pub fn two_excitation_value<T: Scalar>(couplings: &[T], sizes: &[usize]) -> T {
    let n = sizes.len();
    let prod = couplings.iter().fold(T::one(), |acc, j| acc * j.clone() * j.clone());
    let sum = sizes.iter().enumerate().fold(T::zero(), |acc, (k, &size)| {
        let c = binomial::<T>(n - 1, k);
        acc + c.clone() * c * T::from_usize(size - 1) / T::from_usize(size)
    });
    T::from_usize(2) * prod * sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTable<T> {
    /// Block-size pattern to predicted moment difference.
    pub entries: BTreeMap<Vec<usize>, T>,
}

/// Every pattern `(1, N_2, ..., N_{N-1}, 1)` with interior sizes up to
/// `size_bound`, for the couplings of `model`.
pub fn build_candidate_table<T: Scalar>(model: &ModelChainSpec<T>, size_bound: usize) -> Result<CandidateTable<T>> {
    if size_bound < 2 {
        return Err(Error::InvalidArgument("size bound must be at least 2".into()));
    }
    let n = model.site_count();
    let interior = n.saturating_sub(2);
    let count = (size_bound as u64).checked_pow(interior as u32).unwrap_or(u64::MAX);
    if count > 1 << 20 {
        return Err(Error::CapExceeded { what: "candidate patterns", value: count as usize, cap: 1 << 20 });
    }
    let mut entries = BTreeMap::new();
    let mut digits = vec![1usize; interior];
    loop {
        let mut pattern = vec![1];
        pattern.extend_from_slice(&digits);
        if n > 1 {
            pattern.push(1);
        }
        let value = two_excitation_value(&model.couplings, &pattern);
        entries.insert(pattern, value);
        // odometer over interior sizes
        let mut k = 0;
        while k < interior && digits[k] == size_bound {
            digits[k] = 1;
            k += 1;
        }
        if k == interior {
            break;
        }
        digits[k] += 1;
    }
    Ok(CandidateTable { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub pattern: Vec<usize>,
    pub value: f64,
    /// `|measured| - value`, non-negative up to the tie tolerance.
    pub shortfall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub ranked: Vec<Candidate>,
    pub rationale: String,
}

impl Selection {
    /// Patterns sharing the top value (a pattern and its mirror always do).
    pub fn top_group(&self) -> Vec<Vec<usize>> {
        let Some(best) = self.ranked.first() else { return vec![] };
        let tol = 1e-9 * best.value.abs().max(1.0);
        self.ranked.iter().take_while(|c| (c.value - best.value).abs() <= tol).map(|c| c.pattern.clone()).collect()
    }
}

/// Patterns whose value does not exceed `|measured|`, closest first.
pub fn select_candidates<T: Scalar>(table: &CandidateTable<T>, measured: f64) -> Result<Selection> {
    let target = measured.abs();
    let tol = 1e-9 * target.max(1.0);
    let mut ranked: Vec<Candidate> = table
        .entries
        .iter()
        .map(|(p, v)| (p, v.to_f64()))
        .filter(|&(_, v)| v <= target + tol)
        .map(|(p, v)| Candidate { pattern: p.clone(), value: v, shortfall: (target - v).max(0.0) })
        .collect();
    if ranked.is_empty() {
        return Err(Error::EmptySelection(measured));
    }
    ranked.sort_by(|a, b| a.shortfall.total_cmp(&b.shortfall).then_with(|| a.pattern.cmp(&b.pattern)));
    Ok(Selection {
        ranked,
        rationale: "the leading Taylor term is approached from below: higher orders of the oscillating \
                    return probability enter with the opposite sign, so the measured value overestimates \
                    the table value; candidates above it are excluded"
            .into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoExcitationProbe {
    /// Block count `N` of the reference model.
    pub block_count: usize,
    /// Coefficient of `t^(2N-2)` in `P(t) - P_0(t)`.
    pub probability_coefficient: f64,
    pub uncertainty: f64,
    /// The implied moment difference, `|coefficient| (2N-2)! / 2`.
    pub moment_difference: f64,
    pub moment_uncertainty: f64,
}

/// Taylor series of `|<psi| exp(-iHt) |psi>|^2` from moments `m_0..m_n`.
fn probability_series(moments: &[f64]) -> Vec<f64> {
    let n = moments.len();
    // a_k = (-i)^k m_k / k!, split in real and imaginary parts
    let a: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v = moments[k] / factorial::<f64>(k);
            match k % 4 {
                0 => (v, 0.0),
                1 => (0.0, -v),
                2 => (-v, 0.0),
                _ => (0.0, v),
            }
        })
        .collect();
    (0..n)
        .map(|order| (0..=order).map(|k| a[k].0 * a[order - k].0 + a[k].1 * a[order - k].1).sum())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Window `(0, window / max|J|]`.
    pub window: f64,
    pub points: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { window: 0.3, points: 200, bootstrap: 200, seed: 0 }
    }
}

fn max_coupling(model: &ModelChainSpec<f64>) -> f64 {
    model.couplings.iter().fold(0.0f64, |m, j| m.max(j.abs())).max(1e-3)
}

/// Least squares in the monomials `t^p`, with bootstrap standard errors.
fn fit_monomials(times: &[f64], values: &[f64], powers: &[usize], opts: &FitOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    let scale = times.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let design = DMatrix::from_fn(times.len(), powers.len(), |r, c| (times[r] / scale).powi(powers[c] as i32));
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-12 * smax {
        return Err(Error::FitIllConditioned(format!("condition number {:e}", smax / smin)));
    }
    let solve = |rhs: &DVector<f64>| -> Result<DVector<f64>> {
        svd.solve(rhs, 0.0).map_err(|e| Error::FitIllConditioned(e.to_string()))
    };
    let y = DVector::from_column_slice(values);
    let coef = solve(&y)?;
    let fitted = &design * &coef;
    let residual = &y - &fitted;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sum = DVector::zeros(powers.len());
    let mut sum_sq = DVector::zeros(powers.len());
    for _ in 0..opts.bootstrap {
        let resampled = DVector::from_fn(y.len(), |r, _| {
            let pick = rng.random_range(0..y.len());
            fitted[r] + residual[pick]
        });
        let c = solve(&resampled)?;
        sum += &c;
        sum_sq += c.component_mul(&c);
    }
    let b = opts.bootstrap.max(1) as f64;
    let unscale = |k: usize, v: f64| v / scale.powi(powers[k] as i32);
    let values = (0..powers.len()).map(|k| unscale(k, coef[k])).collect();
    let errors = (0..powers.len())
        .map(|k| {
            let mean = sum[k] / b;
            unscale(k, (sum_sq[k] / b - mean * mean).max(0.0).sqrt())
        })
        .collect();
    Ok((values, errors))
}

/// Two-excitation return data, measured once and compared against any model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReturnData {
    /// Exact moments `<psi|H^k|psi>`, `k = 0..=order`.
    Moments(Vec<f64>),
    Sampled { times: Vec<f64>, values: Vec<f64> },
}

/// Queries the return data needed to test a chain of `block_count` blocks.
/// The sampled window is `(0, window / max|J|]`.
pub fn measure_return(bb: &mut BlackBoxChain, model: &ModelChainSpec<f64>, opts: &FitOptions) -> Result<ReturnData> {
    let n = model.site_count();
    if n < 2 {
        return Err(Error::OutOfRange("two-excitation probe needs at least two blocks".into()));
    }
    match bb.mode() {
        Mode::Exact => Ok(ReturnData::Moments(bb.query_return_moments(2 * n - 2)?)),
        Mode::Sampled { .. } => {
            let dt = opts.window / max_coupling(model) / opts.points as f64;
            let times = uniform_grid(dt, dt, opts.points);
            let values = bb.query_two_excitation_return(&times)?.values;
            Ok(ReturnData::Sampled { times, values })
        }
    }
}

/// Leading coefficient of the return-probability difference against `model`.
///
/// Exact data uses exact moments of both systems. Sampled data is fitted by
/// an even polynomial `sum_{k=N-1}^{N+1} a_k t^(2k)` on the measured-minus-
/// model difference.
pub fn compare_return(data: &ReturnData, model: &ModelChainSpec<f64>, opts: &FitOptions) -> Result<TwoExcitationProbe> {
    let n = model.site_count();
    let order = 2 * n - 2;
    let (coefficient, uncertainty) = match data {
        ReturnData::Moments(m) => {
            if m.len() <= order {
                return Err(Error::OutOfRange(format!("need moments through order {order}")));
            }
            let measured = probability_series(&m[..=order]);
            let reference = probability_series(&end_pair_moments(model, order)?);
            let c = measured[order] - reference[order];
            (c, 1e-12 * (measured[order].abs() + reference[order].abs()))
        }
        ReturnData::Sampled { times, values } => {
            let reference = dynamics::return_probability(model, times)?;
            let diff: Vec<f64> = values.iter().zip(&reference.values).map(|(a, b)| a - b).collect();
            let powers: Vec<usize> = (n - 1..=n + 1).map(|k| 2 * k).collect();
            let (c, e) = fit_monomials(times, &diff, &powers, opts)?;
            (c[0], e[0])
        }
    };
    let scale = factorial::<f64>(order) / 2.0;
    Ok(TwoExcitationProbe {
        block_count: n,
        probability_coefficient: coefficient,
        uncertainty,
        moment_difference: coefficient.abs() * scale,
        moment_uncertainty: uncertainty * scale,
    })
}

/// [`measure_return`] followed by [`compare_return`].
pub fn two_excitation_difference(
    bb: &mut BlackBoxChain,
    model: &ModelChainSpec<f64>,
    opts: &FitOptions,
) -> Result<TwoExcitationProbe> {
    let data = measure_return(bb, model, opts)?;
    compare_return(&data, model, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedProbe {
    /// 1-based index of the block that first differs from the reference.
    pub block_index: usize,
    /// Coefficient of `t^(2i-1)` in `g_Y - g_Y^ref`.
    pub c_odd: f64,
    pub c_odd_uncertainty: f64,
    /// Coefficient of `t^(2i)` in `g_X - g_X^ref`.
    pub c_even: f64,
    pub c_even_uncertainty: f64,
}

/// Relative size below which an exact coefficient difference is treated as
/// rounding or tomography error. Measured against the coefficient itself and
/// against `s^n / n!` for the largest energy `s` of the reference.
const EXACT_RELATIVE_FLOOR: f64 = 1e-8;

fn energy_scale(reference: &PseudoChainSpec<f64>) -> f64 {
    let couplings = reference.inter_couplings.iter().map(|j| j.abs());
    let blocks = reference.blocks.iter().flat_map(|b| [b.effective_field().abs(), b.intra_coupling.abs() * b.size as f64]);
    couplings.chain(blocks).fold(1e-3, f64::max)
}

fn exact_series(spec: &PseudoChainSpec<f64>, order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (gx, gy) = correlator_series_pair(&RationalGauge(spec), order)?;
    Ok((gx.coefficients, gy.coefficients))
}

/// Mixed-state correlator data, measured once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CorrelatorData {
    /// Exact Taylor coefficients of `g_X` and `g_Y`.
    Series { x: Vec<f64>, y: Vec<f64> },
    Sampled { times: Vec<f64>, x: Vec<f64>, y: Vec<f64> },
}

/// Queries `g_X` and `g_Y` for a chain of `block_count` blocks.
pub fn measure_correlators(bb: &mut BlackBoxChain, model: &ModelChainSpec<f64>, opts: &FitOptions) -> Result<CorrelatorData> {
    let n = model.site_count();
    match bb.mode() {
        Mode::Exact => {
            let (x, y) = bb.query_correlator_series(2 * n.saturating_sub(1))?;
            Ok(CorrelatorData::Series { x: x.coefficients, y: y.coefficients })
        }
        Mode::Sampled { .. } => {
            let dt = opts.window / max_coupling(model) / opts.points as f64;
            let times = uniform_grid(dt, dt, opts.points);
            let y = bb.query_mixed_correlator(Pauli::Y, &times)?.values;
            let x = bb.query_mixed_correlator(Pauli::X, &times)?.values;
            Ok(CorrelatorData::Sampled { times, x, y })
        }
    }
}

/// Finds the first order at which the measured correlators leave the
/// reference, and the two coefficients at that block index `i`.
pub fn compare_correlators(data: &CorrelatorData, reference: &PseudoChainSpec<f64>, opts: &FitOptions) -> Result<MixedProbe> {
    let n = reference.block_count();
    if n < 3 {
        return Err(Error::NoSignal);
    }
    let max_order = 2 * (n - 1);
    match data {
        CorrelatorData::Series { x: mx, y: my } => {
            if mx.len() <= max_order || my.len() <= max_order {
                return Err(Error::OutOfRange(format!("need coefficients through order {max_order}")));
            }
            let (rx, ry) = exact_series(reference, max_order)?;
            let scale = energy_scale(reference);
            let diff = |m: &[f64], r: &[f64], k: usize| {
                let d = m[k] - r[k];
                let natural = scale.powi(k as i32) / factorial::<f64>(k);
                let floor = EXACT_RELATIVE_FLOOR * m[k].abs().max(r[k].abs()).max(natural);
                (d, floor)
            };
            for order in 1..=max_order {
                let (d, floor) = if order % 2 == 1 { diff(my, &ry, order) } else { diff(mx, &rx, order) };
                if d.abs() > floor {
                    let i = order.div_ceil(2);
                    if i < 2 || i > n - 1 {
                        return Err(Error::NoConsistentSolution(format!("difference at order {order} cannot come from a block")));
                    }
                    let (c_odd, u_odd) = diff(my, &ry, 2 * i - 1);
                    let c_odd = if c_odd.abs() > u_odd { c_odd } else { 0.0 };
                    let (c_even, u_even) = diff(mx, &rx, 2 * i);
                    return Ok(MixedProbe { block_index: i, c_odd, c_odd_uncertainty: u_odd, c_even, c_even_uncertainty: u_even });
                }
            }
            Err(Error::NoSignal)
        }
        CorrelatorData::Sampled { times, x, y } => {
            let (rx, ry) = dynamics::mixed_correlators(reference, times)?;
            let dy: Vec<f64> = y.iter().zip(&ry.values).map(|(a, b)| a - b).collect();
            let dx: Vec<f64> = x.iter().zip(&rx.values).map(|(a, b)| a - b).collect();
            for i in 2..n {
                let (a, ea) = fit_monomials(times, &dy, &[2 * i - 1, 2 * i + 1], opts)?;
                let (c, ec) = fit_monomials(times, &dx, &[2 * i, 2 * i + 2], opts)?;
                let significant = |v: f64, e: f64| v.abs() > DETECTION_SIGMAS * e;
                if significant(a[0], ea[0]) || significant(c[0], ec[0]) {
                    return Ok(MixedProbe {
                        block_index: i,
                        c_odd: if significant(a[0], ea[0]) { a[0] } else { 0.0 },
                        c_odd_uncertainty: ea[0],
                        c_even: c[0],
                        c_even_uncertainty: ec[0],
                    });
                }
            }
            Err(Error::NoSignal)
        }
    }
}

/// Significance required before a sampled coefficient counts as nonzero.
pub const DETECTION_SIGMAS: f64 = 5.0;

/// [`measure_correlators`] followed by [`compare_correlators`].
pub fn mixed_probe(bb: &mut BlackBoxChain, reference: &PseudoChainSpec<f64>, opts: &FitOptions) -> Result<MixedProbe> {
    let data = measure_correlators(bb, &reference.effective_model()?, opts)?;
    compare_correlators(&data, reference, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureHypothesis {
    pub block_index: usize,
    pub size: usize,
    pub intra_coupling: f64,
    /// `B_i = B'_i - (N_i - 1) K_i`.
    pub field: f64,
    pub odd_residual: f64,
    pub even_residual: f64,
    /// Combined residual in units of the tolerances; below 1 means accepted.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub size_bound: usize,
    /// Relative tolerance on predicted coefficients.
    pub relative_tolerance: f64,
    /// Uncertainty multiple added to the tolerance.
    pub sigmas: f64,
    /// Score the even coefficient by exact simulation even when the closed
    /// form applies.
    pub force_simulation: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { size_bound: DEFAULT_SIZE_BOUND, relative_tolerance: 1e-6, sigmas: 5.0, force_simulation: false }
    }
}

/// `(-1)^i prod_{j<i} (J_j^2 / N_j) / (2i-1)!`, the odd-order factor
/// multiplying `(N_i - 1) K_i`.
pub fn odd_prefactor(reference: &PseudoChainSpec<f64>, i: usize) -> f64 {
    let prod: f64 = (1..i).map(|j| reference.inter_couplings[j - 1].powi(2) / reference.blocks[j - 1].size as f64).product();
    sign(i) * prod / factorial::<f64>(2 * i - 1)
}

/// Even-order coefficient of the first oversized block `i` in closed form.
pub fn even_closed_form<T: Scalar>(model: &ModelChainSpec<T>, i: usize, size: usize, k: &T) -> T {
    let prod = (1..i).fold(T::one(), |acc, j| acc * model.couplings[j - 1].clone() * model.couplings[j - 1].clone());
    let left = model.coupling(i as isize - 2);
    let right = model.coupling(i as isize - 1);
    let field_sum = model.effective_fields[..i].iter().fold(T::zero(), |a, b| a + b.clone());
    let n = T::from_usize(size);
    let nk = n.clone() * k.clone();
    let bracket = ratio::<T>(3, 1) * left.clone() * left - right.clone() * right
        + nk.clone() * (nk - T::from_usize(2) * field_sum);
    let sgn = if i % 2 == 0 { T::one() } else { -T::one() };
    sgn * prod * (n.clone() - T::one()) / n * bracket / factorial::<T>(2 * i)
}

fn sign(i: usize) -> f64 {
    if i % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Candidate `(N_i, K_i)` consistent with the probe coefficients, best first.
pub fn solve_block(probe: &MixedProbe, reference: &PseudoChainSpec<f64>, opts: &SolveOptions) -> Result<Vec<StructureHypothesis>> {
    let i = probe.block_index;
    if opts.size_bound < 2 {
        return Err(Error::InvalidArgument("size bound must be at least 2".into()));
    }
    if i < 2 || i + 1 > reference.block_count() {
        return Err(Error::OutOfRange(format!("block index {i}")));
    }
    let tol_odd = opts.relative_tolerance * probe.c_odd.abs() + opts.sigmas * probe.c_odd_uncertainty;
    let tol_even = opts.relative_tolerance * probe.c_even.abs() + opts.sigmas * probe.c_even_uncertainty;
    if probe.c_odd == 0.0 && probe.c_even.abs() <= tol_even.max(f64::MIN_POSITIVE) {
        return Ok(vec![]);
    }
    let model = reference.effective_model()?;
    let effective = model.effective_fields[i - 1];
    let earlier_blocks = reference.blocks[..i - 1].iter().any(|b| b.size > 1);
    let closed_form = !earlier_blocks && !opts.force_simulation;
    let base = odd_prefactor(reference, i);

    let mut trials = Vec::new();
    for size in 2..=opts.size_bound {
        let magnitude = (probe.c_odd / (base * (size - 1) as f64)).abs();
        if magnitude == 0.0 {
            trials.push((size, 0.0));
        } else {
            trials.push((size, magnitude));
            trials.push((size, -magnitude));
        }
    }
    let scored: Vec<Result<StructureHypothesis>> = trials
        .par_iter()
        .map(|&(size, k)| {
            let field = effective - (size - 1) as f64 * k;
            let (pred_odd, pred_even) = if closed_form {
                (base * (size - 1) as f64 * k, even_closed_form(&model, i, size, &k))
            } else {
                let spliced = reference.with_block(i - 1, BlockSpec::new(size, field, k))?;
                let (hx, hy) = exact_series(&spliced, 2 * i)?;
                let (rx, ry) = exact_series(reference, 2 * i)?;
                (hy[2 * i - 1] - ry[2 * i - 1], hx[2 * i] - rx[2 * i])
            };
            let odd_residual = (pred_odd - probe.c_odd).abs();
            let even_residual = (pred_even - probe.c_even).abs();
            let norm = |r: f64, tol: f64| if tol > 0.0 { r / tol } else if r == 0.0 { 0.0 } else { f64::INFINITY };
            Ok(StructureHypothesis {
                block_index: i,
                size,
                intra_coupling: k,
                field,
                odd_residual,
                even_residual,
                score: norm(odd_residual, tol_odd.max(1e-300)).max(norm(even_residual, tol_even.max(1e-300))),
            })
        })
        .collect();
    let mut accepted: Vec<StructureHypothesis> =
        scored.into_iter().collect::<Result<Vec<_>>>()?.into_iter().filter(|h| h.score <= 1.0).collect();
    if accepted.is_empty() {
        return Err(Error::NoConsistentSolution(format!(
            "block {i}: no size up to {} matches c_odd = {:e}, c_even = {:e}",
            opts.size_bound, probe.c_odd, probe.c_even
        )));
    }
    // best score first; among near-ties positive couplings first
    accepted.sort_by(|a, b| {
        let tie = (a.score - b.score).abs() <= 1e-9;
        if tie {
            (a.intra_coupling < 0.0).cmp(&(b.intra_coupling < 0.0)).then(a.size.cmp(&b.size))
        } else {
            a.score.total_cmp(&b.score)
        }
    });
    Ok(accepted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceStatus {
    Resolved,
    AmbiguousStructure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub probe: MixedProbe,
    pub hypotheses: Vec<StructureHypothesis>,
    pub chosen: Option<StructureHypothesis>,
    pub estimate: PseudoChainSpec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub measured_difference: f64,
    pub uncertainty: f64,
    pub predicted_difference: f64,
    pub top_candidates: Vec<Vec<usize>>,
    pub confirmed: bool,
}

/// A complete structure reached by the search, with its verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub sizes: Vec<usize>,
    pub estimate: PseudoChainSpec<f64>,
    pub confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub status: InferenceStatus,
    pub tomography: TomographyReport,
    pub initial_model: ModelChainSpec<f64>,
    /// Probe, hypotheses and choice for each resolved block of the estimate.
    pub iterations: Vec<IterationRecord>,
    pub estimate: PseudoChainSpec<f64>,
    pub verification: Option<Verification>,
    /// Every complete structure explored, in search order.
    pub alternatives: Vec<Alternative>,
    /// Closed-form relations checked against exact simulation.
    pub discrepancies: Vec<String>,
    pub notes: Vec<String>,
}

impl InferenceReport {
    pub fn blocks_found(&self) -> usize {
        self.estimate.blocks.iter().filter(|b| b.size > 1).count()
    }

    pub fn into_result(self) -> Result<Self> {
        match self.status {
            InferenceStatus::Resolved => Ok(self),
            InferenceStatus::AmbiguousStructure => Err(Error::AmbiguousStructure(self.notes.join("; "))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub solve: SolveOptions,
    pub fit: FitOptions,
    pub tomography: TomographyOptions,
    /// Hypotheses followed per block.
    pub branching: usize,
    /// Complete structures explored before the search stops.
    pub max_leaves: usize,
}

impl InferenceOptions {
    pub fn for_mode(mode: Mode, size_bound: usize) -> Self {
        let mut solve = SolveOptions { size_bound, ..SolveOptions::default() };
        let mut fit = FitOptions::default();
        if let Mode::Sampled { .. } = mode {
            solve.relative_tolerance = 1e-2;
            fit.points = 4000;
        }
        Self { solve, fit, tomography: TomographyOptions::for_mode(mode), branching: 4, max_leaves: 32 }
    }
}

struct Search<'a> {
    correlators: &'a CorrelatorData,
    returns: &'a ReturnData,
    model: &'a ModelChainSpec<f64>,
    opts: &'a InferenceOptions,
    leaves: Vec<(Vec<IterationRecord>, PseudoChainSpec<f64>, Verification)>,
    dead_ends: Vec<(Vec<IterationRecord>, PseudoChainSpec<f64>, String)>,
}

impl Search<'_> {
    fn run(&mut self, estimate: PseudoChainSpec<f64>, path: Vec<IterationRecord>, last_index: usize) -> Result<()> {
        if self.leaves.len() >= self.opts.max_leaves {
            return Ok(());
        }
        let probe = match compare_correlators(self.correlators, &estimate, &self.opts.fit) {
            Ok(p) => p,
            Err(Error::NoSignal) => {
                let v = verify(self.returns, self.model, &estimate, self.opts)?;
                self.leaves.push((path, estimate, v));
                return Ok(());
            }
            Err(Error::NoConsistentSolution(msg)) => {
                self.dead_ends.push((path, estimate, msg));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        if probe.block_index <= last_index {
            let msg = format!("block {} still differs after it was resolved", probe.block_index);
            self.dead_ends.push((path, estimate, msg));
            return Ok(());
        }
        let hypotheses = match solve_block(&probe, &estimate, &self.opts.solve) {
            Ok(h) if !h.is_empty() => h,
            Ok(_) => {
                self.dead_ends.push((path, estimate, format!("block {}: no hypothesis", probe.block_index)));
                return Ok(());
            }
            Err(Error::NoConsistentSolution(msg)) => {
                let mut path = path;
                path.push(IterationRecord { probe, hypotheses: vec![], chosen: None, estimate: estimate.clone() });
                self.dead_ends.push((path, estimate, format!("{msg}; the size bound may be too small")));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        for h in hypotheses.iter().take(self.opts.branching) {
            let next = estimate.with_block(h.block_index - 1, BlockSpec::new(h.size, h.field, h.intra_coupling))?;
            let mut p = path.clone();
            p.push(IterationRecord {
                probe: probe.clone(),
                hypotheses: hypotheses.clone(),
                chosen: Some(h.clone()),
                estimate: next.clone(),
            });
            self.run(next, p, probe.block_index)?;
        }
        Ok(())
    }
}

/// Tomography, then block-by-block refinement of the reference until the
/// mixed probe sees no difference, then a two-excitation cross-check.
///
/// When several hypotheses fit a block, each is followed (best first) and
/// every complete structure is verified. The result is `Resolved` when the
/// verified structures share one block pattern.
pub fn iterate_structure(bb: &mut BlackBoxChain, opts: &InferenceOptions) -> Result<InferenceReport> {
    let tomography = run_tomography(bb, &opts.tomography)?;
    let initial_model = tomography.model();
    let start = PseudoChainSpec {
        blocks: initial_model.effective_fields.iter().map(|&b| BlockSpec::site(b)).collect(),
        inter_couplings: initial_model.couplings.clone(),
    };
    let mut report = InferenceReport {
        status: InferenceStatus::Resolved,
        tomography,
        initial_model: initial_model.clone(),
        iterations: vec![],
        estimate: start.clone(),
        verification: None,
        alternatives: vec![],
        discrepancies: vec![],
        notes: vec![],
    };
    if start.block_count() < 2 {
        report.notes.push("single-spin register: nothing to infer".into());
        return Ok(report);
    }
    let correlators = measure_correlators(bb, &initial_model, &opts.fit)?;
    let returns = measure_return(bb, &initial_model, &opts.fit)?;
    let mut search =
        Search { correlators: &correlators, returns: &returns, model: &initial_model, opts, leaves: vec![], dead_ends: vec![] };
    search.run(start, vec![], 1)?;

    report.alternatives = search
        .leaves
        .iter()
        .map(|(_, e, v)| Alternative { sizes: e.sizes(), estimate: e.clone(), confirmed: v.confirmed })
        .collect();
    let mut confirmed_patterns: Vec<Vec<usize>> =
        search.leaves.iter().filter(|(_, _, v)| v.confirmed).map(|(_, e, _)| e.sizes()).collect();
    confirmed_patterns.sort();
    confirmed_patterns.dedup();

    let chosen = search.leaves.iter().position(|(_, _, v)| v.confirmed).or(if search.leaves.is_empty() { None } else { Some(0) });
    match chosen {
        Some(k) => {
            let (path, estimate, v) = search.leaves.swap_remove(k);
            report.iterations = path;
            report.estimate = estimate;
            if !v.confirmed {
                report.status = InferenceStatus::AmbiguousStructure;
                report.notes.push("two-excitation verification does not confirm the block pattern".into());
            }
            report.verification = Some(v);
        }
        None => {
            report.status = InferenceStatus::AmbiguousStructure;
            if let Some((path, estimate, _)) = search.dead_ends.first() {
                report.iterations = path.clone();
                report.estimate = estimate.clone();
            }
        }
    }
    for (_, _, msg) in &search.dead_ends {
        report.notes.push(msg.clone());
    }
    if confirmed_patterns.len() > 1 {
        report.status = InferenceStatus::AmbiguousStructure;
        report.notes.push(format!("several block patterns pass verification: {confirmed_patterns:?}"));
    }
    for record in &report.iterations {
        if record.hypotheses.len() > 1 {
            if let Some(c) = &record.chosen {
                report.notes.push(format!(
                    "block {}: {} hypotheses fit; kept N = {}, K = {}",
                    c.block_index,
                    record.hypotheses.len(),
                    c.size,
                    c.intra_coupling
                ));
            }
        }
    }
    let mut reference = PseudoChainSpec {
        blocks: initial_model.effective_fields.iter().map(|&b| BlockSpec::site(b)).collect(),
        inter_couplings: initial_model.couplings.clone(),
    };
    for record in &report.iterations {
        if let Some(h) = &record.chosen {
            if !reference.blocks[..h.block_index - 1].iter().any(|b| b.size > 1) {
                report.discrepancies.push(closed_form_check(&reference, h)?);
            }
            reference = record.estimate.clone();
        }
    }
    let sizes = report.estimate.sizes();
    let mut mirrored = sizes.clone();
    mirrored.reverse();
    if mirrored != sizes {
        report.notes.push(format!(
            "the two-excitation probe cannot distinguish {sizes:?} from {mirrored:?}; the ordering comes from the mixed probe at site 1"
        ));
    }
    Ok(report)
}

/// Compares the closed-form even coefficient of a chosen hypothesis with an
/// exact simulation of the spliced chain.
fn closed_form_check(reference: &PseudoChainSpec<f64>, h: &StructureHypothesis) -> Result<String> {
    let i = h.block_index;
    let model = reference.effective_model()?;
    let spliced = reference.with_block(i - 1, BlockSpec::new(h.size, h.field, h.intra_coupling))?;
    let (hx, _) = exact_series(&spliced, 2 * i)?;
    let (rx, _) = exact_series(reference, 2 * i)?;
    let exact = hx[2 * i] - rx[2 * i];
    let closed = even_closed_form(&model, i, h.size, &h.intra_coupling);
    Ok(format!(
        "block {i}: even coefficient closed form {closed:e}, exact {exact:e}, relative deviation {:e}",
        (closed - exact).abs() / exact.abs().max(1e-300)
    ))
}

fn verify(data: &ReturnData, model: &ModelChainSpec<f64>, estimate: &PseudoChainSpec<f64>, opts: &InferenceOptions) -> Result<Verification> {
    let probe = compare_return(data, model, &opts.fit)?;
    let sizes = estimate.sizes();
    let predicted = two_excitation_value(&model.couplings, &sizes);
    let bound = opts.solve.size_bound.max(sizes.iter().copied().max().unwrap_or(1));
    let table = build_candidate_table(model, bound.max(2))?;
    let tol = match data {
        ReturnData::Moments(_) => 1e-6 * predicted.abs().max(1.0),
        ReturnData::Sampled { .. } => opts.solve.sigmas * probe.moment_uncertainty,
    };
    let top = select_candidates(&table, probe.moment_difference + tol).map(|s| s.top_group()).unwrap_or_default();
    // exact data must also single out the pattern's value; noisy data only
    // has to be consistent with it
    let consistent = (probe.moment_difference - predicted).abs() <= tol;
    let confirmed = match data {
        ReturnData::Moments(_) => consistent && top.contains(&sizes),
        ReturnData::Sampled { .. } => consistent,
    };
    Ok(Verification {
        measured_difference: probe.moment_difference,
        uncertainty: probe.moment_uncertainty,
        predicted_difference: predicted,
        top_candidates: top,
        confirmed,
    })
}

/// The probability-difference coefficient implied by a moment difference:
/// `2 (-1)^(N-1) D / (2N-2)!`.
pub fn probability_coefficient_from_moments(block_count: usize, moment_difference: f64) -> f64 {
    let order = 2 * block_count - 2;
    2.0 * sign(block_count - 1) * moment_difference / factorial::<f64>(order)
}

/// `prod J^2` scaling of the table, exposed for property tests.
pub fn coupling_product<T: Scalar>(couplings: &[T]) -> T {
    couplings.iter().fold(T::one(), |acc, j| acc * powi(j, 2))
}
