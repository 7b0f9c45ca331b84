//! One-excitation tomography: survival amplitude -> spectral data -> chain.
//!
//! `f(t) = <e_1| exp(-iHt) |e_1> = sum_k w_k exp(-i lambda_k t)` is resolved
//! into modes by the matrix-pencil method, the weights by linear least
//! squares, and the tridiagonal chain by Lanczos on `diag(lambda)` started
//! from `sqrt(w)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBoxChain, Mode};
use crate::dynamics::{uniform_grid, TimeSeries};
use crate::error::{Error, Result};
use crate::modelchain::oes_matrix;
use crate::topology::ModelChainSpec;

/// Weights below this are treated as absent modes.
pub const WEIGHT_THRESHOLD: f64 = 1e-6;

/// Lanczos `beta` below this means the chain ended early.
pub const BREAKDOWN_TOLERANCE: f64 = 1e-12;

/// Upper bound on the pencil parameter; keeps the SVD at `O(n * cap^2)`.
pub const PENCIL_CAP: usize = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralData {
    pub eigenvalues: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SpectralData {
    /// Sorts by eigenvalue and checks the invariants.
    pub fn new(eigenvalues: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if eigenvalues.len() != weights.len() {
            return Err(Error::LengthMismatch { what: "weights", expected: eigenvalues.len(), found: weights.len() });
        }
        if eigenvalues.iter().chain(&weights).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteParameter("spectral data".into()));
        }
        if let Some(w) = weights.iter().find(|&&w| w <= 0.0) {
            return Err(Error::NonPositiveWeights(format!("weight {w:e}")));
        }
        let mut modes: Vec<(f64, f64)> = eigenvalues.into_iter().zip(weights).collect();
        modes.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { eigenvalues: modes.iter().map(|m| m.0).collect(), weights: modes.iter().map(|m| m.1).collect() })
    }

    /// Exact spectral data of a chain's one-excitation matrix at site 1.
    pub fn of_model(model: &ModelChainSpec<f64>) -> Self {
        let eig = nalgebra::SymmetricEigen::new(oes_matrix(model).to_dense());
        let w: Vec<f64> = eig.eigenvectors.row(0).iter().map(|x| x * x).collect();
        Self::new(eig.eigenvalues.as_slice().to_vec(), w).expect("eigenvector weights of a connected chain are positive")
    }

    pub fn mode_count(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn min_gap(&self) -> Option<f64> {
        self.eigenvalues.windows(2).map(|w| w[1] - w[0]).min_by(f64::total_cmp)
    }

    pub fn amplitude(&self, t: f64) -> Complex64 {
        self.eigenvalues.iter().zip(&self.weights).map(|(&l, &w)| w * Complex64::from_polar(1.0, -l * t)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PencilOptions {
    /// Standard deviation of the complex noise per sample, 0 for exact data.
    pub noise_level: f64,
    /// Singular values below this fraction of the largest are dropped.
    pub relative_rank_tolerance: f64,
    /// Eigenvalues closer than this are rejected as degenerate.
    pub resolution: f64,
}

impl Default for PencilOptions {
    fn default() -> Self {
        Self { noise_level: 0.0, relative_rank_tolerance: 1e-10, resolution: 1e-9 }
    }
}

/// Matrix-pencil estimate of `(lambda_k, w_k)` from samples on a uniform grid.
pub fn estimate_spectrum(f: &TimeSeries<Complex64>, opts: &PencilOptions) -> Result<SpectralData> {
    let n = f.len();
    let dt = f.uniform_step().ok_or_else(|| Error::InvalidArgument("tomography needs a uniform grid".into()))?;
    if n < 6 {
        return Err(Error::RankDeficient(format!("{n} samples are too few")));
    }
    let pencil = (n / 3).min(PENCIL_CAP);
    let rows = n - pencil;
    let cols = pencil + 1;
    let hankel = DMatrix::from_fn(rows, cols, |r, c| f.values[r + c]);
    let svd = hankel.svd(false, true);
    let v_t = svd.v_t.expect("requested V^H");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s_max = svd.singular_values[order[0]];
    if s_max == 0.0 {
        return Err(Error::NoSignal);
    }
    let noise_floor = 1.2 * opts.noise_level * ((rows as f64).sqrt() + (cols as f64).sqrt());
    let cutoff = noise_floor.max(opts.relative_rank_tolerance * s_max);
    let rank = order.iter().take_while(|&&k| svd.singular_values[k] > cutoff).count();
    if rank == 0 {
        return Err(Error::NoSignal);
    }
    if rank >= pencil {
        return Err(Error::RankDeficient(format!("signal rank {rank} fills the pencil of size {pencil}; lengthen the grid")));
    }
    // conj(V) spans (z_k^c)_c, which is shift invariant along c
    let signal = DMatrix::from_fn(cols, rank, |c, j| v_t[(order[j], c)]);
    let top = signal.rows(0, cols - 1).into_owned();
    let bottom = signal.rows(1, cols - 1).into_owned();
    let phi = top.pseudo_inverse(1e-14).map_err(|e| Error::RankDeficient(e.to_string()))? * bottom;
    let z = phi
        .schur()
        .eigenvalues()
        .ok_or_else(|| Error::ConvergenceFailure("pencil eigenvalues".into()))?;
    let mut lambdas: Vec<f64> = z.iter().map(|z| -z.arg() / dt).collect();
    lambdas.sort_by(f64::total_cmp);
    if let Some(w) = lambdas.windows(2).find(|w| w[1] - w[0] < opts.resolution) {
        return Err(Error::DegenerateSpectrum(format!("modes at {} and {}", w[0], w[1])));
    }
    let floor = WEIGHT_THRESHOLD.max(3.0 * opts.noise_level / (n as f64).sqrt());
    // exact data must not produce negative weights; noisy data may, for
    // spurious modes, which are pruned one at a time
    let tolerance = if opts.noise_level > 0.0 { 10.0 * floor } else { floor };
    let mut kept_l = lambdas;
    let mut refit = fit_weights(f, &kept_l)?;
    loop {
        let Some((k, &w)) = refit.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) else {
            return Err(Error::NoSignal);
        };
        if w < -tolerance {
            return Err(Error::NonPositiveWeights(format!("fitted weight {w:e}")));
        }
        if w > floor {
            break;
        }
        kept_l.remove(k);
        if kept_l.is_empty() {
            return Err(Error::NoSignal);
        }
        refit = fit_weights(f, &kept_l)?;
    }
    let (kept_l, refit) = if opts.noise_level > 0.0 { refine_modes(f, kept_l, refit) } else { (kept_l, refit) };
    let total: f64 = refit.iter().sum();
    SpectralData::new(kept_l, refit.iter().map(|w| w / total).collect())
}

/// Levenberg-Marquardt on `(lambda_k, w_k)` against all samples. Used for
/// noisy data, where the pencil estimate is consistent but not efficient.
fn refine_modes(f: &TimeSeries<Complex64>, mut lambdas: Vec<f64>, mut weights: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let m = lambdas.len();
    let n = f.len();
    let cost = |l: &[f64], w: &[f64]| -> f64 {
        f.times
            .iter()
            .zip(&f.values)
            .map(|(&t, y)| {
                let model: Complex64 = l.iter().zip(w).map(|(&lk, &wk)| wk * Complex64::from_polar(1.0, -lk * t)).sum();
                (y - model).norm_sqr()
            })
            .sum()
    };
    let mut current = cost(&lambdas, &weights);
    let mut damping = 1e-3;
    for _ in 0..50 {
        let mut jac = DMatrix::zeros(2 * n, 2 * m);
        let mut res = DVector::zeros(2 * n);
        for (r, (&t, y)) in f.times.iter().zip(&f.values).enumerate() {
            let mut model = Complex64::new(0.0, 0.0);
            for k in 0..m {
                let e = Complex64::from_polar(1.0, -lambdas[k] * t);
                model += weights[k] * e;
                let dl = Complex64::new(0.0, -t) * weights[k] * e;
                jac[(r, k)] = dl.re;
                jac[(n + r, k)] = dl.im;
                jac[(r, m + k)] = e.re;
                jac[(n + r, m + k)] = e.im;
            }
            let d = y - model;
            res[r] = d.re;
            res[n + r] = d.im;
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * res;
        let mut improved = false;
        for _ in 0..10 {
            let mut lhs = jtj.clone();
            for k in 0..2 * m {
                lhs[(k, k)] += damping * jtj[(k, k)].max(1e-300);
            }
            let Some(delta) = lhs.cholesky().map(|c| c.solve(&jtr)) else {
                damping *= 10.0;
                continue;
            };
            let l: Vec<f64> = (0..m).map(|k| lambdas[k] + delta[k]).collect();
            let w: Vec<f64> = (0..m).map(|k| weights[k] + delta[m + k]).collect();
            let c = cost(&l, &w);
            if c < current {
                let gain = (current - c) / current.max(1e-300);
                lambdas = l;
                weights = w;
                current = c;
                damping = (damping * 0.3).max(1e-12);
                improved = gain > 1e-12;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let mut modes: Vec<(f64, f64)> = lambdas.into_iter().zip(weights).collect();
    modes.sort_by(|a, b| a.0.total_cmp(&b.0));
    modes.into_iter().unzip()
}

/// Real least squares for `f(t) = sum_k w_k exp(-i lambda_k t)`.
fn fit_weights(f: &TimeSeries<Complex64>, lambdas: &[f64]) -> Result<Vec<f64>> {
    let n = f.len();
    let m = lambdas.len();
    let mut a = DMatrix::zeros(2 * n, m);
    let mut b = DVector::zeros(2 * n);
    for (r, (&t, y)) in f.times.iter().zip(&f.values).enumerate() {
        for (c, &l) in lambdas.iter().enumerate() {
            let e = Complex64::from_polar(1.0, -l * t);
            a[(r, c)] = e.re;
            a[(n + r, c)] = e.im;
        }
        b[r] = y.re;
        b[n + r] = y.im;
    }
    let svd = a.svd(true, true);
    let sol = svd.solve(&b, 1e-12).map_err(|e| Error::FitIllConditioned(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

/// Lanczos on `diag(lambda)` with start vector `sqrt(w)`. Couplings come out
/// positive, which fixes the sign gauge.
pub fn reconstruct_jacobi(s: &SpectralData) -> Result<ModelChainSpec<f64>> {
    let n = s.mode_count();
    if n == 0 {
        return Err(Error::InvalidArgument("no modes".into()));
    }
    if let Some(w) = s.weights.iter().find(|&&w| w <= 0.0) {
        return Err(Error::NonPositiveWeights(format!("weight {w:e}")));
    }
    if let Some(w) = s.eigenvalues.windows(2).find(|w| w[1] - w[0] <= 0.0) {
        return Err(Error::DegenerateSpectrum(format!("repeated eigenvalue {}", w[0])));
    }
    let lambda = DVector::from_column_slice(&s.eigenvalues);
    let start = DVector::from_iterator(n, s.weights.iter().map(|w| w.sqrt()));
    let mut basis = vec![&start / start.norm()];
    let mut alpha = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n.saturating_sub(1));
    for k in 0..n {
        let q = &basis[k];
        let mut r = lambda.component_mul(q);
        alpha.push(q.dot(&r));
        for _ in 0..2 {
            for v in &basis {
                let c = v.dot(&r);
                r -= v * c;
            }
        }
        if k + 1 == n {
            break;
        }
        let b = r.norm();
        if b < BREAKDOWN_TOLERANCE {
            return Err(Error::Breakdown { step: k + 1, beta: b });
        }
        beta.push(b);
        basis.push(r / b);
    }
    ModelChainSpec::new(beta, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TomographyOptions {
    /// Initial sampling step; refined from the estimated spectral radius.
    pub initial_step: f64,
    pub initial_points: usize,
    pub max_points: usize,
    pub max_rounds: usize,
    pub relative_rank_tolerance: f64,
}

impl Default for TomographyOptions {
    fn default() -> Self {
        Self { initial_step: 0.1, initial_points: 400, max_points: 3000, max_rounds: 4, relative_rank_tolerance: 1e-10 }
    }
}

impl TomographyOptions {
    /// Defaults suited to the query mode. Sampled data is noise limited, so
    /// every round uses the full point budget.
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Exact => Self::default(),
            Mode::Sampled { .. } => Self { initial_points: 8000, max_points: 8000, ..Self::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyReport {
    pub eigenvalues: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(rename = "J")]
    pub couplings: Vec<f64>,
    #[serde(rename = "B_eff")]
    pub effective_fields: Vec<f64>,
    /// RMS of data minus the fitted mode sum.
    pub fit_residual: f64,
    /// Largest deviation between the input spectral data and the spectrum
    /// of the reconstructed chain (eigenvalues and weights).
    pub spectral_residual: f64,
    pub step: f64,
    pub points: usize,
    pub rounds: usize,
}

impl TomographyReport {
    pub fn model(&self) -> ModelChainSpec<f64> {
        ModelChainSpec { couplings: self.couplings.clone(), effective_fields: self.effective_fields.clone() }
    }

    pub fn spectral_data(&self) -> SpectralData {
        SpectralData { eigenvalues: self.eigenvalues.clone(), weights: self.weights.clone() }
    }
}

fn rms_residual(f: &TimeSeries<Complex64>, s: &SpectralData) -> f64 {
    let sum: f64 = f.times.iter().zip(&f.values).map(|(&t, y)| (y - s.amplitude(t)).norm_sqr()).sum();
    (sum / f.len() as f64).sqrt()
}

fn spectral_residual(s: &SpectralData, model: &ModelChainSpec<f64>) -> f64 {
    let back = SpectralData::of_model(model);
    if back.mode_count() != s.mode_count() {
        return f64::INFINITY;
    }
    back.eigenvalues
        .iter()
        .zip(&s.eigenvalues)
        .chain(back.weights.iter().zip(&s.weights))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Full tomography from survival-amplitude queries.
///
/// The grid adapts: the step is kept below the Nyquist limit of the
/// estimated spectral radius and the window is stretched to `4 pi / gap`
/// of the smallest estimated gap, within `max_points`.
pub fn run_tomography(bb: &mut BlackBoxChain, opts: &TomographyOptions) -> Result<TomographyReport> {
    let noise_level = match bb.mode() {
        Mode::Exact => 0.0,
        Mode::Sampled { shots, .. } => (2.0 / shots as f64).sqrt(),
    };
    let pencil = PencilOptions { noise_level, relative_rank_tolerance: opts.relative_rank_tolerance, ..Default::default() };
    let mut step = opts.initial_step;
    let mut points = opts.initial_points.min(opts.max_points);
    let mut last: Option<(SpectralData, TimeSeries<Complex64>)> = None;
    let mut rounds = 0;
    for round in 0..opts.max_rounds {
        rounds = round + 1;
        let f = bb.query_survival(&uniform_grid(0.0, step, points))?;
        let s = estimate_spectrum(&f, &pencil)?;
        let radius = s.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        let nyquist = 0.5 * std::f64::consts::PI / radius.max(1e-3);
        let gap = s.min_gap().unwrap_or(1.0);
        let stable = last.as_ref().is_some_and(|(p, _)| p.mode_count() == s.mode_count());
        let new_step = step.min(nyquist);
        let window = (4.0 * std::f64::consts::PI / gap).max(points as f64 * step);
        let new_points = ((window / new_step).ceil() as usize).clamp(opts.initial_points, opts.max_points);
        let converged = stable && new_step >= step && new_points <= points;
        last = Some((s, f));
        if converged {
            break;
        }
        step = new_step;
        points = new_points;
    }
    let (s, f) = last.expect("at least one round");
    let model = reconstruct_jacobi(&s)?;
    Ok(TomographyReport {
        fit_residual: rms_residual(&f, &s),
        spectral_residual: spectral_residual(&s, &model),
        eigenvalues: s.eigenvalues,
        weights: s.weights,
        couplings: model.couplings,
        effective_fields: model.effective_fields,
        step: f.uniform_step().unwrap_or(step),
        points: f.len(),
        rounds,
    })
}
