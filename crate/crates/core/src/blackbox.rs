//! End-site access to a hidden pseudo-chain.
//!
//! Inference code only sees a [`BlackBoxChain`] through the queries below:
//! preparations and measurements at the two end spins. In exact mode the
//! queries return expectation values; in sampled mode every value is a
//! binomial estimate drawn from a seeded ChaCha8 stream.
//!
//! The complex survival amplitude is read out as two quadratures, each a
//! `±1` outcome with mean `Re f` or `Im f` (a Hadamard-test style readout).
//! This is an idealization: the physical phase reference is not modeled.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, SectorDynamics, SeriesCoefficients, TimeSeries};
use crate::error::{Error, Result};
use crate::hilbert::{Pauli, RationalGauge, SectorBasis};
use crate::topology::PseudoChainSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Mode {
    Exact,
    Sampled { shots: u64, seed: u64 },
}

/// State of the hidden chain in one excitation sector, in the sector basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorState {
    pub excitations: usize,
    pub amplitudes: Vec<Complex64>,
}

/// Outcome of a `Z` measurement on the last spin.
#[derive(Debug, Clone, PartialEq)]
pub struct EndMeasurement {
    /// `+1` (spin up, no excitation) or `-1` (excitation detected).
    pub outcome: i8,
    pub p_plus: f64,
    pub p_minus: f64,
    /// Normalized post-measurement state.
    pub post_state: SectorState,
}

pub struct BlackBoxChain {
    hidden: PseudoChainSpec<f64>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl BlackBoxChain {
    /// Exact mode measurements still need randomness for single-shot `Z`
    /// readouts; that stream is seeded with 0.
    pub fn new(hidden: PseudoChainSpec<f64>, mode: Mode) -> Result<Self> {
        hidden.validate_structure()?;
        if let Mode::Sampled { shots: 0, .. } = mode {
            return Err(Error::InvalidArgument("sampled mode needs at least one shot".into()));
        }
        let seed = match mode {
            Mode::Exact => 0,
            Mode::Sampled { seed, .. } => seed,
        };
        Ok(Self { hidden, mode, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn exact(hidden: PseudoChainSpec<f64>) -> Result<Self> {
        Self::new(hidden, Mode::Exact)
    }

    /// Reseeds the stream used by single-shot readouts such as
    /// [`measure_end_z`](Self::measure_end_z).
    pub fn with_measurement_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Total spin count is visible: the users know how many qubits the
    /// register has, not how they are wired.
    pub fn spin_count(&self) -> usize {
        self.hidden.spin_count()
    }

    /// Mean of `shots` `±1` outcomes with `P(+1) = (1 + value) / 2`.
    fn sample_pm(&mut self, value: f64, shots: u64) -> f64 {
        let p = ((1.0 + value) / 2.0).clamp(0.0, 1.0);
        let k = Binomial::new(shots, p).expect("p clamped to [0, 1]").sample(&mut self.rng);
        2.0 * k as f64 / shots as f64 - 1.0
    }

    /// Fraction of `shots` successes with probability `p`.
    fn sample_fraction(&mut self, p: f64, shots: u64) -> f64 {
        let k = Binomial::new(shots, p.clamp(0.0, 1.0)).expect("p clamped to [0, 1]").sample(&mut self.rng);
        k as f64 / shots as f64
    }

    /// `f(t) = <e_1| exp(-iHt) |e_1>` after injecting one excitation at site 1.
    pub fn query_survival(&mut self, times: &[f64]) -> Result<TimeSeries<Complex64>> {
        let exact = dynamics::survival_amplitude(&self.hidden, times)?;
        match self.mode {
            Mode::Exact => Ok(exact),
            Mode::Sampled { shots, .. } => {
                let values = exact
                    .values
                    .iter()
                    .map(|f| Complex64::new(self.sample_pm(f.re, shots), self.sample_pm(f.im, shots)))
                    .collect();
                TimeSeries::new(exact.times, values)
            }
        }
    }

    /// Probability of finding `|10...01>` again after time `t`.
    pub fn query_two_excitation_return(&mut self, times: &[f64]) -> Result<TimeSeries<f64>> {
        let exact = dynamics::return_probability(&self.hidden, times)?;
        match self.mode {
            Mode::Exact => Ok(exact),
            Mode::Sampled { shots, .. } => {
                let values = exact.values.iter().map(|&p| self.sample_fraction(p, shots)).collect();
                TimeSeries::new(exact.times, values)
            }
        }
    }

    /// `<a b(t)>` from a maximally mixed start: `X_1` is measured (outcome
    /// `a`), the chain evolves, then `B_1` is measured (outcome `b`).
    pub fn query_mixed_correlator(&mut self, observable: Pauli, times: &[f64]) -> Result<TimeSeries<f64>> {
        let exact = dynamics::mixed_correlator(&self.hidden, observable, times)?;
        match self.mode {
            Mode::Exact => Ok(exact),
            Mode::Sampled { shots, .. } => {
                let values = exact.values.iter().map(|&v| self.sample_pm(v, shots)).collect();
                TimeSeries::new(exact.times, values)
            }
        }
    }

    /// Taylor coefficients of the mixed correlators, exact mode only.
    pub fn query_correlator_series(&self, max_order: usize) -> Result<(SeriesCoefficients<f64>, SeriesCoefficients<f64>)> {
        if self.mode != Mode::Exact {
            return Err(Error::ModeUnsupported("correlator coefficients need exact mode"));
        }
        dynamics::correlator_series_pair(&RationalGauge(&self.hidden), max_order)
    }

    /// `<10...01| H^k |10...01>` for `k <= n`, exact mode only.
    pub fn query_return_moments(&self, n: usize) -> Result<Vec<f64>> {
        if self.mode != Mode::Exact {
            return Err(Error::ModeUnsupported("moments need exact mode"));
        }
        dynamics::end_pair_moments(&RationalGauge(&self.hidden), n)
    }

    /// Sector basis of the hidden register; needed to express prepared states.
    pub fn sector_basis(&self, excitations: usize) -> Result<SectorBasis> {
        SectorBasis::new(self.spin_count(), excitations)
    }

    /// Evolves `state` for `t` under the hidden Hamiltonian and measures
    /// `Z_M`. The outcome is drawn from the Born rule and the state collapses.
    pub fn measure_end_z(&mut self, state: &SectorState, t: f64) -> Result<EndMeasurement> {
        let sector = SectorDynamics::new(&self.hidden, state.excitations)?;
        let evolved = sector.evolve(&state.amplitudes, t)?;
        let last = self.spin_count() - 1;
        let excited: Vec<bool> = sector.basis.states().iter().map(|s| s >> last & 1 == 1).collect();
        let total: f64 = evolved.iter().map(|a| a.norm_sqr()).sum();
        let p_minus =
            (evolved.iter().zip(&excited).filter(|(_, &e)| e).map(|(a, _)| a.norm_sqr()).sum::<f64>() / total).clamp(0.0, 1.0);
        let p_plus = 1.0 - p_minus;
        let minus = self.rng.random::<f64>() < p_minus;
        let keep = |e: bool| e == minus;
        let norm = if minus { p_minus } else { p_plus }.sqrt() * total.sqrt();
        let amplitudes = evolved
            .iter()
            .zip(&excited)
            .map(|(a, &e)| if keep(e) { a / norm } else { Complex64::new(0.0, 0.0) })
            .collect();
        Ok(EndMeasurement {
            outcome: if minus { -1 } else { 1 },
            p_plus,
            p_minus,
            post_state: SectorState { excitations: state.excitations, amplitudes },
        })
    }

    /// Probability that `Z_M` reads `-1` after evolving `state` for `t`.
    pub fn end_excitation_probability(&self, state: &SectorState, t: f64) -> Result<f64> {
        let sector = SectorDynamics::new(&self.hidden, state.excitations)?;
        sector.occupation(&state.amplitudes, self.spin_count() - 1, t)
    }
}

impl std::fmt::Debug for BlackBoxChain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxChain").field("spins", &self.spin_count()).field("mode", &self.mode).finish_non_exhaustive()
    }
}
