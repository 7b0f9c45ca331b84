//! Trapped excitations.
//!
//! A single excitation inside a block splits into the symmetric component,
//! which couples to the chain, and a dark component orthogonal to it, which
//! does not. A dark excitation left behind by a bit flip changes how a later
//! injected excitation propagates; the single-excitation dynamics becomes an
//! incoherent mixture of the trapped and untrapped evolutions.
//!
//! Block indices here are zero-based, as in [`PseudoChainSpec::blocks`].

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{BlackBoxChain, SectorState};
use crate::dynamics::{check_grid, SectorDynamics, TimeSeries};
use crate::error::{Error, Result};
use crate::topology::PseudoChainSpec;

/// Orthonormal dark states of `block` as one-excitation vectors over all
/// spins (Helmert basis of the block's symmetric complement).
pub fn dark_states(spec: &PseudoChainSpec<f64>, block: usize) -> Result<Vec<Vec<f64>>> {
    let size = block_size(spec, block)?;
    if size < 2 {
        return Err(Error::NotABlock(block));
    }
    let members = spec.site_map().members(block);
    let m = spec.spin_count();
    Ok((1..size)
        .map(|k| {
            let norm = ((k * (k + 1)) as f64).sqrt();
            let mut v = vec![0.0; m];
            for (j, site) in members.clone().enumerate().take(k + 1) {
                v[site] = if j < k { 1.0 } else { -(k as f64) } / norm;
            }
            v
        })
        .collect())
}

fn block_size(spec: &PseudoChainSpec<f64>, block: usize) -> Result<usize> {
    spec.blocks
        .get(block)
        .map(|b| b.size)
        .ok_or_else(|| Error::OutOfRange(format!("block {block} of {}", spec.block_count())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipDecomposition {
    /// Weight on the symmetric block state, which can leave the block.
    pub escape: f64,
    /// Weight on the dark subspace.
    pub trapped: f64,
}

/// Splits a flip of `member` of `block` into symmetric and dark weights.
pub fn flip_decomposition(spec: &PseudoChainSpec<f64>, block: usize, member: usize) -> Result<FlipDecomposition> {
    let size = block_size(spec, block)?;
    let site = spec
        .site_map()
        .flatten(block, member)
        .ok_or_else(|| Error::OutOfRange(format!("member {member} of a block of {size}")))?;
    let escape = 1.0 / size as f64;
    let trapped = if size < 2 { 0.0 } else { dark_states(spec, block)?.iter().map(|v| v[site] * v[site]).sum() };
    Ok(FlipDecomposition { escape, trapped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapScenario {
    pub spec: PseudoChainSpec<f64>,
    pub trapped_block: usize,
    /// One-excitation vector over all spins, supported on the trapped block.
    pub trapped_state: Vec<f64>,
    /// Probability that the trap is occupied.
    pub occupancy: f64,
}

impl TrapScenario {
    pub fn new(spec: PseudoChainSpec<f64>, trapped_block: usize, trapped_state: Vec<f64>, occupancy: f64) -> Result<Self> {
        spec.validate()?;
        let size = block_size(&spec, trapped_block)?;
        if size < 2 {
            return Err(Error::NotABlock(trapped_block));
        }
        if !(0.0..=1.0).contains(&occupancy) {
            return Err(Error::OutOfRange(format!("occupancy {occupancy}")));
        }
        if trapped_state.len() != spec.spin_count() {
            return Err(Error::LengthMismatch {
                what: "trapped state",
                expected: spec.spin_count(),
                found: trapped_state.len(),
            });
        }
        let members = spec.site_map().members(trapped_block);
        let outside = trapped_state.iter().enumerate().filter(|(s, _)| !members.contains(s)).map(|(_, v)| v.abs()).sum::<f64>();
        let norm: f64 = trapped_state.iter().map(|v| v * v).sum();
        let overlap: f64 = members.clone().map(|s| trapped_state[s]).sum();
        if outside > 1e-12 || (norm - 1.0).abs() > 1e-12 || overlap.abs() > 1e-12 * (size as f64).sqrt() {
            return Err(Error::InvalidArgument(
                "trapped state must be a normalized dark state of the trapped block".into(),
            ));
        }
        Ok(Self { spec, trapped_block, trapped_state, occupancy })
    }

    /// The first dark state of `block`.
    pub fn first_dark(spec: PseudoChainSpec<f64>, block: usize, occupancy: f64) -> Result<Self> {
        let state = dark_states(&spec, block)?.swap_remove(0);
        Self::new(spec, block, state, occupancy)
    }

    /// A uniformly random unit vector of the dark subspace of `block`.
    pub fn random_dark(spec: PseudoChainSpec<f64>, block: usize, occupancy: f64, seed: u64) -> Result<Self> {
        let basis = dark_states(&spec, block)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs: Vec<f64> = basis.iter().map(|_| rng.sample(StandardNormal)).collect();
        let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        let mut state = vec![0.0; spec.spin_count()];
        for (c, v) in coeffs.iter().zip(&basis) {
            for (s, x) in state.iter_mut().zip(v) {
                *s += c / norm * x;
            }
        }
        Self::new(spec, block, state, occupancy)
    }

    /// Trapped excitation plus an excitation injected at site 1, in the
    /// two-excitation basis.
    pub fn trapped_initial_state(&self, dynamics: &SectorDynamics) -> Result<Vec<Complex64>> {
        let mut psi = vec![Complex64::new(0.0, 0.0); dynamics.basis.dim()];
        for (site, &a) in self.trapped_state.iter().enumerate() {
            if a != 0.0 {
                let idx = dynamics.basis.rank(1 | 1 << site).ok_or_else(|| Error::OutOfRange(format!("site {site}")))?;
                psi[idx] = Complex64::new(a, 0.0);
            }
        }
        Ok(psi)
    }
}

/// Both branches prepared once; evaluation at any time is cheap to repeat.
pub struct TrapBranches {
    trapped: SectorDynamics,
    trapped_psi: Vec<Complex64>,
    untrapped: SectorDynamics,
    untrapped_psi: Vec<Complex64>,
    last: usize,
}

impl TrapBranches {
    pub fn new(scenario: &TrapScenario) -> Result<Self> {
        let trapped = SectorDynamics::new(&scenario.spec, 2)?;
        let trapped_psi = scenario.trapped_initial_state(&trapped)?;
        let untrapped = SectorDynamics::new(&scenario.spec, 1)?;
        let untrapped_psi = untrapped.basis_state(1)?;
        Ok(Self { trapped, trapped_psi, untrapped, untrapped_psi, last: scenario.spec.spin_count() - 1 })
    }

    /// `(P_trapped(t), P_untrapped(t))`: probability that the last spin is
    /// excited.
    pub fn at(&self, t: f64) -> Result<(f64, f64)> {
        Ok((
            self.trapped.occupation(&self.trapped_psi, self.last, t)?,
            self.untrapped.occupation(&self.untrapped_psi, self.last, t)?,
        ))
    }

    pub fn on_grid(&self, times: &[f64]) -> Result<Vec<(f64, f64)>> {
        times.par_iter().map(|&t| self.at(t)).collect()
    }
}

/// Transfer probability to the last spin for the trapped and untrapped branches.
pub fn branch_transfer_probabilities(scenario: &TrapScenario, times: &[f64]) -> Result<(TimeSeries<f64>, TimeSeries<f64>)> {
    check_grid(times)?;
    let values = TrapBranches::new(scenario)?.on_grid(times)?;
    Ok((
        TimeSeries::new(times.to_vec(), values.iter().map(|v| v.0).collect())?,
        TimeSeries::new(times.to_vec(), values.iter().map(|v| v.1).collect())?,
    ))
}

/// `p P_trapped + (1 - p) P_untrapped`.
pub fn transfer_probability_with_trap(scenario: &TrapScenario, times: &[f64]) -> Result<TimeSeries<f64>> {
    let (trapped, untrapped) = branch_transfer_probabilities(scenario, times)?;
    let p = scenario.occupancy;
    Ok(TimeSeries::new(times.to_vec(), trapped.values.iter().zip(&untrapped.values).map(|(a, b)| p * a + (1.0 - p) * b).collect())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discrimination {
    pub time: f64,
    pub p_trapped: f64,
    pub p_untrapped: f64,
}

/// Grid points per unit of `max|J| t` in the discrimination scan.
const SCAN_DENSITY: f64 = 40.0;

/// A time in `window` where the trapped branch reaches the last spin with
/// probability at most `eps` and the untrapped branch with at least `theta`.
/// Among feasible points the one with the largest untrapped probability is
/// returned, after refinement on a finer grid around the best scan point.
pub fn find_discrimination_time(scenario: &TrapScenario, window: (f64, f64), eps: f64, theta: f64) -> Result<Option<Discrimination>> {
    if !(eps > 0.0 && eps < 1.0 && theta > 0.0 && theta < 1.0) || eps >= theta {
        return Err(Error::InvalidArgument(format!("need 0 < eps < theta < 1, got eps = {eps}, theta = {theta}")));
    }
    let (t0, t1) = window;
    if !(t0.is_finite() && t1.is_finite() && t0 >= 0.0 && t1 > t0) {
        return Err(Error::InvalidArgument(format!("window [{t0}, {t1}]")));
    }
    let scale = scenario
        .spec
        .inter_couplings
        .iter()
        .chain(scenario.spec.blocks.iter().map(|b| &b.intra_coupling))
        .fold(1e-3f64, |m, j| m.max(j.abs()));
    let points = ((t1 - t0) * scale * SCAN_DENSITY).ceil().max(200.0) as usize;
    let dt = (t1 - t0) / points as f64;
    let branches = TrapBranches::new(scenario)?;
    let best = |times: Vec<f64>| -> Result<Option<Discrimination>> {
        let values = branches.on_grid(&times)?;
        Ok(times
            .iter()
            .zip(values)
            .filter(|(_, (pt, pu))| *pt <= eps && *pu >= theta)
            .map(|(&time, (p_trapped, p_untrapped))| Discrimination { time, p_trapped, p_untrapped })
            .max_by(|a, b| a.p_untrapped.total_cmp(&b.p_untrapped)))
    };
    let Some(coarse) = best((0..=points).map(|k| t0 + k as f64 * dt).collect())? else {
        return Ok(None);
    };
    let lo = (coarse.time - dt).max(t0);
    let hi = (coarse.time + dt).min(t1);
    let fine = best((0..=100).map(|k| lo + (hi - lo) * k as f64 / 100.0).collect())?;
    Ok(Some(fine.map_or(coarse, |f| if f.p_untrapped >= coarse.p_untrapped { f } else { coarse })))
}

/// Updated trap-occupancy posterior after one readout of the last spin.
///
/// A detection (`-1`) is impossible in the trapped branch when its
/// probability is at most `certify_below`, so it sets the posterior to zero.
pub fn bayes_update(prior: f64, outcome: i8, p_trapped: f64, p_untrapped: f64, certify_below: f64) -> f64 {
    let (lt, lu) = if outcome < 0 {
        if p_trapped <= certify_below {
            return 0.0;
        }
        (p_trapped, p_untrapped)
    } else {
        (1.0 - p_trapped, 1.0 - p_untrapped)
    };
    let num = prior * lt;
    let den = num + (1.0 - prior) * lu;
    if den <= 0.0 {
        prior
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlushRound {
    pub round: usize,
    pub outcome: i8,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlushReport {
    pub discrimination: Discrimination,
    pub prior: f64,
    pub trap_occupied: bool,
    pub rounds: Vec<FlushRound>,
}

impl FlushReport {
    pub fn certified(&self) -> bool {
        self.rounds.iter().any(|r| r.outcome < 0 && r.posterior == 0.0)
    }

    /// `round,outcome,posterior` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,outcome,posterior\n");
        for r in &self.rounds {
            s.push_str(&format!("{},{},{:.17e}\n", r.round, r.outcome, r.posterior));
        }
        s
    }
}

/// Repeated readouts on the box. Each round re-prepares the branch state
/// (trapped dark excitation plus an injection at site 1, or the injection
/// alone), evolves to `t*` and measures `Z` on the last spin.
pub fn flush_protocol(
    bb: &mut BlackBoxChain,
    scenario: &TrapScenario,
    trap_occupied: bool,
    discrimination: Discrimination,
    rounds: usize,
    certify_below: f64,
) -> Result<FlushReport> {
    let branches = TrapBranches::new(scenario)?;
    let state = if trap_occupied {
        SectorState { excitations: 2, amplitudes: branches.trapped_psi.clone() }
    } else {
        SectorState { excitations: 1, amplitudes: branches.untrapped_psi.clone() }
    };
    let mut posterior = scenario.occupancy;
    let mut log = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let m = bb.measure_end_z(&state, discrimination.time)?;
        posterior = bayes_update(posterior, m.outcome, discrimination.p_trapped, discrimination.p_untrapped, certify_below);
        log.push(FlushRound { round, outcome: m.outcome, posterior });
    }
    Ok(FlushReport { discrimination, prior: scenario.occupancy, trap_occupied, rounds: log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlushStatistics {
    pub runs: usize,
    /// Mean posterior after each round.
    pub mean_posterior: Vec<f64>,
    pub posterior_std_error: Vec<f64>,
    /// Fraction of runs without a detection after each round.
    pub undetected_fraction: Vec<f64>,
    /// Runs with an occupied trap that were nevertheless certified empty.
    pub false_certifications: usize,
}

/// Monte Carlo over `runs` independent protocol runs, each drawing the trap
/// occupancy from the scenario prior and then Born-rule outcomes at `t*`.
pub fn flush_monte_carlo(
    scenario: &TrapScenario,
    discrimination: Discrimination,
    rounds: usize,
    runs: usize,
    certify_below: f64,
    seed: u64,
) -> Result<FlushStatistics> {
    let branches = TrapBranches::new(scenario)?;
    let (pt, pu) = branches.at(discrimination.time)?;
    let trajectories: Vec<(bool, Vec<FlushRound>)> = (0..runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(run as u64);
            let occupied = rng.random::<f64>() < scenario.occupancy;
            let p_detect = if occupied { pt } else { pu };
            let mut posterior = scenario.occupancy;
            let log = (1..=rounds)
                .map(|round| {
                    let outcome = if rng.random::<f64>() < p_detect { -1 } else { 1 };
                    posterior = bayes_update(posterior, outcome, discrimination.p_trapped, discrimination.p_untrapped, certify_below);
                    FlushRound { round, outcome, posterior }
                })
                .collect();
            (occupied, log)
        })
        .collect();
    let n = runs as f64;
    let mut mean_posterior = vec![0.0; rounds];
    let mut posterior_std_error = vec![0.0; rounds];
    let mut undetected_fraction = vec![0.0; rounds];
    for r in 0..rounds {
        let values: Vec<f64> = trajectories.iter().map(|(_, log)| log[r].posterior).collect();
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        mean_posterior[r] = mean;
        posterior_std_error[r] = (var / n).sqrt();
        undetected_fraction[r] = trajectories.iter().filter(|(_, log)| log[..=r].iter().all(|x| x.outcome > 0)).count() as f64 / n;
    }
    let false_certifications =
        trajectories.iter().filter(|(occupied, log)| *occupied && log.iter().any(|x| x.outcome < 0 && x.posterior == 0.0)).count();
    Ok(FlushStatistics { runs, mean_posterior, posterior_std_error, undetected_fraction, false_certifications })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixturePoint {
    /// Expected posterior after the round, over both branches.
    pub mean_posterior: f64,
    /// Probability that no detection has happened yet.
    pub undetected: f64,
}

/// Exact expectations for the protocol with per-round detection
/// probabilities `pt` (trapped) and `pu` (untrapped).
///
/// After `r` silent rounds the posterior is
/// `p (1-pt)^r / (p (1-pt)^r + (1-p)(1-pu)^r)`; after a detection it is the
/// detection posterior propagated through the remaining rounds, which is
/// summed over the round of first detection.
pub fn mixture_prediction(prior: f64, pt: f64, pu: f64, rounds: usize, certify_below: f64) -> Vec<MixturePoint> {
    let silent = |r: usize| (prior * (1.0 - pt).powi(r as i32), (1.0 - prior) * (1.0 - pu).powi(r as i32));
    (1..=rounds)
        .map(|r| {
            let (a, b) = silent(r);
            let undetected = a + b;
            let mut mean = if undetected > 0.0 { a } else { 0.0 };
            // paths whose first detection is at round k <= r
            for k in 1..=r {
                let (a0, b0) = silent(k - 1);
                let reach = a0 + b0;
                if reach <= 0.0 {
                    continue;
                }
                let before = a0 / reach;
                let detect = a0 * pt + b0 * pu;
                if detect <= 0.0 {
                    continue;
                }
                let after = bayes_update(before, -1, pt, pu, certify_below);
                // the expected posterior is a martingale from here on
                mean += detect * after;
            }
            MixturePoint { mean_posterior: mean, undetected }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::BlockSpec;

    fn fixture() -> PseudoChainSpec<f64> {
        PseudoChainSpec::from_pattern(&[1, 2, 1], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn dark_state_examples() {
        let spec = fixture();
        let d = dark_states(&spec, 1).unwrap();
        assert_eq!(d.len(), 1);
        let r = 0.5f64.sqrt();
        assert!((d[0][1] - r).abs() < 1e-15 && (d[0][2] + r).abs() < 1e-15);
        assert!(matches!(dark_states(&spec, 0), Err(Error::NotABlock(0))));

        let three = PseudoChainSpec::from_pattern(&[1, 3, 1], vec![1.0, 0.7]).unwrap();
        let d = dark_states(&three, 1).unwrap();
        assert_eq!(d.len(), 2);
        let dot: f64 = d[0].iter().zip(&d[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-15);
    }

    #[test]
    fn dark_state_is_decoupled() {
        let spec = PseudoChainSpec::new(
            vec![BlockSpec::site(0.1), BlockSpec::new(2, 0.3, 0.4), BlockSpec::site(-0.2)],
            vec![1.0, 0.8],
        )
        .unwrap();
        let dynamics = SectorDynamics::new(&spec, 1).unwrap();
        let dark = &dark_states(&spec, 1).unwrap()[0];
        let hd = dynamics.hamiltonian.apply(dark);
        // the dark vector only picks up its own energy B - K
        for (k, &s) in dynamics.basis.states().iter().enumerate() {
            let site = s.trailing_zeros() as usize;
            assert!((hd[k] - (0.3 - 0.4) * dark[site]).abs() < 1e-15);
        }
    }

    #[test]
    fn flip_weights() {
        let spec = PseudoChainSpec::from_pattern(&[1, 2, 3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let two = flip_decomposition(&spec, 1, 0).unwrap();
        assert!((two.escape - 0.5).abs() < 1e-15 && (two.trapped - 0.5).abs() < 1e-15);
        let three = flip_decomposition(&spec, 2, 2).unwrap();
        assert!((three.escape - 1.0 / 3.0).abs() < 1e-15 && (three.trapped - 2.0 / 3.0).abs() < 1e-15);
        let one = flip_decomposition(&spec, 0, 0).unwrap();
        assert_eq!((one.escape, one.trapped), (1.0, 0.0));
    }

    #[test]
    fn mixture_edges() {
        let scenario = TrapScenario::first_dark(fixture(), 1, 0.0).unwrap();
        let times = [0.0, 0.5, 1.7, 3.0];
        let mix = transfer_probability_with_trap(&scenario, &times).unwrap();
        let model = fixture().effective_model().unwrap();
        let plain = crate::dynamics::transfer_probability(&model, &times).unwrap();
        for (a, b) in mix.values.iter().zip(&plain.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(mix.values[0], 0.0);
    }

    #[test]
    fn discrimination_preconditions() {
        let scenario = TrapScenario::first_dark(fixture(), 1, 0.5).unwrap();
        assert!(find_discrimination_time(&scenario, (0.0, 20.0), 0.3, 0.2).is_err());
        let found = find_discrimination_time(&scenario, (0.0, 20.0), 1e-3, 0.2).unwrap().unwrap();
        assert!(found.p_trapped <= 1e-3 && found.p_untrapped >= 0.2);
    }

    #[test]
    fn bayes_rules() {
        assert_eq!(bayes_update(0.0, 1, 0.0, 0.9, 1e-3), 0.0);
        assert_eq!(bayes_update(0.5, -1, 0.0, 0.9, 1e-3), 0.0);
        let p = bayes_update(0.5, 1, 0.0, 0.9, 1e-3);
        assert!((p - 1.0 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn mixture_prediction_is_a_martingale() {
        for point in mixture_prediction(0.4, 0.0, 0.7, 6, 1e-3) {
            assert!((point.mean_posterior - 0.4).abs() < 1e-12);
        }
    }
}
