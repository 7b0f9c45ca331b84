//! Calibration of the even-order correlator coefficient for the first
//! oversized block.
//!
//! For a chain whose first block with `N_i > 1` sits at index `i`, the exact
//! order-`2i` coefficient `c` of `g_X - g_X^model` is normalized to
//!
//! `y = c (2i)! (-1)^i / (prod_{j<i} J_j^2 (N_i - 1)/N_i)`
//!
//! and fitted by least squares on the features below. The reference bracket
//! `3 J_{i-1}^2 - J_i^2 + N K ((3N - 2) K - 2 sum B')` predicts the weights
//! `(3, -1, 3, -2, -2, 0)`.

use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::dynamics::correlator_series_pair;
use crate::error::{Error, Result};
use crate::hilbert::RationalGauge;
use crate::scalar::{factorial, ratio, Scalar};
use crate::topology::{BlockSpec, PseudoChainSpec};

pub const FEATURES: [&str; 6] = ["J_{i-1}^2", "J_i^2", "N^2 K^2", "N K^2", "N K sum B'", "1"];
pub const REFERENCE_WEIGHTS: [f64; 6] = [3.0, -1.0, 3.0, -2.0, -2.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInstance {
    pub spec: PseudoChainSpec<f64>,
    pub block_index: usize,
    pub exact: f64,
    /// Magnitude under the reference relation, without `2^N`.
    pub reference: f64,
    pub normalized: f64,
    pub features: [f64; 6],
}

impl CalibrationInstance {
    /// Computes the exact coefficient in rational arithmetic.
    pub fn new(spec: &PseudoChainSpec<BigRational>) -> Result<Self> {
        let i = spec.first_oversized_block().ok_or_else(|| Error::InvalidArgument("no oversized block".into()))? + 1;
        if i < 2 || i >= spec.block_count() {
            return Err(Error::InvalidArgument("the oversized block must be interior".into()));
        }
        let model = spec.effective_model()?;
        let (px, _) = correlator_series_pair(&RationalGauge(spec), 2 * i)?;
        let (mx, _) = correlator_series_pair(&model, 2 * i)?;
        let exact = (px.coefficients[2 * i].clone() - mx.coefficients[2 * i].clone()).to_f64();

        let f = spec.map(Scalar::to_f64);
        let m = model.map(Scalar::to_f64);
        let n = f.blocks[i - 1].size as f64;
        let k = f.blocks[i - 1].intra_coupling;
        let left = m.couplings[i - 2];
        let right = m.couplings[i - 1];
        let field_sum: f64 = m.effective_fields[..i].iter().sum();
        let features = [left * left, right * right, n * n * k * k, n * k * k, n * k * field_sum, 1.0];
        let prod: f64 = m.couplings[..i - 1].iter().map(|j| j * j).product();
        let prefactor = prod * (n - 1.0) / n / factorial::<f64>(2 * i);
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let reference_bracket: f64 = features.iter().zip(REFERENCE_WEIGHTS).map(|(x, w)| x * w).sum();
        Ok(Self {
            spec: f,
            block_index: i,
            exact,
            reference: prefactor * reference_bracket,
            normalized: exact * sign / prefactor,
            features,
        })
    }
}

/// Random design: the oversized block sits at index 2 or 3, sizes 2..=4,
/// rational couplings and fields. Instances with a vanishing coefficient are
/// skipped so relative errors stay meaningful.
pub fn design(count: usize, seed: u64) -> Result<Vec<CalibrationInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.random_range(2..=3usize);
        let blocks_total = i + rng.random_range(1..=2usize);
        let size = rng.random_range(2..=4usize);
        let r = |rng: &mut ChaCha8Rng, lo: i64, hi: i64, den: i64| ratio::<BigRational>(rng.random_range(lo..=hi), den);
        let mut blocks = Vec::with_capacity(blocks_total);
        for b in 0..blocks_total {
            if b + 1 == i {
                let mut k = r(&mut rng, 1, 8, 8);
                if rng.random::<bool>() {
                    k = -k;
                }
                blocks.push(BlockSpec::new(size, r(&mut rng, -4, 4, 4), k));
            } else {
                blocks.push(BlockSpec::site(r(&mut rng, -4, 4, 4)));
            }
        }
        let couplings = (1..blocks_total).map(|_| r(&mut rng, 2, 8, 4)).collect();
        let spec = PseudoChainSpec::new(blocks, couplings)?;
        let inst = CalibrationInstance::new(&spec)?;
        if inst.normalized.abs() > 1e-2 {
            out.push(inst);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub fitted: Vec<f64>,
    pub training: Vec<CalibrationInstance>,
    pub held_out: Vec<CalibrationInstance>,
    pub training_max_relative: f64,
    pub held_out_max_relative: f64,
    /// Max relative deviation of the reference relation over all instances.
    pub reference_max_relative: f64,
    /// `g_X(0)` of every instance; a `2^N` prefactor would contradict it.
    pub zeroth_orders: Vec<f64>,
}

impl CalibrationReport {
    pub fn predict(&self, inst: &CalibrationInstance) -> f64 {
        inst.features.iter().zip(&self.fitted).map(|(x, w)| x * w).sum()
    }

    pub fn render_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Calibration of the even-order correlator coefficient\n");
        let _ = writeln!(
            s,
            "Generated by the acceptance suite. For a chain whose first block with `N > 1` is at index `i`, \
             `c` is the exact coefficient of `t^(2i)` in `g_X - g_X^model` (rational arithmetic). \
             It is normalized as `y = c (2i)! (-1)^i / (prod_(j<i) J_j^2 (N-1)/N)` and fitted linearly.\n"
        );
        let _ = writeln!(s, "## Fitted weights\n");
        let _ = writeln!(s, "| feature | fitted | reference bracket | status |");
        let _ = writeln!(s, "|---|---|---|---|");
        for (k, name) in FEATURES.iter().enumerate() {
            let fitted = self.fitted[k];
            let status = if (fitted - REFERENCE_WEIGHTS[k]).abs() < 1e-6 { "agrees" } else { "deviates" };
            let _ = writeln!(s, "| `{name}` | {fitted:.9} | {} | {status} |", REFERENCE_WEIGHTS[k]);
        }
        let _ = writeln!(s, "\n## Findings\n");
        let _ = writeln!(
            s,
            "- Fitted relation: `c = (-1)^i prod_(j<i) J_j^2 ((N-1)/N) [3 J_(i-1)^2 - J_i^2 + N K (N K - 2 sum_(j<=i) B'_j)] / (2i)!`."
        );
        let _ = writeln!(
            s,
            "- The `J` terms and the field-sum term agree with the reference bracket, with `B'` the effective fields."
        );
        let _ = writeln!(s, "- The `K^2` term is `N^2 K^2`, not `N (3N - 2) K^2`.");
        let _ = writeln!(s, "- The overall sign is `(-1)^i`; the reference form is an absolute value.");
        let max_zero = self.zeroth_orders.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        let _ = writeln!(
            s,
            "- Prefactor: there is no `2^N`. Every instance has `g_X(0) = 1` (max deviation {max_zero:.1e}), \
             and the fit needs no size-dependent factor beyond `(N-1)/N`."
        );
        let _ = writeln!(
            s,
            "- The reference relation without `2^N` misses the exact coefficient by up to {:.3e} (relative).",
            self.reference_max_relative
        );
        let _ = writeln!(s, "\n## Accuracy\n");
        let _ = writeln!(s, "- training instances: {}, max relative error {:.3e}", self.training.len(), self.training_max_relative);
        let _ = writeln!(s, "- held-out instances: {}, max relative error {:.3e}", self.held_out.len(), self.held_out_max_relative);
        let _ = writeln!(s, "\n## Instances\n");
        let _ = writeln!(s, "| set | i | sizes | K_i | exact c | fitted | reference (no 2^N) |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for (set, list) in [("train", &self.training), ("held-out", &self.held_out)] {
            for inst in list.iter() {
                let i = inst.block_index;
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let fitted = self.predict(inst) * inst.exact / inst.normalized;
                let _ = writeln!(
                    s,
                    "| {set} | {i} | {:?} | {} | {:.12e} | {:.12e} | {:.6e} |",
                    inst.spec.sizes(),
                    inst.spec.blocks[i - 1].intra_coupling,
                    inst.exact,
                    fitted,
                    inst.reference * sign
                );
            }
        }
        s
    }
}

fn max_relative(report_fit: &[f64], list: &[CalibrationInstance]) -> f64 {
    list.iter()
        .map(|inst| {
            let p: f64 = inst.features.iter().zip(report_fit).map(|(x, w)| x * w).sum();
            (p - inst.normalized).abs() / inst.normalized.abs()
        })
        .fold(0.0, f64::max)
}

/// Least-squares fit on `training`, evaluated on `held_out`.
pub fn calibrate(training: Vec<CalibrationInstance>, held_out: Vec<CalibrationInstance>) -> Result<CalibrationReport> {
    if training.len() < FEATURES.len() {
        return Err(Error::InvalidArgument(format!("need at least {} training instances", FEATURES.len())));
    }
    let a = DMatrix::from_fn(training.len(), FEATURES.len(), |r, c| training[r].features[c]);
    let y = DVector::from_iterator(training.len(), training.iter().map(|i| i.normalized));
    let svd = a.svd(true, true);
    if svd.singular_values.min() < 1e-10 * svd.singular_values.max() {
        return Err(Error::FitIllConditioned("calibration design is rank deficient".into()));
    }
    let fitted: Vec<f64> = svd.solve(&y, 0.0).map_err(|e| Error::FitIllConditioned(e.to_string()))?.iter().copied().collect();
    let all = training.iter().chain(&held_out);
    let reference_max_relative = all
        .clone()
        .map(|inst| {
            let sign = if inst.block_index % 2 == 0 { 1.0 } else { -1.0 };
            (inst.reference * sign - inst.exact).abs() / inst.exact.abs()
        })
        .fold(0.0, f64::max);
    let zeroth_orders = all
        .map(|inst| {
            let (gx, _) = correlator_series_pair(&RationalGauge(&inst.spec), 0)?;
            Ok(gx.coefficients[0])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationReport {
        training_max_relative: max_relative(&fitted, &training),
        held_out_max_relative: max_relative(&fitted, &held_out),
        fitted,
        training,
        held_out,
        reference_max_relative,
        zeroth_orders,
    })
}
