#![allow(dead_code)]

use proptest::prelude::*;
use pseudochain::{BlockSpec, ModelChainSpec, PseudoChainSpec};

/// Pseudo-chains with `2..=max_blocks` blocks, interior sizes up to
/// `max_size`, singleton ends and parameters in `[-range, range]`.
pub fn pseudo_chain(max_blocks: usize, max_size: usize, range: f64) -> impl Strategy<Value = PseudoChainSpec<f64>> {
    (2..=max_blocks)
        .prop_flat_map(move |n| {
            (
                prop::collection::vec((1..=max_size, -range..range, -range..range), n),
                prop::collection::vec(-range..range, n - 1),
            )
        })
        .prop_map(|(blocks, couplings)| {
            let n = blocks.len();
            let blocks = blocks
                .into_iter()
                .enumerate()
                .map(|(b, (size, field, k))| {
                    let size = if b == 0 || b + 1 == n { 1 } else { size };
                    BlockSpec::new(size, field, if size > 1 { k } else { 0.0 })
                })
                .collect();
            PseudoChainSpec::new(blocks, couplings).unwrap()
        })
}

pub fn linear_chain(max_sites: usize, range: f64) -> impl Strategy<Value = ModelChainSpec<f64>> {
    (1..=max_sites)
        .prop_flat_map(move |n| (prop::collection::vec(-range..range, n - 1), prop::collection::vec(-range..range, n)))
        .prop_map(|(j, b)| ModelChainSpec::new(j, b).unwrap())
}

pub fn max_energy(spec: &PseudoChainSpec<f64>) -> f64 {
    spec.inter_couplings
        .iter()
        .map(|j| j.abs())
        .chain(spec.blocks.iter().flat_map(|b| [b.field.abs(), b.intra_coupling.abs()]))
        .fold(0.1, f64::max)
}
