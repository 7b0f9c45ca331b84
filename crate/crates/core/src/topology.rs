//! Pseudo-chain and model-chain descriptions.
//!
//! A pseudo-chain is an ordered list of blocks. Block `i` holds `size` spins
//! that all feel the field `field`, are coupled to each other with
//! `intra_coupling`, and are coupled uniformly to every spin of block `i + 1`
//! with `inter_couplings[i] / sqrt(size_i * size_{i+1})`. The end blocks hold
//! one spin each.
//!
//! Block indices are zero-based throughout the crate. The number of blocks and
//! the number of physical spins are kept apart: `block_count()` vs
//! `spin_count()`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec<T> {
    #[serde(rename = "n")]
    pub size: usize,
    #[serde(rename = "B")]
    pub field: T,
    /// Ignored when `size == 1`.
    #[serde(rename = "K")]
    pub intra_coupling: T,
}

impl<T: Scalar> BlockSpec<T> {
    pub fn new(size: usize, field: T, intra_coupling: T) -> Self {
        Self { size, field, intra_coupling }
    }

    pub fn site(field: T) -> Self {
        Self { size: 1, field, intra_coupling: T::zero() }
    }

    /// Field seen by the block-symmetric one-excitation state.
    pub fn effective_field(&self) -> T {
        self.field.clone() + T::from_usize(self.size - 1) * self.intra_coupling.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoChainSpec<T> {
    pub blocks: Vec<BlockSpec<T>>,
    #[serde(rename = "J")]
    pub inter_couplings: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelChainSpec<T> {
    #[serde(rename = "J")]
    pub couplings: Vec<T>,
    #[serde(rename = "B")]
    pub effective_fields: Vec<T>,
}

fn check_finite<T: Scalar>(what: &str, values: impl IntoIterator<Item = T>) -> Result<()> {
    for (k, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteParameter(format!("{what}[{k}] = {v:?}")));
        }
    }
    Ok(())
}

impl<T: Scalar> PseudoChainSpec<T> {
    /// Builds and validates.
    pub fn new(blocks: Vec<BlockSpec<T>>, inter_couplings: Vec<T>) -> Result<Self> {
        let spec = Self { blocks, inter_couplings };
        spec.validate()?;
        Ok(spec)
    }

    /// A pseudo-chain with every block a single spin.
    pub fn linear(couplings: Vec<T>, fields: Vec<T>) -> Result<Self> {
        Self::new(fields.into_iter().map(BlockSpec::site).collect(), couplings)
    }

    /// Zero fields and intra-couplings, given block sizes.
    pub fn from_pattern(sizes: &[usize], couplings: Vec<T>) -> Result<Self> {
        let blocks = sizes.iter().map(|&n| BlockSpec::new(n, T::zero(), T::zero())).collect();
        Self::new(blocks, couplings)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if self.spin_count() < 2 {
            return Err(Error::OutOfRange("a pseudo-chain needs at least two spins".into()));
        }
        Ok(())
    }

    /// All invariants except the two-spin minimum; a lone spin is still a
    /// meaningful register for one-excitation experiments.
    pub fn validate_structure(&self) -> Result<()> {
        let n = self.blocks.len();
        if n == 0 {
            return Err(Error::LengthMismatch { what: "blocks", expected: 2, found: 0 });
        }
        if self.inter_couplings.len() + 1 != n {
            return Err(Error::LengthMismatch {
                what: "inter_couplings",
                expected: n - 1,
                found: self.inter_couplings.len(),
            });
        }
        if let Some(k) = self.blocks.iter().position(|b| b.size == 0) {
            return Err(Error::OutOfRange(format!("block {k} has size 0")));
        }
        let (first, last) = (self.blocks[0].size, self.blocks[n - 1].size);
        if first != 1 || last != 1 {
            return Err(Error::EndBlockNotSingleton { first, last });
        }
        check_finite("J", self.inter_couplings.iter().cloned())?;
        check_finite("B", self.blocks.iter().map(|b| b.field.clone()))?;
        check_finite("K", self.blocks.iter().map(|b| b.intra_coupling.clone()))?;
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn spin_count(&self) -> usize {
        self.blocks.iter().map(|b| b.size).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.size).collect()
    }

    pub fn is_linear(&self) -> bool {
        self.blocks.iter().all(|b| b.size == 1)
    }

    /// Index of the first block with more than one spin.
    pub fn first_oversized_block(&self) -> Option<usize> {
        self.blocks.iter().position(|b| b.size > 1)
    }

    /// The linear chain with identical one-excitation end-to-end dynamics.
    pub fn effective_model(&self) -> Result<ModelChainSpec<T>> {
        self.validate_structure()?;
        Ok(ModelChainSpec {
            couplings: self.inter_couplings.clone(),
            effective_fields: self.blocks.iter().map(BlockSpec::effective_field).collect(),
        })
    }

    pub fn site_map(&self) -> SiteMap {
        SiteMap::new(&self.sizes())
    }

    /// Block order reversed (site 1 and site M swap roles).
    pub fn mirrored(&self) -> Self {
        let mut blocks = self.blocks.clone();
        blocks.reverse();
        let mut inter_couplings = self.inter_couplings.clone();
        inter_couplings.reverse();
        Self { blocks, inter_couplings }
    }

    /// Copy with block `index` replaced.
    pub fn with_block(&self, index: usize, block: BlockSpec<T>) -> Result<Self> {
        if index >= self.blocks.len() {
            return Err(Error::OutOfRange(format!("block index {index}")));
        }
        let mut out = self.clone();
        out.blocks[index] = block;
        out.validate()?;
        Ok(out)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U) -> PseudoChainSpec<U> {
        PseudoChainSpec {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockSpec { size: b.size, field: f(&b.field), intra_coupling: f(&b.intra_coupling) })
                .collect(),
            inter_couplings: self.inter_couplings.iter().map(&f).collect(),
        }
    }
}

impl<T: Scalar> ModelChainSpec<T> {
    pub fn new(couplings: Vec<T>, effective_fields: Vec<T>) -> Result<Self> {
        let spec = Self { couplings, effective_fields };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.effective_fields.len();
        if n == 0 {
            return Err(Error::LengthMismatch { what: "effective_fields", expected: 1, found: 0 });
        }
        if self.couplings.len() + 1 != n {
            return Err(Error::LengthMismatch { what: "couplings", expected: n - 1, found: self.couplings.len() });
        }
        check_finite("J", self.couplings.iter().cloned())?;
        check_finite("B'", self.effective_fields.iter().cloned())?;
        Ok(())
    }

    pub fn site_count(&self) -> usize {
        self.effective_fields.len()
    }

    /// Coupling between sites `i` and `i + 1`, zero outside the chain.
    pub fn coupling(&self, i: isize) -> T {
        if i < 0 {
            return T::zero();
        }
        self.couplings.get(i as usize).cloned().unwrap_or_else(T::zero)
    }

    /// The same chain viewed as a pseudo-chain of single spins.
    pub fn as_pseudo_chain(&self) -> PseudoChainSpec<T> {
        PseudoChainSpec {
            blocks: self.effective_fields.iter().cloned().map(BlockSpec::site).collect(),
            inter_couplings: self.couplings.clone(),
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U) -> ModelChainSpec<U> {
        ModelChainSpec {
            couplings: self.couplings.iter().map(&f).collect(),
            effective_fields: self.effective_fields.iter().map(&f).collect(),
        }
    }
}

/// Block-major bijection between `(block, member)` and flat site indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteMap {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    block_of: Vec<usize>,
}

impl SiteMap {
    pub fn new(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut block_of = Vec::new();
        let mut acc = 0;
        for (b, &n) in sizes.iter().enumerate() {
            offsets.push(acc);
            acc += n;
            block_of.extend(std::iter::repeat_n(b, n));
        }
        Self { offsets, sizes: sizes.to_vec(), block_of }
    }

    pub fn spin_count(&self) -> usize {
        self.block_of.len()
    }

    pub fn flatten(&self, block: usize, member: usize) -> Option<usize> {
        (member < *self.sizes.get(block)?).then(|| self.offsets[block] + member)
    }

    pub fn unflatten(&self, site: usize) -> Option<(usize, usize)> {
        let block = *self.block_of.get(site)?;
        Some((block, site - self.offsets[block]))
    }

    pub fn block_of(&self, site: usize) -> usize {
        self.block_of[site]
    }

    /// Flat indices of the members of `block`.
    pub fn members(&self, block: usize) -> std::ops::Range<usize> {
        self.offsets[block]..self.offsets[block] + self.sizes[block]
    }
}
