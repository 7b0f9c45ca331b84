//! Excitation-number sectors, sparse operators and the chain Hamiltonians.
//!
//! Conventions: bit `a` of a basis mask is set when flat site `a` is excited
//! (`|1>`, `Z = -1`). Site 1 of the chain is bit 0, site M is bit M-1. The
//! Hamiltonians vanish on the fully magnetized state; an excitation on site
//! `a` costs the field of its block and hops with the bond amplitude.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::{AddAssign, Mul};

use num_complex::Complex64;
use num_traits::Zero;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{RealScalar, Scalar};
use crate::topology::{ModelChainSpec, PseudoChainSpec};

/// Largest sector that will be materialized.
pub const SECTOR_CAP: usize = 5_000_000;
/// Largest spin count for full-space operators.
pub const FULL_SPACE_CAP: usize = 22;

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// The `binomial(M, k)` masks with exactly `k` set bits, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectorBasis {
    spin_count: usize,
    excitation_count: usize,
    states: Vec<u64>,
}

impl SectorBasis {
    pub fn new(spin_count: usize, excitation_count: usize) -> Result<Self> {
        if spin_count > 63 || excitation_count > spin_count {
            return Err(Error::OutOfRange(format!(
                "sector (M = {spin_count}, k = {excitation_count})"
            )));
        }
        let dim = binomial(spin_count, excitation_count);
        if dim > SECTOR_CAP {
            return Err(Error::CapExceeded { what: "sector dimension", value: dim, cap: SECTOR_CAP });
        }
        let mut states = Vec::with_capacity(dim);
        if excitation_count == 0 {
            states.push(0);
        } else {
            // Gosper's hack walks k-subsets in increasing numeric order.
            let mut s: u64 = (1u64 << excitation_count) - 1;
            let limit = 1u64 << spin_count;
            while s < limit {
                states.push(s);
                let c = s & s.wrapping_neg();
                let r = s + c;
                s = (((r ^ s) >> 2) / c) | r;
            }
        }
        Ok(Self { spin_count, excitation_count, states })
    }

    pub fn spin_count(&self) -> usize {
        self.spin_count
    }

    pub fn excitation_count(&self) -> usize {
        self.excitation_count
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[u64] {
        &self.states
    }

    pub fn state(&self, index: usize) -> u64 {
        self.states[index]
    }

    /// Position of `mask` in the sector (combinatorial number system).
    pub fn rank(&self, mask: u64) -> Option<usize> {
        if mask.count_ones() as usize != self.excitation_count || (mask >> self.spin_count) != 0 {
            return None;
        }
        let mut r = 0;
        let mut m = mask;
        let mut j = 1;
        while m != 0 {
            let pos = m.trailing_zeros() as usize;
            r += binomial(pos, j);
            j += 1;
            m &= m - 1;
        }
        Some(r)
    }

    /// Inverse of [`rank`](Self::rank).
    pub fn unrank(&self, mut r: usize) -> Option<u64> {
        if r >= self.dim() {
            return None;
        }
        let mut mask = 0u64;
        for j in (1..=self.excitation_count).rev() {
            let mut pos = j - 1;
            while binomial(pos + 1, j) <= r {
                pos += 1;
            }
            r -= binomial(pos, j);
            mask |= 1 << pos;
        }
        Some(mask)
    }
}

/// Compressed-row sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Clone + Zero + AddAssign + Send + Sync> SparseOperator<T> {
    /// Sums duplicates; drops entries for which `drop` returns true.
    pub fn from_triplets_with(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, T)>,
        drop: impl Fn(&T) -> bool,
    ) -> Self {
        let mut per_row: Vec<BTreeMap<usize, T>> = vec![BTreeMap::new(); rows];
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            per_row[r].entry(c).and_modify(|x| *x += v.clone()).or_insert(v);
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in per_row {
            for (c, v) in row {
                if !drop(&v) {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { rows, cols, row_ptr, col_idx, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Square dimension; panics on rectangular operators.
    pub fn dim(&self) -> usize {
        assert_eq!(self.rows, self.cols, "operator is not square");
        self.rows
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, &T)> + '_ {
        (0..self.rows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |p| (r, self.col_idx[p], &self.values[p]))
        })
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.col_idx[span.clone()].binary_search(&col) {
            Ok(p) => self.values[span.start + p].clone(),
            Err(_) => T::zero(),
        }
    }

    /// `y = A x`.
    pub fn apply<V>(&self, x: &[V]) -> Vec<V>
    where
        V: Clone + Zero + AddAssign + Mul<T, Output = V> + Send + Sync,
    {
        assert_eq!(x.len(), self.cols, "vector length");
        let row = |r: usize| {
            let mut acc = V::zero();
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += x[self.col_idx[p]].clone() * self.values[p].clone();
            }
            acc
        };
        if self.nnz() > 1 << 16 {
            (0..self.rows).into_par_iter().map(row).collect()
        } else {
            (0..self.rows).map(row).collect()
        }
    }

    /// `y = A^T x`.
    pub fn apply_transpose<V>(&self, x: &[V]) -> Vec<V>
    where
        V: Clone + Zero + AddAssign + Mul<T, Output = V>,
    {
        assert_eq!(x.len(), self.rows, "vector length");
        let mut y = vec![V::zero(); self.cols];
        for (r, xr) in x.iter().enumerate() {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[p]] += xr.clone() * self.values[p].clone();
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets_with(
            self.cols,
            self.rows,
            self.entries().map(|(r, c, v)| (c, r, v.clone())).collect::<Vec<_>>(),
            |_| false,
        )
    }

    pub fn map<U: Clone + Zero + AddAssign + Send + Sync>(&self, f: impl Fn(&T) -> U) -> SparseOperator<U> {
        SparseOperator {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(f).collect(),
        }
    }
}

impl<T: Scalar> SparseOperator<T> {
    pub fn from_triplets(rows: usize, cols: usize, triplets: impl IntoIterator<Item = (usize, usize, T)>) -> Self {
        Self::from_triplets_with(rows, cols, triplets, Scalar::is_negligible)
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        self.entries()
            .map(|(r, c, v)| (v.clone() - self.get(c, r)).to_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.entries() {
            m[(r, c)] = v.to_f64();
        }
        m
    }
}

impl SparseOperator<Complex64> {
    /// Largest `|A_ij - conj(A_ji)|`.
    pub fn hermiticity_defect(&self) -> f64 {
        self.entries().map(|(r, c, v)| (v - self.get(c, r).conj()).norm()).fold(0.0, f64::max)
    }
}

/// Coordinate text dump: a `# dimension R C` header, then `row col re im` per entry.
pub fn write_operator<T: Scalar>(op: &SparseOperator<T>, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "# dimension {} {}", op.rows(), op.cols())?;
    for (r, c, v) in op.entries() {
        writeln!(out, "{r} {c} {:e} 0", v.to_f64())?;
    }
    Ok(())
}

/// A directed excitation hop `from -> to`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hop<T> {
    pub from: usize,
    pub to: usize,
    pub amplitude: T,
}

/// What a Hamiltonian builder needs to know about a chain.
pub trait ChainGeometry<T> {
    fn spin_count(&self) -> usize;
    /// Energy of an excitation on each flat site.
    fn site_fields(&self) -> Vec<T>;
    /// Every directed hop. Hermitian geometries list both directions.
    fn hops(&self) -> Vec<Hop<T>>;
}

fn symmetric_hops<T: Clone>(pairs: Vec<(usize, usize, T)>) -> Vec<Hop<T>> {
    pairs
        .into_iter()
        .flat_map(|(a, b, amp)| {
            [Hop { from: a, to: b, amplitude: amp.clone() }, Hop { from: b, to: a, amplitude: amp }]
        })
        .collect()
}

impl<T: Scalar> ChainGeometry<T> for ModelChainSpec<T> {
    fn spin_count(&self) -> usize {
        self.site_count()
    }

    fn site_fields(&self) -> Vec<T> {
        self.effective_fields.clone()
    }

    fn hops(&self) -> Vec<Hop<T>> {
        symmetric_hops(self.couplings.iter().enumerate().map(|(i, j)| (i, i + 1, j.clone())).collect())
    }
}

fn pseudo_fields<T: Scalar>(spec: &PseudoChainSpec<T>) -> Vec<T> {
    spec.blocks.iter().flat_map(|b| std::iter::repeat_n(b.field.clone(), b.size)).collect()
}

fn intra_pairs<T: Scalar>(spec: &PseudoChainSpec<T>) -> Vec<(usize, usize, T)> {
    let map = spec.site_map();
    let mut out = Vec::new();
    for (b, block) in spec.blocks.iter().enumerate() {
        if block.size < 2 || block.intra_coupling.is_zero() {
            continue;
        }
        let members: Vec<usize> = map.members(b).collect();
        for (x, &a) in members.iter().enumerate() {
            for &c in &members[x + 1..] {
                out.push((a, c, block.intra_coupling.clone()));
            }
        }
    }
    out
}

impl<T: RealScalar> ChainGeometry<T> for PseudoChainSpec<T> {
    fn spin_count(&self) -> usize {
        PseudoChainSpec::spin_count(self)
    }

    fn site_fields(&self) -> Vec<T> {
        pseudo_fields(self)
    }

    fn hops(&self) -> Vec<Hop<T>> {
        let map = self.site_map();
        let mut pairs = intra_pairs(self);
        for (b, j) in self.inter_couplings.iter().enumerate() {
            let (n1, n2) = (self.blocks[b].size, self.blocks[b + 1].size);
            let amp = *j / (T::from_usize(n1) * T::from_usize(n2)).sqrt();
            for a in map.members(b) {
                for c in map.members(b + 1) {
                    pairs.push((a, c, amp));
                }
            }
        }
        symmetric_hops(pairs)
    }
}

/// A pseudo-chain Hamiltonian conjugated by the positive diagonal matrix
/// `D|s> = prod_{a excited} sqrt(N_block(a)) |s>`.
///
/// Inter-block hops then carry `J_b / N_source` instead of
/// `J_b / sqrt(N_b N_{b+1})`, so rational inputs give rational matrices. The
/// result is not symmetric, but it is similar to the physical Hamiltonian and
/// `D` commutes with every operator on a single-spin end block. Diagonal
/// matrix elements of powers, moments of basis states and traces involving
/// end-site operators are therefore unchanged.
#[derive(Debug, Clone, Copy)]
pub struct RationalGauge<'a, T>(pub &'a PseudoChainSpec<T>);

impl<T: Scalar> ChainGeometry<T> for RationalGauge<'_, T> {
    fn spin_count(&self) -> usize {
        self.0.spin_count()
    }

    fn site_fields(&self) -> Vec<T> {
        pseudo_fields(self.0)
    }

    fn hops(&self) -> Vec<Hop<T>> {
        let spec = self.0;
        let map = spec.site_map();
        let mut hops = symmetric_hops(intra_pairs(spec));
        for (b, j) in spec.inter_couplings.iter().enumerate() {
            let (n1, n2) = (T::from_usize(spec.blocks[b].size), T::from_usize(spec.blocks[b + 1].size));
            for a in map.members(b) {
                for c in map.members(b + 1) {
                    hops.push(Hop { from: a, to: c, amplitude: j.clone() / n1.clone() });
                    hops.push(Hop { from: c, to: a, amplitude: j.clone() / n2.clone() });
                }
            }
        }
        hops
    }
}

fn hamiltonian_on<T: Scalar, G: ChainGeometry<T> + ?Sized>(
    geom: &G,
    states: &[u64],
    rank: impl Fn(u64) -> usize,
) -> SparseOperator<T> {
    let fields = geom.site_fields();
    let hops: Vec<Hop<T>> = geom.hops().into_iter().filter(|h| !h.amplitude.is_zero()).collect();
    let mut triplets = Vec::new();
    for (col, &s) in states.iter().enumerate() {
        let mut diag = T::zero();
        let mut m = s;
        while m != 0 {
            let a = m.trailing_zeros() as usize;
            diag = diag + fields[a].clone();
            m &= m - 1;
        }
        triplets.push((col, col, diag));
        for h in &hops {
            if s >> h.from & 1 == 1 && s >> h.to & 1 == 0 {
                let t = s ^ (1 << h.from) ^ (1 << h.to);
                triplets.push((rank(t), col, h.amplitude.clone()));
            }
        }
    }
    let dim = states.len();
    SparseOperator::from_triplets(dim, dim, triplets)
}

/// The Hamiltonian restricted to the `excitations` sector, in [`SectorBasis`] order.
pub fn build_hamiltonian<T: Scalar, G: ChainGeometry<T> + ?Sized>(
    geom: &G,
    excitations: usize,
) -> Result<SparseOperator<T>> {
    let basis = SectorBasis::new(geom.spin_count(), excitations)?;
    Ok(hamiltonian_on(geom, basis.states(), |m| basis.rank(m).expect("hop preserves excitation count")))
}

/// The Hamiltonian on all `2^M` states, ordered by mask value.
pub fn build_full_hamiltonian<T: Scalar, G: ChainGeometry<T> + ?Sized>(geom: &G) -> Result<SparseOperator<T>> {
    let m = geom.spin_count();
    if m > FULL_SPACE_CAP {
        return Err(Error::CapExceeded { what: "spin count for full space", value: m, cap: FULL_SPACE_CAP });
    }
    let states: Vec<u64> = (0..1u64 << m).collect();
    Ok(hamiltonian_on(geom, &states, |s| s as usize))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Pauli {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EndSite {
    First,
    Last,
}

/// A single-site Pauli operator on site 1 or site M.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EndOperator {
    pub spin_count: usize,
    pub pauli: Pauli,
    pub site: EndSite,
}

impl EndOperator {
    pub fn new(spin_count: usize, pauli: Pauli, site: EndSite) -> Self {
        Self { spin_count, pauli, site }
    }

    pub fn bit(&self) -> usize {
        match self.site {
            EndSite::First => 0,
            EndSite::Last => self.spin_count - 1,
        }
    }

    /// `<t|P|s>` for basis masks `s`, returning `(t, amplitude)`.
    pub fn act(&self, s: u64) -> (u64, Complex64) {
        let bit = self.bit();
        let excited = s >> bit & 1 == 1;
        match self.pauli {
            Pauli::X => (s ^ (1 << bit), Complex64::new(1.0, 0.0)),
            // Y|0> = i|1>, Y|1> = -i|0>
            Pauli::Y => (s ^ (1 << bit), Complex64::new(0.0, if excited { -1.0 } else { 1.0 })),
            Pauli::Z => (s, Complex64::new(if excited { -1.0 } else { 1.0 }, 0.0)),
        }
    }

    /// The block mapping sector `from` to sector `to`; zero unless
    /// `to = from ± 1` (X, Y) or `to = from` (Z).
    pub fn block(&self, from: usize, to: usize) -> Result<SparseOperator<Complex64>> {
        let src = SectorBasis::new(self.spin_count, from)?;
        let dst = SectorBasis::new(self.spin_count, to)?;
        let triplets: Vec<_> = src
            .states()
            .iter()
            .enumerate()
            .filter_map(|(c, &s)| {
                let (t, amp) = self.act(s);
                dst.rank(t).map(|r| (r, c, amp))
            })
            .collect();
        Ok(SparseOperator::from_triplets_with(dst.dim(), src.dim(), triplets, |v| v.norm() < 1e-15))
    }

    pub fn full(&self) -> Result<SparseOperator<Complex64>> {
        if self.spin_count > FULL_SPACE_CAP {
            return Err(Error::CapExceeded { what: "spin count for full space", value: self.spin_count, cap: FULL_SPACE_CAP });
        }
        let dim = 1usize << self.spin_count;
        let triplets = (0..dim as u64).map(|s| {
            let (t, amp) = self.act(s);
            (t as usize, s as usize, amp)
        });
        Ok(SparseOperator::from_triplets_with(dim, dim, triplets, |v| v.norm() < 1e-15))
    }
}
