//! Hard and differentiable odd-even sorting networks.
//!
//! The relaxed network replaces every conditional swap of two neighbours
//! `(d_i, d_j)` with the arctan-sigmoid mixture
//!
//! ```text
//! d'_i = d_i f(d_j - d_i) + d_j f(d_i - d_j)
//! d'_j = d_i f(d_i - d_j) + d_j f(d_j - d_i)
//! f(x) = atan(beta * x) / pi + 0.5
//! ```
//!
//! Step `s` (1-based) compares pairs starting at index 0 when `s` is odd and
//! at index 1 when `s` is even; a list of length `n` always runs `n` steps.
//! Swap probabilities of a step are computed from the running (already
//! partially mixed) values entering that step.

use std::f64::consts::PI;

use crate::error::{GrocoError, Result};

/// Inverse temperature and list length of a relaxed network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SortConfig {
    beta: f64,
    length: usize,
}

impl SortConfig {
    pub fn new(beta: f64, length: usize) -> Result<Self> {
        check_beta(beta)?;
        if length == 0 {
            return Err(GrocoError::invalid("sort length must be at least 1"));
        }
        Ok(SortConfig { beta, length })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn length(&self) -> usize {
        self.length
    }
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(GrocoError::invalid(format!(
            "inverse temperature must be positive and finite, got {beta}"
        )))
    }
}

/// Dense `n x n` relaxed permutation matrix, row-major.
///
/// Row index is the output position, column index the input element.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPermutation {
    n: usize,
    entries: Vec<f64>,
}

impl RelaxedPermutation {
    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        RelaxedPermutation { n, entries }
    }

    /// Build from row-major entries; `entries.len()` must be a square.
    pub fn from_rows(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(GrocoError::invalid(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                entries.len()
            )));
        }
        Ok(RelaxedPermutation { n, entries })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.n..(row + 1) * self.n]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|c| (0..self.n).map(|r| self.get(r, c)).sum())
            .collect()
    }

    /// Entries in `[0, 1]` and all row and column sums within `tol` of one.
    pub fn is_doubly_stochastic(&self, tol: f64) -> bool {
        self.entries.iter().all(|&p| (0.0..=1.0).contains(&p))
            && self
                .row_sums()
                .into_iter()
                .chain(self.col_sums())
                .all(|s| (s - 1.0).abs() <= tol)
    }

    /// `self * values`.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| self.row(r).iter().zip(values).map(|(p, v)| p * v).sum())
            .collect()
    }

    /// Largest absolute entry difference.
    pub fn max_abs_diff(&self, other: &RelaxedPermutation) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mix rows `i` and `j` in place: left-multiplication by a swap matrix
    /// with diagonal `stay` and off-diagonal `cross`.
    fn mix_rows(&mut self, i: usize, j: usize, stay: f64, cross: f64) {
        let n = self.n;
        for c in 0..n {
            let a = self.entries[i * n + c];
            let b = self.entries[j * n + c];
            self.entries[i * n + c] = stay * a + cross * b;
            self.entries[j * n + c] = cross * a + stay * b;
        }
    }
}

/// Result of a hard sort: `mapping[input] = output position`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardPermutation {
    mapping: Vec<usize>,
}

impl HardPermutation {
    /// Validate that `mapping` is a bijection on `0..n`.
    pub fn from_mapping(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(GrocoError::invalid(format!(
                    "mapping {mapping:?} is not a permutation"
                )));
            }
        }
        Ok(HardPermutation { mapping })
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    /// Place every input at its output position.
    pub fn apply<T: Copy>(&self, input: &[T]) -> Vec<T> {
        let mut out = input.to_vec();
        for (src, &dst) in self.mapping.iter().enumerate() {
            out[dst] = input[src];
        }
        out
    }

    /// 0/1 matrix with `P[position][input] = 1`.
    pub fn to_matrix(&self) -> RelaxedPermutation {
        let n = self.mapping.len();
        let mut entries = vec![0.0; n * n];
        for (src, &dst) in self.mapping.iter().enumerate() {
            entries[dst * n + src] = 1.0;
        }
        RelaxedPermutation { n, entries }
    }
}

/// `atan(beta * x) / pi + 0.5`.
pub fn sigmoid_f(x: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if !x.is_finite() {
        return Err(GrocoError::invalid(format!("non-finite argument {x}")));
    }
    Ok(f_unchecked(x, beta))
}

#[inline]
pub(crate) fn f_unchecked(x: f64, beta: f64) -> f64 {
    (beta * x).atan() / PI + 0.5
}

/// Relaxed conditional swap of an ordered pair `(d_i, d_j)`, `i < j`.
pub fn soft_swap(d_i: f64, d_j: f64, beta: f64) -> Result<(f64, f64)> {
    let stay = sigmoid_f(d_j - d_i, beta)?;
    let cross = sigmoid_f(d_i - d_j, beta)?;
    Ok((d_i * stay + d_j * cross, d_i * cross + d_j * stay))
}

/// `n x n` swap matrix for positions `i < j` (0-based).
pub fn swap_matrix(
    n: usize,
    i: usize,
    j: usize,
    d_i: f64,
    d_j: f64,
    beta: f64,
) -> Result<RelaxedPermutation> {
    if i >= j || j >= n {
        return Err(GrocoError::invalid(format!(
            "swap indices ({i}, {j}) invalid for n = {n}"
        )));
    }
    let stay = sigmoid_f(d_j - d_i, beta)?;
    let cross = sigmoid_f(d_i - d_j, beta)?;
    let mut p = RelaxedPermutation::identity(n);
    p.entries[i * n + i] = stay;
    p.entries[j * n + j] = stay;
    p.entries[i * n + j] = cross;
    p.entries[j * n + i] = cross;
    Ok(p)
}

/// First 0-based index compared at 1-based step `s`.
#[inline]
pub fn step_offset(step: usize) -> usize {
    if step % 2 == 1 {
        0
    } else {
        1
    }
}

/// Adjacent pairs `(i, i + 1)` compared at 1-based step `s` of a length-`n` network.
pub fn step_pairs(n: usize, step: usize) -> impl Iterator<Item = (usize, usize)> {
    (step_offset(step)..n.saturating_sub(1))
        .step_by(2)
        .map(|i| (i, i + 1))
}

/// Permutation matrix of one odd-even step given the values entering it.
pub fn step_matrix(values: &[f64], step: usize, beta: f64) -> Result<RelaxedPermutation> {
    let n = values.len();
    if step == 0 || step > n {
        return Err(GrocoError::invalid(format!(
            "step {step} out of range 1..={n}"
        )));
    }
    check_values(values)?;
    check_beta(beta)?;
    let mut p = RelaxedPermutation::identity(n);
    for (i, j) in step_pairs(n, step) {
        let stay = f_unchecked(values[j] - values[i], beta);
        let cross = f_unchecked(values[i] - values[j], beta);
        p.entries[i * n + i] = stay;
        p.entries[j * n + j] = stay;
        p.entries[i * n + j] = cross;
        p.entries[j * n + i] = cross;
    }
    Ok(p)
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(GrocoError::invalid("cannot sort an empty list"));
    }
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(GrocoError::invalid(format!(
            "non-finite value {v} at index {i}"
        )));
    }
    Ok(())
}

/// Output of the relaxed network.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSort {
    pub sorted: Vec<f64>,
    pub permutation: RelaxedPermutation,
}

/// Run the relaxed odd-even network for `values.len()` steps.
///
/// The permutation is accumulated as `P = P_n ... P_1` by mixing rows in
/// place, which is exactly left-multiplication by each step matrix.
pub fn diff_sort(values: &[f64], beta: f64) -> Result<SoftSort> {
    check_values(values)?;
    check_beta(beta)?;
    let n = values.len();
    let mut running = values.to_vec();
    let mut perm = RelaxedPermutation::identity(n);
    for step in 1..=n {
        for (i, j) in step_pairs(n, step) {
            let (a, b) = (running[i], running[j]);
            let stay = f_unchecked(b - a, beta);
            let cross = f_unchecked(a - b, beta);
            running[i] = a * stay + b * cross;
            running[j] = a * cross + b * stay;
            perm.mix_rows(i, j, stay, cross);
        }
    }
    Ok(SoftSort {
        sorted: running,
        permutation: perm,
    })
}

/// Hard odd-even sort; stable because only strictly inverted neighbours swap.
pub fn hard_sort(values: &[f64]) -> Result<(Vec<f64>, HardPermutation)> {
    check_values(values)?;
    let n = values.len();
    // order[pos] = original index currently at pos
    let mut order: Vec<usize> = (0..n).collect();
    for step in 1..=n {
        for (i, j) in step_pairs(n, step) {
            if values[order[i]] > values[order[j]] {
                order.swap(i, j);
            }
        }
    }
    let mut mapping = vec![0; n];
    for (pos, &src) in order.iter().enumerate() {
        mapping[src] = pos;
    }
    let sorted = order.iter().map(|&i| values[i]).collect();
    Ok((sorted, HardPermutation { mapping }))
}
