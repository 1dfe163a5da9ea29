//! Activation-aware importance scores and mask generation.
//!
//! `I_ij = |W_ij| · ‖X_j‖₂`, where `‖X_j‖₂` is the norm of input channel `j`
//! over the calibration positions. Masks are `true` where a weight is kept.

mod pipeline;

pub use pipeline::{
    matched_fixed_budgets, run_atv_pipeline, BlockReport, BudgetMode, LayerReport,
    PipelineConfig, Propagation, PruneOutcome, PruneReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{AtvError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsityPattern {
    Unstructured { rho: f64 },
    SemiStructured { n: usize, m: usize },
}

impl SparsityPattern {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsityPattern::Unstructured { rho } if !(0.0..=1.0).contains(&rho) => Err(
                AtvError::InvalidConfig(format!("sparsity {rho} outside [0, 1]")),
            ),
            SparsityPattern::SemiStructured { n, m } if n == 0 || n >= m => Err(
                AtvError::InvalidConfig(format!("N:M pattern {n}:{m} needs 1 <= N < M")),
            ),
            _ => Ok(()),
        }
    }

    /// `true` when the pattern prunes nothing.
    pub fn is_noop(&self) -> bool {
        matches!(*self, SparsityPattern::Unstructured { rho } if rho == 0.0)
    }
}

impl std::fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            SparsityPattern::Unstructured { rho } => write!(f, "{rho}"),
            SparsityPattern::SemiStructured { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

/// Set of weights whose scores are ranked against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonGroup {
    PerLayer,
    #[default]
    PerOutputRow,
}

/// Per-weight importance, congruent with a layer's weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ImportanceScores {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AtvError::DimensionMismatch(format!(
                "{} scores for a {rows}x{cols} layer",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Boolean keep-mask congruent with a weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl PruneMask {
    pub fn filled(rows: usize, cols: usize, keep: bool) -> Self {
        Self {
            rows,
            cols,
            keep: vec![keep; rows * cols],
        }
    }

    pub fn from_keep(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(AtvError::DimensionMismatch(format!(
                "{} mask entries for a {rows}x{cols} layer",
                keep.len()
            )));
        }
        Ok(Self { rows, cols, keep })
    }

    /// Mask of the nonzero entries of `w`.
    pub fn nonzero(w: &Matrix) -> Self {
        Self {
            rows: w.rows(),
            cols: w.cols(),
            keep: w.data().iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.len() - self.kept_count()
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Fraction of entries pruned.
    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            0.0
        } else {
            self.pruned_count() as f64 / self.keep.len() as f64
        }
    }

    /// Zeroes the pruned coordinates of `w`.
    pub fn apply(&self, w: &mut Matrix) {
        assert_eq!(self.shape(), w.shape(), "mask/weight shape");
        for (v, &k) in w.data_mut().iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

/// `I_ij = |W_ij| · norms[j]`.
pub fn wanda_scores(w: &Matrix, norms: &[f64]) -> Result<ImportanceScores> {
    if norms.len() != w.cols() {
        return Err(AtvError::DimensionMismatch(format!(
            "{} channel norms for a layer with {} inputs",
            norms.len(),
            w.cols()
        )));
    }
    let mut data = Vec::with_capacity(w.len());
    for row in w.row_iter() {
        data.extend(row.iter().zip(norms).map(|(&x, &n)| f64::from(x).abs() * n));
    }
    ImportanceScores::from_vec(w.rows(), w.cols(), data)
}

/// Number of entries to prune from a group of `size`: `floor(ρ·size)`.
///
/// A `1e-9` nudge absorbs binary representation error so that, e.g.,
/// `0.29 × 100` prunes 29 rather than 28.
pub fn prune_count(rho: f64, size: usize) -> usize {
    (((rho * size as f64) + 1e-9).floor() as usize).min(size)
}

/// Prunes the `floor(ρ·size)` lowest scores within each comparison group.
/// Among equal scores the larger flat index is pruned first.
pub fn mask_unstructured(
    scores: &ImportanceScores,
    rho: f64,
    group: ComparisonGroup,
) -> Result<PruneMask> {
    SparsityPattern::Unstructured { rho }.validate()?;
    let (rows, cols) = (scores.rows, scores.cols);
    let mut keep = vec![true; rows * cols];
    let mut prune_lowest = |offset: usize, values: &[f64]| {
        let k = prune_count(rho, values.len());
        if k == 0 {
            return;
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        // Ascending score; among ties, larger index first.
        let cmp = |a: &usize, b: &usize| values[*a].total_cmp(&values[*b]).then(b.cmp(a));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        for &i in &order[..k] {
            keep[offset + i] = false;
        }
    };
    match group {
        ComparisonGroup::PerLayer => prune_lowest(0, &scores.data),
        ComparisonGroup::PerOutputRow => {
            for i in 0..rows {
                prune_lowest(i * cols, scores.row(i));
            }
        }
    }
    PruneMask::from_keep(rows, cols, keep)
}

/// Keeps the `n` highest scores in every run of `m` consecutive input
/// channels of each row. Among equal scores the smaller column is kept.
pub fn mask_nm(scores: &ImportanceScores, n: usize, m: usize) -> Result<PruneMask> {
    SparsityPattern::SemiStructured { n, m }.validate()?;
    let (rows, cols) = (scores.rows, scores.cols);
    if cols % m != 0 {
        return Err(AtvError::InvalidConfig(format!(
            "layer input width {cols} is not divisible by M = {m}"
        )));
    }
    let mut keep = vec![false; rows * cols];
    let mut idx: Vec<usize> = Vec::with_capacity(m);
    for i in 0..rows {
        let row = scores.row(i);
        for g in (0..cols).step_by(m) {
            idx.clear();
            idx.extend(g..g + m);
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &j in &idx[..n] {
                keep[i * cols + j] = true;
            }
        }
    }
    PruneMask::from_keep(rows, cols, keep)
}

/// Dispatches on the sparsity pattern.
pub fn generate_mask(
    scores: &ImportanceScores,
    pattern: SparsityPattern,
    group: ComparisonGroup,
) -> Result<PruneMask> {
    match pattern {
        SparsityPattern::Unstructured { rho } => mask_unstructured(scores, rho, group),
        SparsityPattern::SemiStructured { n, m } => mask_nm(scores, n, m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn scores(rows: &[&[f64]]) -> ImportanceScores {
        let cols = rows[0].len();
        ImportanceScores::from_vec(rows.len(), cols, rows.concat()).unwrap()
    }

    fn random_scores(rng: &mut Rng, r: usize, c: usize) -> ImportanceScores {
        let data = (0..r * c).map(|_| rng.next_f64()).collect();
        ImportanceScores::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn wanda_hand_case() {
        let w = Matrix::from_rows(&[[2.0f32, -1.0], [0.5, 3.0]]).unwrap();
        let s = wanda_scores(&w, &[1.0, 2.0]).unwrap();
        assert_eq!(s.data(), &[2.0, 2.0, 0.5, 6.0]);
        let z = wanda_scores(&w, &[0.0, 0.0]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(wanda_scores(&w, &[1.0]).is_err());
    }

    #[test]
    fn wanda_matches_elementwise_recompute() {
        let mut rng = Rng::new(1);
        let w = Matrix::from_fn(32, 32, |_, _| rng.normal() as f32);
        let norms: Vec<f64> = (0..32).map(|_| rng.next_f64() * 3.0).collect();
        let s = wanda_scores(&w, &norms).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(s.get(i, j), (w.get(i, j) as f64).abs() * norms[j]);
            }
        }
    }

    #[test]
    fn unstructured_hand_case_with_tie() {
        let s = scores(&[&[2.0, 2.0], &[0.5, 6.0]]);
        let m = mask_unstructured(&s, 0.5, ComparisonGroup::PerLayer).unwrap();
        // 0.5 goes first, then the tie at 2.0 prunes flat index 1.
        assert_eq!(m.keep(), &[true, false, false, true]);
    }

    #[test]
    fn unstructured_boundaries() {
        let mut rng = Rng::new(2);
        let s = random_scores(&mut rng, 4, 6);
        for g in [ComparisonGroup::PerLayer, ComparisonGroup::PerOutputRow] {
            assert_eq!(mask_unstructured(&s, 0.0, g).unwrap().pruned_count(), 0);
            assert_eq!(mask_unstructured(&s, 1.0, g).unwrap().kept_count(), 0);
        }
        assert!(mask_unstructured(&s, 1.5, ComparisonGroup::PerLayer).is_err());
    }

    fn full_sort_oracle(values: &[f64], rho: f64) -> Vec<bool> {
        let k = prune_count(rho, values.len());
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| {
            values[a]
                .partial_cmp(&values[b])
                .unwrap()
                .then(b.cmp(&a))
        });
        let mut keep = vec![true; values.len()];
        for &i in &order[..k] {
            keep[i] = false;
        }
        keep
    }

    #[test]
    fn unstructured_matches_full_sort_oracle() {
        let mut rng = Rng::new(3);
        let s = random_scores(&mut rng, 64, 64);
        let per_layer = mask_unstructured(&s, 0.37, ComparisonGroup::PerLayer).unwrap();
        assert_eq!(per_layer.keep(), full_sort_oracle(s.data(), 0.37).as_slice());
        assert_eq!(per_layer.pruned_count(), (0.37f64 * 4096.0).floor() as usize);
        let per_row = mask_unstructured(&s, 0.37, ComparisonGroup::PerOutputRow).unwrap();
        for i in 0..64 {
            let expect = full_sort_oracle(s.row(i), 0.37);
            assert_eq!(&per_row.keep()[i * 64..(i + 1) * 64], expect.as_slice());
            assert_eq!(expect.iter().filter(|k| !**k).count(), 23);
        }
    }

    #[test]
    fn nm_hand_cases() {
        let s = scores(&[&[5.0, 1.0, 4.0, 2.0]]);
        assert_eq!(mask_nm(&s, 2, 4).unwrap().keep(), &[true, false, true, false]);
        let eq = scores(&[&[1.0; 8]]);
        assert_eq!(
            mask_nm(&eq, 2, 4).unwrap().keep(),
            &[true, true, false, false, true, true, false, false]
        );
        assert!(mask_nm(&scores(&[&[1.0; 6]]), 2, 4).is_err());
        assert!(mask_nm(&s, 4, 4).is_err());
    }

    #[test]
    fn nm_matches_per_group_sort_oracle() {
        let mut rng = Rng::new(4);
        let s = random_scores(&mut rng, 16, 32);
        let mask = mask_nm(&s, 4, 8).unwrap();
        for i in 0..16 {
            for g in 0..4 {
                let vals: Vec<f64> = s.row(i)[g * 8..(g + 1) * 8].to_vec();
                let mut sorted = vals.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let threshold = sorted[3];
                for (c, v) in vals.iter().enumerate() {
                    assert_eq!(mask.is_kept(i, g * 8 + c), *v >= threshold);
                }
            }
        }
        assert_eq!(mask.sparsity(), 0.5);
    }

    proptest! {
        #[test]
        fn norm_scaling_leaves_mask_unchanged(seed in any::<u64>(), c in 0.001f64..1000.0) {
            let mut rng = Rng::new(seed);
            let w = Matrix::from_fn(8, 16, |_, _| rng.normal() as f32);
            let norms: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
            let scaled: Vec<f64> = norms.iter().map(|n| n * c).collect();
            for g in [ComparisonGroup::PerLayer, ComparisonGroup::PerOutputRow] {
                let a = mask_unstructured(&wanda_scores(&w, &norms).unwrap(), 0.5, g).unwrap();
                let b = mask_unstructured(&wanda_scores(&w, &scaled).unwrap(), 0.5, g).unwrap();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn higher_sparsity_keeps_a_subset(seed in any::<u64>(), r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let mut rng = Rng::new(seed);
            let s = random_scores(&mut rng, 6, 10);
            for g in [ComparisonGroup::PerLayer, ComparisonGroup::PerOutputRow] {
                let a = mask_unstructured(&s, lo, g).unwrap();
                let b = mask_unstructured(&s, hi, g).unwrap();
                for (ka, kb) in a.keep().iter().zip(b.keep()) {
                    prop_assert!(!*kb || *ka);
                }
            }
        }
    }
}
