//! Roadside direction scores, ego interest weights and the dual-threshold
//! direction mask.
//!
//! For sector `i` with roadside score `S_i` and interest `I_i`:
//!
//! ```text
//! M_i = max( H(S_i I_i / sum_j S_j I_j - sigma1), H(S_i I_i - sigma2) )
//! ```
//!
//! where `H(x)` is 1 for `x > 0` and 0 otherwise. An all-zero weighted sum
//! disables the relative term.

use serde::{Deserialize, Serialize};

use crate::geometry::SectorPartition;
use crate::grid::GridSpec;

/// Default absolute threshold, in vehicles.
pub const DEFAULT_SIGMA2: f64 = 5.0;

/// Default relative threshold: half of a uniform share.
pub fn default_sigma1(n_dir: usize) -> f64 {
    1.0 / (2.0 * n_dir as f64)
}

pub fn heaviside(x: f64) -> u8 {
    u8::from(x > 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScores {
    scores: Vec<f64>,
    interest: Vec<f64>,
}

impl DirectionScores {
    /// Negative scores are floored at zero and interest weights are clamped to `[0, 1]`.
    ///
    /// Panics if the two vectors differ in length or are empty.
    pub fn new(scores: Vec<f64>, interest: Vec<f64>) -> Self {
        assert_eq!(
            scores.len(),
            interest.len(),
            "scores and interest weights must cover the same sectors"
        );
        assert!(!scores.is_empty(), "at least one direction is required");
        DirectionScores {
            scores: scores.into_iter().map(|s| s.max(0.0)).collect(),
            interest: interest.into_iter().map(|w| w.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn from_counts(counts: &[usize], interest: &[f64]) -> Self {
        Self::new(counts.iter().map(|&c| c as f64).collect(), interest.to_vec())
    }

    pub fn n_dir(&self) -> usize {
        self.scores.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn interest(&self) -> &[f64] {
        &self.interest
    }

    pub fn weighted(&self) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.interest)
            .map(|(s, i)| s * i)
            .collect()
    }

    /// Output of the relative-threshold Heaviside term alone.
    pub fn relative_term(&self, sigma1: f64) -> Vec<u8> {
        let weighted = self.weighted();
        let total: f64 = weighted.iter().sum();
        if total <= 0.0 {
            return vec![0; weighted.len()];
        }
        weighted
            .iter()
            .map(|w| heaviside(w / total - sigma1))
            .collect()
    }

    pub fn absolute_term(&self, sigma2: f64) -> Vec<u8> {
        self.weighted()
            .iter()
            .map(|w| heaviside(w - sigma2))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionMask {
    pub mask: Vec<u8>,
    pub sigma1: f64,
    pub sigma2: f64,
    pub scores: DirectionScores,
}

impl DirectionMask {
    pub fn n_dir(&self) -> usize {
        self.mask.len()
    }

    pub fn is_on(&self, sector: usize) -> bool {
        self.mask[sector] == 1
    }

    pub fn count_on(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Mask with every sector switched on, as used by omnidirectional selection.
    pub fn all_on(&self) -> DirectionMask {
        DirectionMask {
            mask: vec![1; self.mask.len()],
            ..self.clone()
        }
    }

    /// Recomputes the mask from the stored scores.
    pub fn is_consistent(&self) -> bool {
        compute_mask(&self.scores, self.sigma1, self.sigma2).mask == self.mask
    }
}

pub fn compute_mask(ds: &DirectionScores, sigma1: f64, sigma2: f64) -> DirectionMask {
    let rel = ds.relative_term(sigma1);
    let abs = ds.absolute_term(sigma2);
    DirectionMask {
        mask: rel.iter().zip(&abs).map(|(a, b)| *a.max(b)).collect(),
        sigma1,
        sigma2,
        scores: ds.clone(),
    }
}

/// Spatial map with the mask value of the sector containing each cell center.
///
/// The same map is shared by every collaborator channel.
pub fn direction_embedding(
    mask: &DirectionMask,
    partition: &SectorPartition,
    grid: &GridSpec,
) -> Vec<f64> {
    assert_eq!(mask.n_dir(), partition.n_dir(), "mask and partition disagree");
    grid.cells()
        .map(|(r, c)| f64::from(mask.mask[partition.sector_of_point(grid.cell_center(r, c))]))
        .collect()
}
