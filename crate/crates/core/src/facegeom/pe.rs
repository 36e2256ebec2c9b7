//! Bucketized query-side positional encoding.

use std::rc::Rc;

use super::distance::{combined_distance, FacialMode, FacialStructure};
use super::grid::CellGrid;
use super::landmarks::LandmarkSet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Piecewise index function: linear up to `alpha`, logarithmic up to
/// `dmax`, clipped at `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pif {
    pub alpha: f64,
    pub beta: f64,
    pub dmax: f64,
}

impl Pif {
    pub fn new(alpha: f64, beta: f64, dmax: f64) -> Result<Self> {
        if !(alpha >= 1.0 && beta > alpha && beta.fract() == 0.0) {
            return Err(Error::Config(format!(
                "index function needs 1 <= alpha < beta with integral beta (alpha={alpha}, beta={beta})"
            )));
        }
        if !(dmax > 0.0 && dmax.is_finite()) {
            return Err(Error::Config(format!(
                "maximum distance {dmax} must be positive"
            )));
        }
        Ok(Self { alpha, beta, dmax })
    }

    /// Number of buckets, `beta + 1`.
    pub fn buckets(&self) -> usize {
        self.beta as usize + 1
    }

    pub fn index(&self, d: f64) -> Result<usize> {
        pe_index(d, self.alpha, self.beta, self.dmax)
    }
}

/// Maps a nonnegative distance to a bucket in `[0, beta]`.
pub fn pe_index(d: f64, alpha: f64, beta: f64, dmax: f64) -> Result<usize> {
    if d.is_nan() || d < 0.0 {
        return Err(Error::Contract(format!("distance {d} must be nonnegative")));
    }
    let idx = if d <= alpha {
        d.round()
    } else if dmax <= alpha {
        // Unreachable for a true maximum; clip like the far region.
        beta
    } else {
        let far = alpha + (d / alpha).ln() / (dmax / alpha).ln() * (beta - alpha);
        far.round().min(beta)
    };
    Ok(idx.min(beta) as usize)
}

/// Learnable bucket table with the indexing setup that feeds it.
#[derive(Debug, Clone)]
pub struct PeBuckets {
    pub table: Tensor,
    pub pif: Pif,
    pub gamma: f64,
    pub mode: FacialMode,
}

impl PeBuckets {
    /// Defaults: `gamma = diagonal / 2` and `dmax = diagonal + gamma · max D_face`.
    pub fn default_gamma(grid: &CellGrid) -> f64 {
        grid.diagonal() / 2.0
    }

    pub fn default_dmax(grid: &CellGrid, gamma: f64, mode: FacialMode) -> f64 {
        grid.diagonal() + gamma * mode.max_distance()
    }

    /// `table` must have shape `[beta + 1, 1]`.
    pub fn new(table: Tensor, pif: Pif, gamma: f64, mode: FacialMode) -> Result<Self> {
        if table.shape() != [pif.buckets(), 1] {
            return Err(Error::Dimension {
                op: "pe_buckets",
                detail: format!("table {:?} for {} buckets", table.shape(), pif.buckets()),
            });
        }
        if !(gamma >= 0.0) {
            return Err(Error::Config(format!("gamma {gamma} must be nonnegative")));
        }
        Ok(Self {
            table,
            pif,
            gamma,
            mode,
        })
    }

    /// Bucket index of every cell relative to the grid anchor.
    pub fn indices(&self, grid: &CellGrid, landmarks: Option<&LandmarkSet>) -> Result<Vec<usize>> {
        let facial = if self.gamma == 0.0 {
            FacialStructure::None
        } else {
            FacialStructure::new(self.mode, grid, landmarks)?
        };
        let anchor = grid.anchor();
        (0..grid.cells())
            .map(|i| {
                self.pif
                    .index(combined_distance(grid, i, anchor, &facial, self.gamma))
            })
            .collect()
    }

    /// Gathers `P[index]` for each entry, shape `[len, 1]`. Backward
    /// scatter-adds into the table rows that were read.
    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor> {
        let idx: Rc<[usize]> = indices.into();
        self.table.gather(idx, &[indices.len(), 1])
    }

    /// `b_i` for one cell, as a one-element tensor.
    pub fn lookup_cell(
        &self,
        grid: &CellGrid,
        i: usize,
        landmarks: Option<&LandmarkSet>,
    ) -> Result<Tensor> {
        let idx = self.indices(grid, landmarks)?;
        let cell = *idx
            .get(i)
            .ok_or_else(|| Error::Contract(format!("cell {i} outside {} cells", idx.len())))?;
        self.table.gather(vec![cell].into(), &[1])
    }
}
