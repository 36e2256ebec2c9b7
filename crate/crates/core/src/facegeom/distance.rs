//! Spatial and facial-structure distances between grid cells.

use std::fmt;
use std::str::FromStr;

use super::grid::CellGrid;
use super::landmarks::{LandmarkSet, Point};
use crate::error::{Error, Result};

/// Which facial-structure distance is added to the spatial one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FacialMode {
    #[default]
    None,
    /// Saliency distance from dense landmark counts per cell.
    Saliency,
    /// Relative distance from per-cell distances to the sparse keypoints.
    Relative,
}

impl FacialMode {
    /// Upper bound of the facial distance in this mode.
    pub fn max_distance(self) -> f64 {
        match self {
            FacialMode::None => 0.0,
            // Distance vectors are nonnegative, so cosine similarity is too.
            FacialMode::Saliency | FacialMode::Relative => 1.0,
        }
    }
}

impl fmt::Display for FacialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FacialMode::None => "none",
            FacialMode::Saliency => "SD",
            FacialMode::Relative => "RD",
        })
    }
}

impl FromStr for FacialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "euc" => Ok(FacialMode::None),
            "SD" | "sd" => Ok(FacialMode::Saliency),
            "RD" | "rd" => Ok(FacialMode::Relative),
            other => Err(Error::Config(format!(
                "unknown facial mode `{other}` (none|SD|RD)"
            ))),
        }
    }
}

/// Euclidean distance between two `(col, row)` grid coordinates.
pub fn euclidean_distance(cell: (usize, usize), anchor: (usize, usize)) -> f64 {
    let dx = cell.0 as f64 - anchor.0 as f64;
    let dy = cell.1 as f64 - anchor.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Dense landmarks inside the half-open rectangle of `cell`.
pub fn saliency_count(grid: &CellGrid, landmarks: &LandmarkSet, cell: usize) -> usize {
    landmarks
        .dense
        .iter()
        .filter(|p| grid.cell_of(p[0], p[1]) == Some(cell))
        .count()
}

/// Landmark counts for every cell in one pass.
pub fn saliency_counts(grid: &CellGrid, landmarks: &LandmarkSet) -> Vec<usize> {
    let mut counts = vec![0; grid.cells()];
    for p in &landmarks.dense {
        if let Some(c) = grid.cell_of(p[0], p[1]) {
            counts[c] += 1;
        }
    }
    counts
}

/// `|l_i − l_anchor| / l_max`, or 0 when no cell holds a landmark.
pub fn saliency_distance(counts: &[usize], i: usize, anchor: usize) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        log::warn!("saliency distance on a face without landmarks; using 0");
        return 0.0;
    }
    counts[i].abs_diff(counts[anchor]) as f64 / max as f64
}

/// Distances from a cell centroid to each keypoint.
pub fn relative_distance_vector(centroid: (f64, f64), keypoints: &[Point]) -> Vec<f64> {
    keypoints
        .iter()
        .map(|k| {
            let dx = centroid.0 - k[0];
            let dy = centroid.1 - k[1];
            (dx * dx + dy * dy).sqrt()
        })
        .collect()
}

/// `1 − cos(d_i, d_anchor)`, or 0 when either vector vanishes. Clamped at 0
/// so rounding on parallel vectors cannot yield a negative distance.
pub fn relative_distance(d_i: &[f64], d_anchor: &[f64]) -> f64 {
    let dot: f64 = d_i.iter().zip(d_anchor).map(|(a, b)| a * b).sum();
    let na = d_i.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = d_anchor.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("relative distance with a centroid on every keypoint; using 0");
        return 0.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Per-image facial structure, precomputed for all cells of a grid.
#[derive(Debug, Clone)]
pub enum FacialStructure {
    None,
    Saliency(Vec<usize>),
    Relative(Vec<Vec<f64>>),
}

impl FacialStructure {
    pub fn new(mode: FacialMode, grid: &CellGrid, landmarks: Option<&LandmarkSet>) -> Result<Self> {
        let need = |what: &str| {
            landmarks
                .ok_or_else(|| Error::Config(format!("facial mode {mode} needs {what} landmarks")))
        };
        Ok(match mode {
            FacialMode::None => FacialStructure::None,
            FacialMode::Saliency => {
                FacialStructure::Saliency(saliency_counts(grid, need("dense")?))
            }
            FacialMode::Relative => {
                let lm = need("sparse")?;
                if lm.sparse.is_empty() {
                    return Err(Error::Config(
                        "relative distance needs sparse keypoints".into(),
                    ));
                }
                FacialStructure::Relative(
                    (0..grid.cells())
                        .map(|i| relative_distance_vector(grid.centroid(i), &lm.sparse))
                        .collect(),
                )
            }
        })
    }

    pub fn distance(&self, i: usize, anchor: usize) -> f64 {
        match self {
            FacialStructure::None => 0.0,
            FacialStructure::Saliency(c) => saliency_distance(c, i, anchor),
            FacialStructure::Relative(v) => relative_distance(&v[i], &v[anchor]),
        }
    }
}

/// `D̃(i, anchor) + γ · D_face(i, anchor)`.
///
/// With `γ = 0` or no facial structure this is exactly the Euclidean term.
pub fn combined_distance(
    grid: &CellGrid,
    i: usize,
    anchor: usize,
    facial: &FacialStructure,
    gamma: f64,
) -> f64 {
    let spatial = euclidean_distance(grid.coords(i), grid.coords(anchor));
    if gamma == 0.0 || matches!(facial, FacialStructure::None) {
        return spatial;
    }
    spatial + gamma * facial.distance(i, anchor)
}
