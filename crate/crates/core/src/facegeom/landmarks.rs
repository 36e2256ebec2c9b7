use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel coordinate `[x, y]`, top-left origin.
pub type Point = [f64; 2];

/// Dense landmarks (saliency mode) and five sparse keypoints (relative mode):
/// left eye, right eye, nose tip, left mouth corner, right mouth corner.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub dense: Vec<Point>,
    pub sparse: Vec<Point>,
}

pub const SPARSE_KEYPOINTS: usize = 5;

impl LandmarkSet {
    pub fn new(dense: Vec<Point>, sparse: Vec<Point>) -> Self {
        Self { dense, sparse }
    }

    /// Checks bounds `[0, W) × [0, H)` and the configured counts. A count of
    /// `None` skips that check.
    pub fn validate(
        &self,
        width: usize,
        height: usize,
        dense_count: Option<usize>,
        sparse_count: Option<usize>,
    ) -> Result<()> {
        let (w, h) = (width as f64, height as f64);
        for p in self.dense.iter().chain(&self.sparse) {
            if !(0.0..w).contains(&p[0]) || !(0.0..h).contains(&p[1]) {
                return Err(Error::Contract(format!(
                    "landmark ({}, {}) outside {width}x{height} image",
                    p[0], p[1]
                )));
            }
        }
        if let Some(n) = dense_count.filter(|&n| n != self.dense.len()) {
            return Err(Error::Contract(format!(
                "expected {n} dense landmarks, found {}",
                self.dense.len()
            )));
        }
        if let Some(n) = sparse_count.filter(|&n| n != self.sparse.len()) {
            return Err(Error::Contract(format!(
                "expected {n} sparse keypoints, found {}",
                self.sparse.len()
            )));
        }
        Ok(())
    }

    /// Mirror across the vertical axis (`x → W − 1 − x`). Sparse keypoints
    /// keep their semantic order, so the eye and mouth-corner pairs swap.
    pub fn flipped(&self, width: usize) -> Self {
        let w = width as f64;
        let flip = |p: &Point| [w - 1.0 - p[0], p[1]];
        let dense = self.dense.iter().map(flip).collect();
        let mut sparse: Vec<Point> = self.sparse.iter().map(flip).collect();
        if sparse.len() == SPARSE_KEYPOINTS {
            sparse.swap(0, 1);
            sparse.swap(3, 4);
        }
        Self { dense, sparse }
    }
}

/// One line of a landmark file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub id: String,
    pub dense: Vec<Point>,
    pub sparse: Vec<Point>,
}

impl LandmarkRecord {
    pub fn new(id: impl Into<String>, set: &LandmarkSet) -> Self {
        Self {
            id: id.into(),
            dense: set.dense.clone(),
            sparse: set.sparse.clone(),
        }
    }

    pub fn landmarks(&self) -> LandmarkSet {
        LandmarkSet::new(self.dense.clone(), self.sparse.clone())
    }
}

/// Writes one JSON object per line.
pub fn write_landmark_file<W: Write>(mut out: W, records: &[LandmarkRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_landmark_file<R: BufRead>(input: R) -> Result<Vec<LandmarkRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("landmark file line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LandmarkSet {
        LandmarkSet::new(
            vec![[1.0, 2.0], [30.5, 31.0]],
            vec![
                [10.0, 12.0],
                [21.0, 12.0],
                [16.0, 18.0],
                [12.0, 24.0],
                [20.0, 24.0],
            ],
        )
    }

    #[test]
    fn validation_checks_bounds_and_counts() {
        let s = sample();
        s.validate(32, 32, Some(2), Some(5)).unwrap();
        assert!(s.validate(30, 32, None, None).is_err());
        assert!(s.validate(32, 32, Some(106), None).is_err());
        assert!(s.validate(32, 32, None, Some(4)).is_err());
    }

    #[test]
    fn flip_reflects_and_swaps_pairs() {
        let f = sample().flipped(32);
        assert_eq!(f.sparse[0], [31.0 - 21.0, 12.0]);
        assert_eq!(f.sparse[1], [31.0 - 10.0, 12.0]);
        assert_eq!(f.sparse[2], [15.0, 18.0]);
        assert_eq!(f.dense[0], [30.0, 2.0]);
        assert_eq!(f.flipped(32), sample());
    }

    #[test]
    fn file_roundtrip() {
        let recs = vec![
            LandmarkRecord::new("a", &sample()),
            LandmarkRecord::new("b", &LandmarkSet::default()),
        ];
        let mut buf = Vec::new();
        write_landmark_file(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"id\":\"a\",\"dense\":[[1.0,2.0]"));
        assert_eq!(read_landmark_file(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn malformed_line_is_reported() {
        let err = read_landmark_file(&b"{\"id\":1}\n"[..]).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
