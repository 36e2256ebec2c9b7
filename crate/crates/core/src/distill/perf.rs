//! Pixel-wise effective receptive fields from absolute input gradients.

use std::io::Write;

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

/// Averaged absolute input gradient over an `height × width` image.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, nonnegative.
    pub values: Vec<f64>,
    pub target: String,
    pub samples: usize,
}

impl PerfMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Bounding box `(row0, col0, row1, col1)` (inclusive) of the nonzero
    /// entries, or `None` for an all-zero map.
    pub fn support(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if v != 0.0 {
                let (r, c) = (i / self.width, i % self.width);
                bbox = Some(match bbox {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
        bbox
    }

    /// One CSV line per pixel row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// For each image, backpropagates the channel sum of `probe(image)` to the
/// input, takes the absolute gradient, and averages it over input channels
/// and images. `probe` returns the probed feature vector.
pub fn compute_perf<F>(images: &[Tensor], target: &str, probe: F) -> Result<PerfMap>
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("PERF needs at least one image".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(dim_err(
            "compute_perf",
            format!("image shape {shape:?} is not [C, H, W]"),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut acc = vec![0.0; h * w];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != shape.as_slice() {
            return Err(dim_err(
                "compute_perf",
                format!("image {k} has shape {:?}", img.shape()),
            ));
        }
        let x = Tensor::param(img.to_vec(), &shape)?;
        probe(&x, k)?.sum().backward()?;
        let g = x.grad_or_zeros();
        for ch in 0..c {
            for (a, v) in acc.iter_mut().zip(&g[ch * h * w..(ch + 1) * h * w]) {
                *a += v.abs();
            }
        }
    }
    let norm = (c * images.len()) as f64;
    Ok(PerfMap {
        height: h,
        width: w,
        values: acc.into_iter().map(|v| v / norm).collect(),
        target: target.to_string(),
        samples: images.len(),
    })
}

/// `1 − cos` between the L1-normalized maps: 0 for identically shaped
/// receptive fields, 1 for disjoint supports.
pub fn perf_alignment_score(a: &PerfMap, b: &PerfMap) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(dim_err(
            "perf_alignment_score",
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    let l1 = |m: &PerfMap| m.values.iter().map(|v| v.abs()).sum::<f64>();
    let (na, nb) = (l1(a), l1(b));
    if na == 0.0 && nb == 0.0 {
        log::warn!("both PERF maps are zero; alignment score defined as 0");
        return Ok(0.0);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(1.0);
    }
    let (mut dot, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x / na, y / nb);
        dot += x * y;
        sa += x * x;
        sb += y * y;
    }
    Ok(1.0 - dot / (sa.sqrt() * sb.sqrt()))
}
