use crate::error::{Error, Result};

/// A `side × side` tiling of an image into half-open cells, indexed in
/// raster order (`row * side + col`).
///
/// Grid coordinates of cell `i` are `(col, row)`; pixel coordinates follow
/// the image convention with a top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGrid {
    side: usize,
    width: f64,
    height: f64,
}

impl CellGrid {
    pub fn new(side: usize, width: usize, height: usize) -> Result<Self> {
        if side == 0 || width == 0 || height == 0 {
            return Err(Error::Contract(format!(
                "grid side {side} over a {width}x{height} image"
            )));
        }
        Ok(Self {
            side,
            width: width as f64,
            height: height as f64,
        })
    }

    /// Grid whose cell count is `cells`, which must be a perfect square.
    pub fn square(cells: usize, width: usize, height: usize) -> Result<Self> {
        let side = (cells as f64).sqrt().round() as usize;
        if side * side != cells {
            return Err(Error::Config(format!("{cells} is not a perfect square")));
        }
        Self::new(side, width, height)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.width, self.height)
    }

    /// `(col, row)` of cell `i`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.side, i / self.side)
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.side + col
    }

    /// The cell at `(⌊side/2⌋, ⌊side/2⌋)`.
    pub fn anchor(&self) -> usize {
        self.index(self.side / 2, self.side / 2)
    }

    /// Largest Euclidean distance between two cells, in grid units.
    pub fn diagonal(&self) -> f64 {
        (self.side - 1) as f64 * std::f64::consts::SQRT_2
    }

    fn cell_w(&self) -> f64 {
        self.width / self.side as f64
    }

    fn cell_h(&self) -> f64 {
        self.height / self.side as f64
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` of cell `i`.
    pub fn rect(&self, i: usize) -> (f64, f64, f64, f64) {
        let (c, r) = self.coords(i);
        let (cw, ch) = (self.cell_w(), self.cell_h());
        let x1 = if c + 1 == self.side {
            self.width
        } else {
            (c + 1) as f64 * cw
        };
        let y1 = if r + 1 == self.side {
            self.height
        } else {
            (r + 1) as f64 * ch
        };
        (c as f64 * cw, x1, r as f64 * ch, y1)
    }

    pub fn centroid(&self, i: usize) -> (f64, f64) {
        let (c, r) = self.coords(i);
        (
            (c as f64 + 0.5) * self.cell_w(),
            (r as f64 + 0.5) * self.cell_h(),
        )
    }

    /// Cell containing pixel point `(x, y)`, or `None` outside the image.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        if !(0.0..self.width).contains(&x) || !(0.0..self.height).contains(&y) {
            return None;
        }
        let col = Self::bin(x, self.cell_w(), self.side);
        let row = Self::bin(y, self.cell_h(), self.side);
        Some(self.index(col, row))
    }

    // The division can round across a boundary; the bounds checks are
    // computed the same way `rect` computes them.
    fn bin(v: f64, step: f64, side: usize) -> usize {
        let mut k = ((v / step).floor() as usize).min(side - 1);
        if k > 0 && v < k as f64 * step {
            k -= 1;
        }
        if k + 1 < side && v >= (k + 1) as f64 * step {
            k += 1;
        }
        k
    }
}
