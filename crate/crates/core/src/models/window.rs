//! Windowed multi-head attention with relative position bias and prompt
//! tokens shared by every window.

use std::rc::Rc;

use rand::Rng;

use super::layers::{attend, Linear};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{ParamBuilder, Tensor};

const MASKED: f64 = -1e9;

/// Static routing for one layer: which tokens form each window after the
/// cyclic shift, the relative-bias lookup and the shifted-window masks.
///
/// Rows of the layer input are the `grid²` patch tokens in raster order
/// followed by `prompts` prompt tokens.
#[derive(Debug, Clone)]
pub struct WindowPlan {
    pub grid: usize,
    pub window: usize,
    pub shift: usize,
    pub prompts: usize,
    /// Input rows gathered for each window: its patch tokens, then the prompts.
    windows: Vec<Vec<usize>>,
    /// For each patch token, its row in the stacked per-window outputs.
    token_rows: Vec<usize>,
    /// Flat index into the bias table for every (query, key) pair of a window.
    bias_index: Vec<usize>,
    masks: Vec<Option<Tensor>>,
}

impl WindowPlan {
    /// The window is clamped to the grid; shifting is disabled when a single
    /// window covers the grid.
    pub fn new(grid: usize, window: usize, shifted: bool, prompts: usize) -> Result<Self> {
        let window = window.min(grid);
        if window == 0 || grid % window != 0 {
            return Err(dim_err(
                "window_attention",
                format!("{grid}x{grid} tokens do not tile into {window}x{window} windows"),
            ));
        }
        let shift = if shifted && grid > window {
            window / 2
        } else {
            0
        };
        let n = grid * grid;
        let per = grid / window;
        let wt = window * window;
        let t = wt + prompts;

        // Shifted frame position (r, c) holds original token ((r+s)%g, (c+s)%g).
        let orig = |r: usize, c: usize| ((r + shift) % grid) * grid + (c + shift) % grid;
        let region = |v: usize| {
            if v < grid - window {
                0
            } else if v < grid - shift {
                1
            } else {
                2
            }
        };

        let mut windows = Vec::with_capacity(per * per);
        let mut token_rows = vec![0; n];
        let mut masks = Vec::with_capacity(per * per);
        for wr in 0..per {
            for wc in 0..per {
                let mut rows = Vec::with_capacity(t);
                let mut labels = Vec::with_capacity(wt);
                for i in 0..window {
                    for j in 0..window {
                        let (r, c) = (wr * window + i, wc * window + j);
                        let tok = orig(r, c);
                        token_rows[tok] = windows.len() * t + rows.len();
                        rows.push(tok);
                        labels.push(region(r) * 3 + region(c));
                    }
                }
                rows.extend(n..n + prompts);
                let mask = if shift > 0 && labels.iter().any(|&l| l != labels[0]) {
                    let mut m = vec![0.0; t * t];
                    for a in 0..wt {
                        for b in 0..wt {
                            if labels[a] != labels[b] {
                                m[a * t + b] = MASKED;
                            }
                        }
                    }
                    Some(Tensor::new(m, &[t, t])?)
                } else {
                    None
                };
                windows.push(rows);
                masks.push(mask);
            }
        }

        // Relative offsets inside a window; pairs involving a prompt share one
        // extra slot at the end of the table.
        let side = 2 * window - 1;
        let extra = side * side;
        let mut bias_index = Vec::with_capacity(t * t);
        for a in 0..t {
            for b in 0..t {
                let idx = if a < wt && b < wt {
                    let (ay, ax) = ((a / window) as isize, (a % window) as isize);
                    let (by, bx) = ((b / window) as isize, (b % window) as isize);
                    let dy = (ay - by + window as isize - 1) as usize;
                    let dx = (ax - bx + window as isize - 1) as usize;
                    dy * side + dx
                } else {
                    extra
                };
                bias_index.push(idx);
            }
        }

        Ok(Self {
            grid,
            window,
            shift,
            prompts,
            windows,
            token_rows,
            bias_index,
            masks,
        })
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    /// Tokens per window including prompts.
    pub fn window_len(&self) -> usize {
        self.window * self.window + self.prompts
    }

    /// Rows in the relative-bias table.
    pub fn table_len(window: usize) -> usize {
        let side = 2 * window - 1;
        side * side + 1
    }
}

/// Attention parameters of one basic layer.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[(2w−1)² + 1, heads]`.
    pub rel_bias: Tensor,
    pub heads: usize,
    pub dim: usize,
}

/// Output of a window-attention call.
pub struct WindowOutput {
    /// Patch rows then prompt rows, same layout as the input.
    pub rows: Tensor,
    /// Attention map of every (window, head), row-stochastic.
    pub maps: Vec<Tensor>,
}

impl WindowAttention {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{dim} channels do not split into {heads} heads"
            )));
        }
        let mut s = b.scope(name);
        Ok(Self {
            qkv: Linear::new(&mut s, "qkv", dim, 3 * dim, true)?,
            proj: Linear::new(&mut s, "proj", dim, dim, true)?,
            rel_bias: s.normal("rel_bias", &[WindowPlan::table_len(window), heads], 0.02)?,
            heads,
            dim,
        })
    }

    /// Attention inside each window, with the prompt tokens appended to every
    /// window. Each prompt's output is the mean of its per-window outputs.
    pub fn forward(&self, x: &Tensor, plan: &WindowPlan) -> Result<WindowOutput> {
        let n = plan.grid * plan.grid;
        let expected = [n + plan.prompts, self.dim];
        if x.shape() != expected {
            return Err(dim_err(
                "window_attention",
                format!("input {:?} does not match plan {:?}", x.shape(), expected),
            ));
        }
        if self.rel_bias.shape()[0] != WindowPlan::table_len(plan.window) {
            return Err(dim_err(
                "window_attention",
                format!(
                    "bias table {:?} for window {}",
                    self.rel_bias.shape(),
                    plan.window
                ),
            ));
        }
        let t = plan.window_len();
        let dh = self.dim / self.heads;
        let scale = (dh as f64).powf(-0.5);
        let qkv = self.qkv.forward(x)?;

        let biases: Vec<Tensor> = (0..self.heads)
            .map(|h| {
                let idx: Rc<[usize]> = plan
                    .bias_index
                    .iter()
                    .map(|&i| i * self.heads + h)
                    .collect();
                self.rel_bias.gather(idx, &[t, t])
            })
            .collect::<Result<_>>()?;

        let mut per_window = Vec::with_capacity(plan.window_count());
        let mut maps = Vec::with_capacity(plan.window_count() * self.heads);
        for (w, rows) in plan.windows.iter().enumerate() {
            let xw = qkv.select_rows(rows)?;
            let mut heads = Vec::with_capacity(self.heads);
            for (h, bias) in biases.iter().enumerate() {
                let q = xw.slice_cols(h * dh, dh)?;
                let k = xw.slice_cols(self.dim + h * dh, dh)?;
                let v = xw.slice_cols(2 * self.dim + h * dh, dh)?;
                let (o, a) = attend(&q, &k, &v, Some(bias), plan.masks[w].as_ref(), scale)?;
                heads.push(o);
                maps.push(a);
            }
            per_window.push(if heads.len() == 1 {
                heads.pop().unwrap()
            } else {
                Tensor::concat(&heads, 1)?
            });
        }
        let stacked = if per_window.len() == 1 {
            per_window.pop().unwrap()
        } else {
            Tensor::concat(&per_window, 0)?
        };

        let tokens = stacked.select_rows(&plan.token_rows)?;
        let rows = if plan.prompts == 0 {
            tokens
        } else {
            let wt = plan.window * plan.window;
            let nw = plan.window_count();
            let mut acc: Option<Tensor> = None;
            for w in 0..nw {
                let pr: Vec<usize> = (0..plan.prompts).map(|p| w * t + wt + p).collect();
                let part = stacked.select_rows(&pr)?;
                acc = Some(match acc {
                    None => part,
                    Some(a) => a.add(&part)?,
                });
            }
            let prompts = acc.expect("at least one window").scale(1.0 / nw as f64);
            Tensor::concat(&[tokens, prompts], 0)?
        };
        Ok(WindowOutput {
            rows: self.proj.forward(&rows)?,
            maps,
        })
    }
}
