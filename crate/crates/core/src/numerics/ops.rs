//! Differentiable primitives. Matrices are row-major `[rows, cols]`.

use std::f64::consts::PI;
use std::rc::Rc;

use super::tensor::{numel_of, Tensor};
use crate::error::{dim_err, Error, Result};

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        ref s => Err(dim_err(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for (i, &av) in a[p * m..(p + 1) * m].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |c| {
                vec![
                    c.needs(0).then(|| c.grad.to_vec()),
                    c.needs(1).then(|| c.grad.to_vec()),
                ]
            },
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |c| {
                vec![
                    c.needs(0).then(|| c.grad.to_vec()),
                    c.needs(1).then(|| c.grad.iter().map(|g| -g).collect()),
                ]
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |c| {
                let a = c.inputs[0].data();
                let b = c.inputs[1].data();
                vec![
                    c.needs(0)
                        .then(|| c.grad.iter().zip(b.iter()).map(|(g, y)| g * y).collect()),
                    c.needs(1)
                        .then(|| c.grad.iter().zip(a.iter()).map(|(g, x)| g * x).collect()),
                ]
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |c| {
            vec![Some(c.grad.iter().map(|g| g * factor).collect())]
        })
    }

    /// `x[m×n] + b[n]`, the bias broadcast over rows.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(self, "add_bias")?;
        if bias.numel() != n {
            return Err(dim_err(
                "add_bias",
                format!("bias {:?} for matrix {:?}", bias.shape(), self.shape()),
            ));
        }
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += y);
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), bias.clone()],
            move |c| {
                let gb = c.needs(1).then(|| {
                    let mut gb = vec![0.0; n];
                    for row in c.grad.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![c.needs(0).then(|| c.grad.to_vec()), gb]
            },
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!(
                    "inner dimensions differ: {:?} x {:?}",
                    self.shape(),
                    other.shape()
                ),
            ));
        }
        let data = mm(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            move |c| {
                let ga = c
                    .needs(0)
                    .then(|| mm_nt(c.grad, &c.inputs[1].data(), m, n, k));
                let gb = c
                    .needs(1)
                    .then(|| mm_tn(&c.inputs[0].data(), c.grad, k, m, n));
                vec![ga, gb]
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "transpose")?;
        let src = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![n, m],
            vec![self.clone()],
            move |c| {
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = c.grad[j * m + i];
                    }
                }
                vec![Some(g)]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(dim_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |c| vec![Some(c.grad.to_vec())],
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |c| {
            let x = c.inputs[0].data();
            vec![Some(
                c.grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| gelu_parts(v).0).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |c| {
            let x = c.inputs[0].data();
            vec![Some(
                c.grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &v)| g * gelu_parts(v).1)
                    .collect(),
            )]
        })
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = dims2(self, "layer_norm")?;
        if gamma.numel() != n || beta.numel() != n {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "affine {:?}/{:?} for rows of {n}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gm[j] + bt[j];
            }
        }
        drop((x, gm, bt));
        let inputs = vec![self.clone(), gamma.clone(), beta.clone()];
        Ok(Tensor::from_op(out, vec![m, n], inputs, move |c| {
            let g = c.grad;
            let gm = c.inputs[1].data();
            let gx = c.needs(0).then(|| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let gh: Vec<f64> = g[r.clone()]
                        .iter()
                        .zip(gm.iter())
                        .map(|(a, b)| a * b)
                        .collect();
                    let mean_gh = gh.iter().sum::<f64>() / n as f64;
                    let mean_ghx = gh
                        .iter()
                        .zip(&xhat[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n as f64;
                    for j in 0..n {
                        gx[i * n + j] = inv_std[i] * (gh[j] - mean_gh - xhat[i * n + j] * mean_ghx);
                    }
                }
                gx
            });
            let gg = c.needs(1).then(|| {
                let mut gg = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gg[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
                gg
            });
            let gb = c.needs(2).then(|| {
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                gb
            });
            vec![gx, gg, gb]
        }))
    }

    /// Row softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "softmax_rows")?;
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows received NaN input".into()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..(i + 1) * n];
            let mut s = 0.0;
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = (v - mx).exp();
                s += *oj;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone()],
            move |c| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let y = &c.out[r.clone()];
                    let g = &c.grad[r.clone()];
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = y[j] * (g[j] - dot);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let len = self.numel();
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], move |c| {
            vec![Some(vec![c.grad[0]; len])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let len = self.numel();
        self.sum().scale(1.0 / len as f64)
    }

    /// Mean squared difference over all entries.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mse")?;
        let len = self.numel() as f64;
        let diff: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let v = diff.iter().map(|d| d * d).sum::<f64>() / len;
        Ok(Tensor::from_op(
            vec![v],
            Vec::new(),
            vec![self.clone(), other.clone()],
            move |c| {
                let k = 2.0 * c.grad[0] / len;
                vec![
                    c.needs(0).then(|| diff.iter().map(|d| k * d).collect()),
                    c.needs(1).then(|| diff.iter().map(|d| -k * d).collect()),
                ]
            },
        ))
    }

    /// Per-row sums of a matrix, shape `[m]`.
    pub fn row_sums(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "row_sums")?;
        let data = self.data().chunks(n).map(|r| r.iter().sum()).collect();
        Ok(Tensor::from_op(
            data,
            vec![m],
            vec![self.clone()],
            move |c| {
                let mut g = Vec::with_capacity(m * n);
                for &gi in c.grad {
                    g.extend(std::iter::repeat_n(gi, n));
                }
                vec![Some(g)]
            },
        ))
    }

    /// Mean over rows (global average pooling of token features), shape `[n]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "mean_rows")?;
        let mut data = vec![0.0; n];
        for row in self.data().chunks(n) {
            data.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        data.iter_mut().for_each(|v| *v /= m as f64);
        Ok(Tensor::from_op(
            data,
            vec![n],
            vec![self.clone()],
            move |c| {
                let mut g = Vec::with_capacity(m * n);
                for _ in 0..m {
                    g.extend(c.grad.iter().map(|v| v / m as f64));
                }
                vec![Some(g)]
            },
        ))
    }

    /// Flat gather `out[i] = self[index[i]]`; backward scatter-adds into `self`.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if index.len() != numel_of(shape) {
            return Err(dim_err(
                "gather",
                format!("{} indices for output shape {shape:?}", index.len()),
            ));
        }
        let len = self.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(dim_err(
                "gather",
                format!("index {bad} out of range for {len} values"),
            ));
        }
        let src = self.data();
        let data = index.iter().map(|&i| src[i]).collect();
        drop(src);
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            vec![self.clone()],
            move |c| {
                let mut g = vec![0.0; len];
                for (&i, &gv) in index.iter().zip(c.grad) {
                    g[i] += gv;
                }
                vec![Some(g)]
            },
        ))
    }

    /// Rows scaled to unit Euclidean norm, `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let (m, n) = dims2(self, "l2_normalize_rows")?;
        let x = self.data();
        let norms: Vec<f64> = x
            .chunks(n)
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        let data: Vec<f64> = x
            .chunks(n)
            .zip(&norms)
            .flat_map(|(r, &nr)| r.iter().map(move |v| v / nr))
            .collect();
        drop(x);
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone()],
            move |c| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let y = &c.out[r.clone()];
                    let g = &c.grad[r.clone()];
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = (g[j] - y[j] * dot) / norms[i];
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Cosine of the angle between matching rows, shape `[m]`.
    pub fn cosine_rows(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "cosine_rows")?;
        let a = self.l2_normalize_rows(1e-12)?;
        let b = other.l2_normalize_rows(1e-12)?;
        a.mul(&b)?.row_sums()
    }

    /// Concatenate matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat", "no inputs"))?;
        let (_, n0) = dims2(first, "concat")?;
        let (m0, _) = dims2(first, "concat")?;
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            let (m, n) = dims2(p, "concat")?;
            let ok = match axis {
                0 => n == n0,
                1 => m == m0,
                _ => return Err(dim_err("concat", format!("axis {axis} on matrices"))),
            };
            if !ok {
                return Err(dim_err(
                    "concat",
                    format!(
                        "{:?} does not line up with {:?} on axis {axis}",
                        p.shape(),
                        first.shape()
                    ),
                ));
            }
            dims.push((m, n));
        }
        let (rows, cols) = if axis == 0 {
            (dims.iter().map(|d| d.0).sum(), n0)
        } else {
            (m0, dims.iter().map(|d| d.1).sum())
        };
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for p in parts {
                data.extend_from_slice(&p.data());
            }
        } else {
            let srcs: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for i in 0..rows {
                for (s, &(_, n)) in srcs.iter().zip(&dims) {
                    data.extend_from_slice(&s[i * n..(i + 1) * n]);
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![rows, cols],
            parts.to_vec(),
            move |c| {
                let mut out: Vec<Option<Vec<f64>>> = Vec::with_capacity(dims.len());
                if axis == 0 {
                    let mut off = 0;
                    for (k, &(m, n)) in dims.iter().enumerate() {
                        let len = m * n;
                        out.push(c.needs(k).then(|| c.grad[off..off + len].to_vec()));
                        off += len;
                    }
                } else {
                    let mut col = 0;
                    for (k, &(m, n)) in dims.iter().enumerate() {
                        out.push(c.needs(k).then(|| {
                            let mut g = Vec::with_capacity(m * n);
                            for i in 0..m {
                                g.extend_from_slice(&c.grad[i * cols + col..i * cols + col + n]);
                            }
                            g
                        }));
                        col += n;
                    }
                }
                out
            },
        ))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| dim_err("stack", "no inputs"))?;
        for p in parts {
            same_shape(first, p, "stack")?;
        }
        let n = first.numel();
        let rows: Vec<Tensor> = parts
            .iter()
            .map(|p| p.reshape(&[1, n]))
            .collect::<Result<_>>()?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        Tensor::concat(&rows, 0)?.reshape(&shape)
    }

    /// 2-D cross-correlation of `self[B×C×H×W]` with `kernel[F×C×kh×kw]`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let &[b, c, h, w] = self.shape() else {
            return Err(dim_err(
                "conv2d",
                format!("input shape {:?} is not B×C×H×W", self.shape()),
            ));
        };
        let &[f, kc, kh, kw] = kernel.shape() else {
            return Err(dim_err(
                "conv2d",
                format!("kernel shape {:?} is not F×C×kh×kw", kernel.shape()),
            ));
        };
        if kc != c {
            return Err(dim_err(
                "conv2d",
                format!(
                    "kernel {:?} expects {kc} channels, input {:?} has {c}",
                    kernel.shape(),
                    self.shape()
                ),
            ));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be positive"));
        }
        let span_h = (h + 2 * padding) as isize - kh as isize;
        let span_w = (w + 2 * padding) as isize - kw as isize;
        if span_h < 0 || span_w < 0 {
            return Err(dim_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
            ));
        }
        let ho = span_h as usize / stride + 1;
        let wo = span_w as usize / stride + 1;
        let geo = ConvGeom {
            b,
            c,
            h,
            w,
            f,
            kh,
            kw,
            ho,
            wo,
            stride,
            padding,
        };
        let out = geo.forward(&self.data(), &kernel.data());
        Ok(Tensor::from_op(
            out,
            vec![b, f, ho, wo],
            vec![self.clone(), kernel.clone()],
            move |ctx| {
                let x = ctx.inputs[0].data();
                let k = ctx.inputs[1].data();
                let (gx, gk) = geo.backward(&x, &k, ctx.grad, ctx.needs(0), ctx.needs(1));
                vec![gx, gk]
            },
        ))
    }

    /// Adds `bias[F]` to every position of channel `F` in `self[B×F×H×W]`.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let &[b, f, h, w] = self.shape() else {
            return Err(dim_err(
                "add_channel_bias",
                format!("shape {:?}", self.shape()),
            ));
        };
        if bias.numel() != f {
            return Err(dim_err(
                "add_channel_bias",
                format!("bias {:?} for {f} channels", bias.shape()),
            ));
        }
        let plane = h * w;
        let mut data = self.to_vec();
        {
            let bv = bias.data();
            for (idx, chunk) in data.chunks_mut(plane).enumerate() {
                let v = bv[idx % f];
                chunk.iter_mut().for_each(|x| *x += v);
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![b, f, h, w],
            vec![self.clone(), bias.clone()],
            move |c| {
                let gb = c.needs(1).then(|| {
                    let mut gb = vec![0.0; f];
                    for (idx, chunk) in c.grad.chunks(plane).enumerate() {
                        gb[idx % f] += chunk.iter().sum::<f64>();
                    }
                    gb
                });
                vec![c.needs(0).then(|| c.grad.to_vec()), gb]
            },
        ))
    }

    /// Replaces the `label` entry of a cosine vector with `cos(acos(c) + margin)`.
    ///
    /// Past `θ + m = π` that target would start rising again, so there the
    /// unit-slope continuation `c + cos(m) − 1` is used; it meets `−1` at the
    /// boundary and keeps the target monotone in `c`.
    pub fn arc_margin(&self, label: usize, margin: f64) -> Result<Tensor> {
        let n = self.numel();
        if label >= n {
            return Err(Error::Contract(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let mut data = self.to_vec();
        let c = data[label].clamp(-1.0, 1.0);
        let theta = c.acos();
        let (target, deriv) = if theta + margin <= PI {
            (
                (theta + margin).cos(),
                (theta + margin).sin() / theta.sin().max(1e-9),
            )
        } else {
            (c + margin.cos() - 1.0, 1.0)
        };
        data[label] = target;
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| {
                let mut g = ctx.grad.to_vec();
                g[label] *= deriv;
                vec![Some(g)]
            },
        ))
    }

    /// Softmax cross-entropy of a logit vector against `label`.
    pub fn cross_entropy(&self, label: usize) -> Result<Tensor> {
        let n = self.numel();
        if label >= n {
            return Err(Error::Contract(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let x = self.data();
        let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = x.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        let loss = lse - x[label];
        let probs: Vec<f64> = x.iter().map(|v| (v - lse).exp()).collect();
        drop(x);
        Ok(Tensor::from_op(
            vec![loss],
            Vec::new(),
            vec![self.clone()],
            move |c| {
                let mut g: Vec<f64> = probs.iter().map(|p| p * c.grad[0]).collect();
                g[label] -= c.grad[0];
                vec![Some(g)]
            },
        ))
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    #[inline]
    fn src(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
            .then_some((y as usize, x as usize))
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.b * self.f * self.ho * self.wo];
        for bi in 0..self.b {
            for fi in 0..self.f {
                for ci in 0..self.c {
                    let xin = &x[((bi * self.c + ci) * self.h) * self.w..][..self.h * self.w];
                    let kk = &k[((fi * self.c + ci) * self.kh) * self.kw..][..self.kh * self.kw];
                    let o =
                        &mut out[((bi * self.f + fi) * self.ho) * self.wo..][..self.ho * self.wo];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            let mut acc = 0.0;
                            for ky in 0..self.kh {
                                for kx in 0..self.kw {
                                    if let Some((y, xx)) = self.src(oy, ky, ox, kx) {
                                        acc += xin[y * self.w + xx] * kk[ky * self.kw + kx];
                                    }
                                }
                            }
                            o[oy * self.wo + ox] += acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(
        &self,
        x: &[f64],
        k: &[f64],
        g: &[f64],
        want_x: bool,
        want_k: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let mut gx = want_x.then(|| vec![0.0; x.len()]);
        let mut gk = want_k.then(|| vec![0.0; k.len()]);
        for bi in 0..self.b {
            for fi in 0..self.f {
                let go = &g[((bi * self.f + fi) * self.ho) * self.wo..][..self.ho * self.wo];
                for ci in 0..self.c {
                    let xoff = ((bi * self.c + ci) * self.h) * self.w;
                    let koff = ((fi * self.c + ci) * self.kh) * self.kw;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            let gv = go[oy * self.wo + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            for ky in 0..self.kh {
                                for kx in 0..self.kw {
                                    if let Some((y, xx)) = self.src(oy, ky, ox, kx) {
                                        let xi = xoff + y * self.w + xx;
                                        let ki = koff + ky * self.kw + kx;
                                        if let Some(gx) = gx.as_mut() {
                                            gx[xi] += gv * k[ki];
                                        }
                                        if let Some(gk) = gk.as_mut() {
                                            gk[ki] += gv * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gk)
    }
}

impl Tensor {
    /// Rows `rows` of a matrix, in the given order (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (m, n) = dims2(self, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(dim_err(
                "select_rows",
                format!("row {bad} of a {m}-row matrix"),
            ));
        }
        let idx: Vec<usize> = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(idx.into(), &[rows.len(), n])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = dims2(self, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(dim_err(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let idx: Vec<usize> = (0..m)
            .flat_map(|i| i * n + start..i * n + start + len)
            .collect();
        self.gather(idx.into(), &[m, len])
    }
}
