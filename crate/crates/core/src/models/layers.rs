//! Small building blocks shared by the teacher, the student and the mapping
//! heads.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{ParamBuilder, Tensor};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.normal("weight", &[inp, out], (inp as f64).powf(-0.5))?;
        let bias = if bias {
            Some(s.constant("bias", &[out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            gamma: s.constant("gamma", &[dim], 1.0)?,
            beta: s.constant("beta", &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, Self::EPS)
    }
}

/// Two-layer GELU feed-forward.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            fc1: Linear::new(&mut s, "fc1", dim, hidden, true)?,
            fc2: Linear::new(&mut s, "fc2", hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

/// Scaled dot-product attention for one head.
///
/// `logits = (q kᵀ + bias) · scale + mask`; returns `(softmax(logits) v, attn)`.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    mask: Option<&Tensor>,
    scale: f64,
) -> Result<(Tensor, Tensor)> {
    let mut logits = q.matmul(&k.transpose()?)?;
    if let Some(b) = bias {
        logits = logits.add(b)?;
    }
    logits = logits.scale(scale);
    if let Some(m) = mask {
        logits = logits.add(m)?;
    }
    let attn = logits.softmax_rows()?;
    Ok((attn.matmul(v)?, attn))
}

/// Standard multi-head self-attention over the rows of `x`: fused QKV
/// projection, per-head attention, output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::Config(format!(
                "{dim} channels do not split into {heads} heads"
            )));
        }
        let mut s = b.scope(name);
        Ok(Self {
            qkv: Linear::new(&mut s, "qkv", dim, 3 * dim, true)?,
            proj: Linear::new(&mut s, "proj", dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// Output rows and the per-head attention maps.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let qkv = self.qkv.forward(x)?;
        let dh = self.dim / self.heads;
        let scale = (dh as f64).powf(-0.5);
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice_cols(h * dh, dh)?;
            let k = qkv.slice_cols(self.dim + h * dh, dh)?;
            let v = qkv.slice_cols(2 * self.dim + h * dh, dh)?;
            let (o, a) = attend(&q, &k, &v, None, None, scale)?;
            outs.push(o);
            maps.push(a);
        }
        let merged = if outs.len() == 1 {
            outs.pop().unwrap()
        } else {
            Tensor::concat(&outs, 1)?
        };
        Ok((self.proj.forward(&merged)?, maps))
    }
}
