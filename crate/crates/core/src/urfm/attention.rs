//! Center-query attention that maps any number of pixel features onto a
//! fixed set of local features.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::facegeom::{CellGrid, FacialMode, LandmarkSet, PeBuckets, Pif};
use crate::numerics::{ParamBuilder, Tensor};

/// Learnable query embeddings, one per cell of a `√L × √L` tiling of the
/// image.
#[derive(Debug, Clone)]
pub struct LocalCenters {
    pub centers: Tensor,
    pub grid: CellGrid,
}

impl LocalCenters {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        count: usize,
        dim: usize,
        image: usize,
    ) -> Result<Self> {
        let grid = CellGrid::square(count, image, image)?;
        let centers = b.normal("centers", &[count, dim], 1.0 / (dim as f64).sqrt())?;
        Ok(Self { centers, grid })
    }

    pub fn count(&self) -> usize {
        self.grid.cells()
    }
}

/// Positional-encoding settings shared by both branches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeSettings {
    pub mode: FacialMode,
    pub alpha: f64,
    pub beta: f64,
    /// `None` selects half the grid diagonal.
    pub gamma: Option<f64>,
}

impl Default for PeSettings {
    fn default() -> Self {
        Self {
            mode: FacialMode::Saliency,
            alpha: 4.0,
            beta: 16.0,
            gamma: None,
        }
    }
}

impl PeSettings {
    pub fn resolved_gamma(&self, grid: &CellGrid) -> f64 {
        self.gamma.unwrap_or_else(|| PeBuckets::default_gamma(grid))
    }

    pub fn pif(&self, grid: &CellGrid) -> Result<Pif> {
        let gamma = self.resolved_gamma(grid);
        Pif::new(
            self.alpha,
            self.beta,
            PeBuckets::default_dmax(grid, gamma, self.mode),
        )
    }
}

/// Per-branch projections and positional buckets.
#[derive(Debug, Clone)]
pub struct UrfmBranch {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub pe: PeBuckets,
}

impl UrfmBranch {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        dim: usize,
        grid: &CellGrid,
        pe: &PeSettings,
    ) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        let pif = pe.pif(grid)?;
        Ok(Self {
            w_q: b.normal("w_q", &[dim, dim], std)?,
            w_k: b.normal("w_k", &[dim, dim], std)?,
            w_v: b.normal("w_v", &[dim, dim], std)?,
            pe: PeBuckets::new(
                b.constant("pe", &[pif.buckets(), 1], 0.0)?,
                pif,
                pe.resolved_gamma(grid),
                pe.mode,
            )?,
        })
    }
}

/// Local features and the attention that produced them.
#[derive(Debug, Clone)]
pub struct Mapped {
    /// `[L, d]`.
    pub local: Tensor,
    /// `[L, N]`, row-stochastic. Averaged over heads when there are several.
    pub attn: Tensor,
}

/// `attn = softmax((C W_q + b)(f W_k)ᵀ / √d_h)` per head and
/// `h = attn (f W_v)`, where `b` is the bucket value of each center.
///
/// `pe_index` holds one bucket index per center.
pub fn urfm_attention(
    features: &Tensor,
    centers: &LocalCenters,
    branch: &UrfmBranch,
    pe_index: &[usize],
    heads: usize,
) -> Result<Mapped> {
    let fs = features.shape();
    let cs = centers.centers.shape();
    if fs.len() != 2 || fs[0] == 0 || fs[1] != cs[1] {
        return Err(dim_err(
            "urfm_attention",
            format!("features {:?} against centers {:?}", fs, cs),
        ));
    }
    if pe_index.len() != cs[0] {
        return Err(dim_err(
            "urfm_attention",
            format!(
                "{} positional indices for {} centers",
                pe_index.len(),
                cs[0]
            ),
        ));
    }
    let d = cs[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "{d} channels do not split into {heads} heads"
        )));
    }
    let bias = branch
        .pe
        .lookup(pe_index)?
        .matmul(&Tensor::new(vec![1.0; d], &[1, d])?)?;
    let q = centers.centers.matmul(&branch.w_q)?.add(&bias)?;
    let k = features.matmul(&branch.w_k)?;
    let v = features.matmul(&branch.w_v)?;
    per_head(&q, &k, &v, heads)
}

/// Self-attention mapping over the pixel features themselves, used by the
/// ablations without local centers. No positional encoding.
pub fn self_attention_mapping(
    features: &Tensor,
    branch: &UrfmBranch,
    heads: usize,
) -> Result<Mapped> {
    let d = branch.w_q.shape()[0];
    if features.shape().len() != 2 || features.shape()[1] != d {
        return Err(dim_err(
            "self_attention_mapping",
            format!("features {:?} for width {d}", features.shape()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "{d} channels do not split into {heads} heads"
        )));
    }
    let q = features.matmul(&branch.w_q)?;
    let k = features.matmul(&branch.w_k)?;
    let v = features.matmul(&branch.w_v)?;
    per_head(&q, &k, &v, heads)
}

fn per_head(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Mapped> {
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    if heads == 1 {
        let attn = q.matmul(&k.transpose()?)?.scale(scale).softmax_rows()?;
        return Ok(Mapped {
            local: attn.matmul(v)?,
            attn,
        });
    }
    let mut outs = Vec::with_capacity(heads);
    let mut attn_sum: Option<Tensor> = None;
    for h in 0..heads {
        let (qh, kh, vh) = (
            q.slice_cols(h * dh, dh)?,
            k.slice_cols(h * dh, dh)?,
            v.slice_cols(h * dh, dh)?,
        );
        let a = qh.matmul(&kh.transpose()?)?.scale(scale).softmax_rows()?;
        outs.push(a.matmul(&vh)?);
        attn_sum = Some(match attn_sum {
            None => a,
            Some(s) => s.add(&a)?,
        });
    }
    Ok(Mapped {
        local: Tensor::concat(&outs, 1)?,
        attn: attn_sum.expect("heads > 0").scale(1.0 / heads as f64),
    })
}

/// Bucket index of every center for one face.
pub fn center_indices(
    centers: &LocalCenters,
    branch: &UrfmBranch,
    landmarks: Option<&LandmarkSet>,
) -> Result<Vec<usize>> {
    branch.pe.indices(&centers.grid, landmarks)
}
