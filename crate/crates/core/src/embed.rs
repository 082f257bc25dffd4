//! 3D sub-volume splitting and projection into vision tokens.
//!
//! A volume is divided into non-overlapping cubes, each cube is flattened
//! row-major and linearly projected to the encoder width, an optional
//! learnable aggregate row is prepended, and a learnable position embedding
//! table is added. Everything here is learnable; the downstream encoder is
//! the frozen part.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::rng::{self, trunc_normal_tensor};
use crate::tensor::{Element, Tensor};
use crate::volume::Volume;

pub const W_PROJ: &str = "embed.w_proj";
pub const POS_TABLE: &str = "embed.pos";
pub const AGGREGATE: &str = "embed.aggregate";

/// Cubic patch geometry: side length and stride per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub stride: usize,
}

impl PatchGrid {
    pub fn non_overlapping(patch: usize) -> Self {
        PatchGrid {
            patch,
            stride: patch,
        }
    }

    /// Patch counts per axis: n = floor((D - p) / s) + 1.
    pub fn counts(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        if self.patch == 0 || self.stride == 0 {
            return Err(Error::invalid("patch and stride must be positive"));
        }
        let mut out = [0usize; 3];
        for (i, &d) in dims.iter().enumerate() {
            if self.patch > d {
                return Err(Error::invalid(format!(
                    "patch {} exceeds volume extent {d}",
                    self.patch
                )));
            }
            out[i] = (d - self.patch) / self.stride + 1;
        }
        Ok(out)
    }

    pub fn num_patches(&self, dims: [usize; 3]) -> Result<usize> {
        let c = self.counts(dims)?;
        Ok(c[0] * c[1] * c[2])
    }
}

/// Split a volume into flattened patches, one row per patch.
///
/// Patches are ordered lexicographically by (z, y, x) block index; each row
/// is the row-major flattening of its cube. Output shape is (N_v, p^3).
pub fn patchify(v: &Volume, grid: &PatchGrid) -> Result<Tensor<f32>> {
    let counts = grid.counts(v.dims())?;
    let p = grid.patch;
    let s = grid.stride;
    let n_patches = counts[0] * counts[1] * counts[2];
    let mut data = Vec::with_capacity(n_patches * p * p * p);
    for bz in 0..counts[0] {
        for by in 0..counts[1] {
            for bx in 0..counts[2] {
                let (z0, y0, x0) = (bz * s, by * s, bx * s);
                for dz in 0..p {
                    for dy in 0..p {
                        let start = v.index(z0 + dz, y0 + dy, x0);
                        data.extend_from_slice(&v.voxels()[start..start + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n_patches, p * p * p], data)
}

#[derive(Clone, Copy, Debug)]
pub struct EmbedConfig {
    pub patch: usize,
    pub stride: usize,
    pub d_vis: usize,
    /// Prepend a learnable pooled row, making the token count N_v + 1.
    pub aggregate: bool,
}

impl EmbedConfig {
    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            patch: self.patch,
            stride: self.stride,
        }
    }

    pub fn token_rows(&self, n_patches: usize) -> usize {
        n_patches + usize::from(self.aggregate)
    }
}

/// Register the learnable projection, position table, and aggregate row.
pub fn init_embed_params<E: Element>(
    store: &mut ParamStore<E>,
    cfg: &EmbedConfig,
    n_patches: usize,
    seed: u64,
) -> Result<()> {
    let mut r = rng::stream(rng::derive_seed(seed, "embed"));
    let p3 = cfg.patch * cfg.patch * cfg.patch;
    store.insert(
        W_PROJ,
        trunc_normal_tensor(&mut r, vec![p3, cfg.d_vis], 0.02),
        false,
    )?;
    store.insert(
        POS_TABLE,
        trunc_normal_tensor(&mut r, vec![cfg.token_rows(n_patches), cfg.d_vis], 0.02),
        false,
    )?;
    if cfg.aggregate {
        store.insert(
            AGGREGATE,
            trunc_normal_tensor(&mut r, vec![cfg.d_vis], 0.02),
            false,
        )?;
    }
    Ok(())
}

/// Project flattened patches into vision tokens and add positions.
///
/// `patches` is an (N_v, p^3) node. Output is (N_v + a, d_vis) where row 0
/// is the aggregate row when enabled.
pub fn embed_tokens<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    patches: NodeId,
    cfg: &EmbedConfig,
) -> Result<NodeId> {
    let w = g.param(store, W_PROJ)?;
    let projected = g.matmul(patches, w)?;
    let tokens = if cfg.aggregate {
        let agg = g.param(store, AGGREGATE)?;
        let agg_row = g.reshape(agg, vec![1, cfg.d_vis])?;
        g.concat(0, &[agg_row, projected])?
    } else {
        projected
    };
    let pos = g.param(store, POS_TABLE)?;
    if g.shape(pos) != g.shape(tokens) {
        return Err(Error::ShapeMismatch {
            op: "embed_tokens",
            lhs: g.shape(tokens).to_vec(),
            rhs: g.shape(pos).to_vec(),
        });
    }
    g.add(tokens, pos)
}
