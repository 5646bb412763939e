//! Intra-video encoder: patch embedding followed by divided space-time
//! attention blocks.
//!
//! Token layout is `[cls, f0p0, f0p1, …, f1p0, …]` (frame-major). In the
//! temporal stage a patch token attends to the same patch position in every
//! frame; in the spatial stage it attends to the patches of its own frame plus
//! the summary token. The summary token attends to everything in both stages.
//!
//! Each block computes, with pre-normalization,
//!
//! ```text
//! t   = x + temporal(x)
//! s   = t + spatial(t)
//! out = ffn(s) + t          (or s + ffn(s) with `timesformer_residuals`)
//! ```

use std::sync::Arc;

use ndarray::{Array2, Array4};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mask, Var};
use crate::layers;
use crate::params::{Initializer, Mat, ParameterTree};
use crate::sampling::NormalizedClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub frames: usize,
    pub patches: usize,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        1 + self.frames * self.patches
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(frame, patch)` of a non-summary row.
    pub fn position(&self, row: usize) -> Option<(usize, usize)> {
        (row > 0).then(|| ((row - 1) / self.patches, (row - 1) % self.patches))
    }

    pub fn row(&self, frame: usize, patch: usize) -> usize {
        1 + frame * self.patches + patch
    }
}

/// Video token sequence `X = {x_cls, x_1, …, x_Tx}` living in a graph.
#[derive(Debug, Clone, Copy)]
pub struct VideoEmbedding {
    pub tokens: Var,
    pub layout: TokenLayout,
}

/// Splits each frame into non-overlapping `patch × patch` squares.
///
/// Output rows are ordered frame-major then raster order; each row is the
/// patch flattened as `(dy, dx, channel)`.
pub fn patchify(clip: &NormalizedClip, patch: usize) -> Result<Mat> {
    let (n, h, w, c) = clip.frames.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "frame size {h}×{w} is not divisible by patch size {patch}"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut grid = Array2::zeros((n * ph * pw, c * patch * patch));
    for f in 0..n {
        for py in 0..ph {
            for px in 0..pw {
                let row = f * ph * pw + py * pw + px;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            grid[[row, (dy * patch + dx) * c + ch]] =
                                clip.frames[[f, py * patch + dy, px * patch + dx, ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Inverse of [`patchify`] for square frames of side `resolution`.
pub fn unpatchify(
    grid: &Mat,
    frames: usize,
    resolution: usize,
    patch: usize,
) -> Result<Array4<f64>> {
    let side = resolution / patch;
    if patch == 0
        || !resolution.is_multiple_of(patch)
        || grid.dim() != (frames * side * side, 3 * patch * patch)
    {
        return Err(Error::shape(
            "unpatchify",
            &[grid.nrows(), grid.ncols()],
            &[frames * side * side, 3 * patch * patch],
        ));
    }
    Ok(Array4::from_shape_fn(
        (frames, resolution, resolution, 3),
        |(f, y, x, ch)| {
            let row = f * side * side + (y / patch) * side + x / patch;
            grid[[row, ((y % patch) * patch + x % patch) * 3 + ch]]
        },
    ))
}

pub fn init_video_encoder(
    tree: &mut ParameterTree,
    init: &mut Initializer,
    cfg: &ModelConfig,
) -> Result<()> {
    let d = cfg.hidden;
    let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
    layers::init_linear(tree, init, "ivm.patch", patch_dim, d, true)?;
    tree.insert("ivm.cls", init.normal(1, d))?;
    tree.insert("ivm.pos.spatial", init.normal(cfg.patches_per_frame(), d))?;
    tree.insert("ivm.pos.temporal", init.normal(cfg.frames, d))?;
    for b in 0..cfg.video_depth {
        let p = format!("ivm.block{b}");
        for stage in ["temporal", "spatial"] {
            layers::init_layer_norm(tree, init, &format!("{p}.{stage}.norm"), d)?;
            layers::init_self_attention(tree, init, &format!("{p}.{stage}"), d)?;
        }
        layers::init_ffn(tree, init, &format!("{p}.ffn"), d, cfg.ffn_mult)?;
    }
    layers::init_layer_norm(tree, init, "ivm.norm", d)
}

/// `token = patch·W + b + spatial[patch] + temporal[frame]`, with the summary row prepended.
pub fn embed_patches(g: &mut Graph, grid: &Mat, layout: TokenLayout) -> Result<Var> {
    let tree = g.params();
    let weight = tree.require("ivm.patch.weight")?;
    if grid.ncols() != weight.nrows() || grid.nrows() != layout.frames * layout.patches {
        return Err(Error::shape(
            "embed_patches (grid vs projection)",
            &[grid.nrows(), grid.ncols()],
            &[layout.frames * layout.patches, weight.nrows()],
        ));
    }
    let spatial_rows = tree.require("ivm.pos.spatial")?.nrows();
    let temporal_rows = tree.require("ivm.pos.temporal")?.nrows();
    if layout.patches != spatial_rows || layout.frames > temporal_rows {
        return Err(Error::shape(
            "embed_patches (layout vs positional tables)",
            &[layout.frames, layout.patches],
            &[temporal_rows, spatial_rows],
        ));
    }
    let x = g.constant(grid.clone());
    let proj = layers::linear(g, "ivm.patch", x);
    let spatial = g.param("ivm.pos.spatial");
    let temporal = g.param("ivm.pos.temporal");
    let rows = layout.frames * layout.patches;
    let sp = g.select_rows(spatial, (0..rows).map(|r| r % layout.patches).collect());
    let tp = g.select_rows(temporal, (0..rows).map(|r| r / layout.patches).collect());
    let tokens = g.add(proj, sp);
    let tokens = g.add(tokens, tp);
    let cls = g.param("ivm.cls");
    Ok(g.concat_rows(&[cls, tokens]))
}

/// Same patch position across frames; the summary row sees everything.
pub fn temporal_mask(layout: TokenLayout) -> Mask {
    Arc::new(Array2::from_shape_fn(
        (layout.len(), layout.len()),
        |(q, k)| match (layout.position(q), layout.position(k)) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some((_, pq)), Some((_, pk))) => pq == pk,
        },
    ))
}

/// Patches of the same frame plus the summary row; the summary row sees everything.
pub fn spatial_mask(layout: TokenLayout) -> Mask {
    Arc::new(Array2::from_shape_fn(
        (layout.len(), layout.len()),
        |(q, k)| match (layout.position(q), layout.position(k)) {
            (None, _) | (_, None) => true,
            (Some((fq, _)), Some((fk, _))) => fq == fk,
        },
    ))
}

fn stage(g: &mut Graph, prefix: &str, x: Var, mask: Mask, cfg: &ModelConfig) -> Var {
    let h = layers::layer_norm(g, &format!("{prefix}.norm"), x, cfg.layer_norm_eps);
    layers::self_attention(g, prefix, h, cfg.heads, Some(mask))
}

/// Temporal multi-head attention of block `block` (no residual).
pub fn temporal_attention(
    g: &mut Graph,
    block: usize,
    x: Var,
    layout: TokenLayout,
    cfg: &ModelConfig,
) -> Var {
    stage(
        g,
        &format!("ivm.block{block}.temporal"),
        x,
        temporal_mask(layout),
        cfg,
    )
}

/// Spatial multi-head attention of block `block` (no residual).
pub fn spatial_attention(
    g: &mut Graph,
    block: usize,
    x: Var,
    layout: TokenLayout,
    cfg: &ModelConfig,
) -> Var {
    stage(
        g,
        &format!("ivm.block{block}.spatial"),
        x,
        spatial_mask(layout),
        cfg,
    )
}

pub fn divided_attention_block(
    g: &mut Graph,
    block: usize,
    x: Var,
    layout: TokenLayout,
    cfg: &ModelConfig,
) -> Var {
    let a = temporal_attention(g, block, x, layout, cfg);
    let temporal_cue = g.add(x, a);
    let a = spatial_attention(g, block, temporal_cue, layout, cfg);
    let spatial_cue = g.add(temporal_cue, a);
    let f = layers::ffn(
        g,
        &format!("ivm.block{block}.ffn"),
        spatial_cue,
        cfg.layer_norm_eps,
    );
    if cfg.timesformer_residuals {
        g.add(spatial_cue, f)
    } else {
        g.add(f, temporal_cue)
    }
}

/// patchify → embed → `video_depth` divided blocks → final layer norm.
pub fn encode_video(
    g: &mut Graph,
    clip: &NormalizedClip,
    cfg: &ModelConfig,
) -> Result<VideoEmbedding> {
    if clip.resolution() != cfg.resolution {
        return Err(Error::shape(
            "encode_video (clip resolution vs config)",
            &[clip.resolution()],
            &[cfg.resolution],
        ));
    }
    let grid = patchify(clip, cfg.patch_size)?;
    let layout = TokenLayout {
        frames: clip.n_frames(),
        patches: cfg.patches_per_frame(),
    };
    let mut x = embed_patches(g, &grid, layout)?;
    for b in 0..cfg.video_depth {
        x = divided_attention_block(g, b, x, layout, cfg);
    }
    let tokens = layers::layer_norm(g, "ivm.norm", x, cfg.layer_norm_eps);
    Ok(VideoEmbedding { tokens, layout })
}
