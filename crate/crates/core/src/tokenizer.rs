//! Clip ⇄ token conversion: non-overlapping spatiotemporal patches, the
//! linear patch embedding and the fixed sinusoidal position table.
//!
//! Token order is time-major then row-major over space, so token
//! `n = (t·h_grid + y)·w_grid + x`. Inside a patch, values are flattened
//! in `(t, y, x, channel)` order.

use ndarray::{Array4, ArrayView4};

use crate::config::Grid;
use crate::error::{Result, SvfapError};
use crate::params::ParamSpec;
use crate::tape::{Mat, Tape, Var};

/// Token embeddings with their lattice geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Mat,
    pub grid: Grid,
}

impl TokenGrid {
    pub fn new(tokens: Mat, grid: Grid) -> Result<Self> {
        if tokens.nrows() != grid.len() {
            return Err(SvfapError::shape(format!(
                "{} tokens for a {:?} grid",
                tokens.nrows(),
                grid
            )));
        }
        if !tokens.iter().all(|v| v.is_finite()) {
            return Err(SvfapError::NonFinite("token grid".into()));
        }
        Ok(TokenGrid { tokens, grid })
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Splits a T×H×W×3 clip into flattened patches.
pub fn patchify(clip: ArrayView4<'_, f64>, patch: [usize; 3]) -> Result<(Mat, Grid)> {
    let (t, h, w, ch) = clip.dim();
    let [pt, ph, pw] = patch;
    if ch != 3 {
        return Err(SvfapError::shape(format!("clip has {ch} channels, expected 3")));
    }
    if pt == 0 || ph == 0 || pw == 0 || t % pt != 0 || h % ph != 0 || w % pw != 0 {
        return Err(SvfapError::shape(format!(
            "clip {t}×{h}×{w} not divisible into {pt}×{ph}×{pw} patches"
        )));
    }
    let grid = Grid::new(t / pt, h / ph, w / pw);
    let pdim = pt * ph * pw * 3;
    let mut out = Mat::zeros((grid.len(), pdim));
    for gt in 0..grid.t {
        for gy in 0..grid.h {
            for gx in 0..grid.w {
                let n = (gt * grid.h + gy) * grid.w + gx;
                let mut row = out.row_mut(n);
                let mut j = 0;
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            for c in 0..3 {
                                row[j] = clip[[gt * pt + dt, gy * ph + dy, gx * pw + dx, c]];
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, grid))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Mat, grid: Grid, patch: [usize; 3]) -> Result<Array4<f64>> {
    let [pt, ph, pw] = patch;
    let pdim = pt * ph * pw * 3;
    if patches.nrows() != grid.len() || patches.ncols() != pdim {
        return Err(SvfapError::shape(format!(
            "patches {:?} do not match grid {:?} with patch dim {pdim}",
            patches.dim(),
            grid
        )));
    }
    let mut clip = Array4::zeros((grid.t * pt, grid.h * ph, grid.w * pw, 3));
    for gt in 0..grid.t {
        for gy in 0..grid.h {
            for gx in 0..grid.w {
                let row = patches.row((gt * grid.h + gy) * grid.w + gx);
                let mut j = 0;
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            for c in 0..3 {
                                clip[[gt * pt + dt, gy * ph + dy, gx * pw + dx, c]] = row[j];
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(clip)
}

/// Fixed 1-D sine/cosine table over the flattened token index.
pub fn positions(n: usize, dim: usize) -> Result<Mat> {
    if !dim.is_multiple_of(2) {
        return Err(SvfapError::shape(format!("positional width {dim} must be even")));
    }
    let mut table = Mat::zeros((n, dim));
    for (pos, mut row) in table.rows_mut().into_iter().enumerate() {
        for j in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * j as f64 / dim as f64);
            row[2 * j] = angle.sin();
            row[2 * j + 1] = angle.cos();
        }
    }
    Ok(table)
}

/// `patches·W + b` plus the position table.
pub fn embed(patches: &Mat, weight: &Mat, bias: &Mat, grid: Grid) -> Result<TokenGrid> {
    if patches.ncols() != weight.nrows() || bias.dim() != (1, weight.ncols()) {
        return Err(SvfapError::shape(format!(
            "patches {:?}, weight {:?}, bias {:?}",
            patches.dim(),
            weight.dim(),
            bias.dim()
        )));
    }
    let tokens = patches.dot(weight) + bias + positions(patches.nrows(), weight.ncols())?;
    TokenGrid::new(tokens, grid)
}

pub fn embed_specs(patch_dim: usize, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::dense("patch_embed.weight", patch_dim, dim),
        ParamSpec::bias("patch_embed.bias", dim),
    ]
}

/// Graph form of [`embed`] over the full token lattice.
pub fn embed_node(t: &mut Tape, patches: Var) -> Var {
    let w = t.param("patch_embed.weight");
    let b = t.param("patch_embed.bias");
    let x = t.matmul(patches, w);
    let x = t.add_row(x, b);
    let (n, c) = t.shape(x);
    let pos = if t.is_tracing() {
        t.placeholder(n, c)
    } else {
        t.constant(positions(n, c).expect("even embedding width"))
    };
    t.add(x, pos)
}
