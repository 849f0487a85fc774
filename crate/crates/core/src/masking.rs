//! Tube masking: one random spatial pattern shared by every temporal slice.

use rand::Rng;

use crate::config::{visible_count, Grid};
use crate::error::{Result, SvfapError};
use crate::tape::Mat;
use crate::tokenizer::TokenGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct TubeMask {
    visible_spatial: Vec<usize>,
    ratio: f64,
    grid: Grid,
}

impl TubeMask {
    /// Builds a mask from an explicit visible set.
    pub fn from_visible(grid: Grid, ratio: f64, mut visible: Vec<usize>) -> Result<Self> {
        visible.sort_unstable();
        visible.dedup();
        if visible.is_empty() {
            return Err(SvfapError::InvalidArgument("mask has no visible token".into()));
        }
        if visible.last().is_some_and(|&s| s >= grid.spatial()) {
            return Err(SvfapError::InvalidArgument("visible index out of range".into()));
        }
        Ok(TubeMask {
            visible_spatial: visible,
            ratio,
            grid,
        })
    }

    /// Mask with every token visible.
    pub fn all_visible(grid: Grid) -> Self {
        TubeMask {
            visible_spatial: (0..grid.spatial()).collect(),
            ratio: 0.0,
            grid,
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Sorted visible spatial indices, identical for every slice.
    pub fn visible_spatial(&self) -> &[usize] {
        &self.visible_spatial
    }

    pub fn visible_per_slice(&self) -> usize {
        self.visible_spatial.len()
    }

    pub fn num_visible(&self) -> usize {
        self.grid.t * self.visible_spatial.len()
    }

    pub fn num_masked(&self) -> usize {
        self.grid.len() - self.num_visible()
    }

    /// Lattice rows of the visible tokens: time-major, ascending spatial index.
    pub fn visible_rows(&self) -> Vec<usize> {
        let s = self.grid.spatial();
        (0..self.grid.t)
            .flat_map(|t| self.visible_spatial.iter().map(move |&v| t * s + v))
            .collect()
    }

    /// Lattice rows hidden from the encoder (the loss support).
    pub fn masked_rows(&self) -> Vec<usize> {
        let mut vis = vec![false; self.grid.spatial()];
        for &v in &self.visible_spatial {
            vis[v] = true;
        }
        (0..self.grid.len())
            .filter(|n| !vis[n % self.grid.spatial()])
            .collect()
    }

    pub fn is_visible(&self, row: usize) -> bool {
        self.visible_spatial
            .binary_search(&(row % self.grid.spatial()))
            .is_ok()
    }
}

/// Draws round(S·(1−ρ)) visible spatial positions uniformly without replacement.
pub fn make_tube_mask<R: Rng + ?Sized>(grid: Grid, ratio: f64, rng: &mut R) -> Result<TubeMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(SvfapError::InvalidArgument(format!(
            "masking ratio {ratio} outside [0, 1)"
        )));
    }
    let spatial = grid.spatial();
    let keep = visible_count(spatial, ratio);
    if keep == 0 {
        return Err(SvfapError::InvalidArgument(format!(
            "masking ratio {ratio} leaves no visible token on a {spatial}-position slice"
        )));
    }
    let mut visible = rand::seq::index::sample(rng, spatial, keep).into_vec();
    visible.sort_unstable();
    Ok(TubeMask {
        visible_spatial: visible,
        ratio,
        grid,
    })
}

pub fn gather_visible(tokens: &TokenGrid, mask: &TubeMask) -> Result<Mat> {
    if tokens.grid != mask.grid {
        return Err(SvfapError::shape(format!(
            "token grid {:?} vs mask grid {:?}",
            tokens.grid, mask.grid
        )));
    }
    Ok(tokens.tokens.select(ndarray::Axis(0), &mask.visible_rows()))
}

/// Re-inserts visible rows at their lattice positions; every masked
/// position receives `mask_token`.
pub fn scatter_full(visible: &Mat, mask: &TubeMask, mask_token: &Mat) -> Result<Mat> {
    if visible.nrows() != mask.num_visible() {
        return Err(SvfapError::shape(format!(
            "{} visible rows for a mask with {} visible tokens",
            visible.nrows(),
            mask.num_visible()
        )));
    }
    if mask_token.dim() != (1, visible.ncols()) {
        return Err(SvfapError::shape("mask token must be 1×D"));
    }
    let mut out = Mat::zeros((mask.grid.len(), visible.ncols()));
    for mut row in out.rows_mut() {
        row.assign(&mask_token.row(0));
    }
    for (i, r) in mask.visible_rows().into_iter().enumerate() {
        out.row_mut(r).assign(&visible.row(i));
    }
    Ok(out)
}
