use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LayerNorm, Linear, ParamInit, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore, Tape, Var};

/// Non-overlapping square patches tiling an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(image_h: usize, image_w: usize, patch_size: usize, channels: usize) -> Result<Self> {
        if patch_size == 0 || image_h % patch_size != 0 || image_w % patch_size != 0 {
            return Err(Error::shape("patch_embed", &[image_h, image_w], &[patch_size]));
        }
        Ok(Self {
            grid_h: image_h / patch_size,
            grid_w: image_w / patch_size,
            patch_size,
            channels,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Flattens patches, projects them linearly and optionally prepends a
/// class token and adds learned absolute position embeddings.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub grid: PatchGrid,
    pub proj: Linear,
    pub class_token: Option<ParamId>,
    pub position: Option<ParamId>,
}

impl PatchEmbed {
    pub fn new<T: Float, R: Rng>(
        init: &mut ParamInit<'_, T, R>,
        grid: PatchGrid,
        dim: usize,
        class_token: bool,
        position_embedding: bool,
    ) -> Self {
        let tokens = grid.num_patches() + usize::from(class_token);
        Self {
            grid,
            proj: Linear::new(&mut init.sub("proj"), grid.patch_dim(), dim, true),
            class_token: class_token.then(|| init.normal("cls_token", &[1, 1, dim], INIT_STD)),
            position: position_embedding.then(|| init.normal("position", &[tokens, dim], INIT_STD)),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.num_patches() + usize::from(self.class_token.is_some())
    }

    /// `[batch, channels, h, w]` images to `[batch, tokens, dim]`.
    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = images.shape();
        let g = &self.grid;
        let p = g.patch_size;
        if s.len() != 4 || s[1] != g.channels || s[2] != g.grid_h * p || s[3] != g.grid_w * p {
            return Err(Error::shape("patch_embed", &s, &[g.channels, g.grid_h * p, g.grid_w * p]));
        }
        let b = s[0];
        let patches = images
            .reshape(&[b, g.channels, g.grid_h, p, g.grid_w, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b, g.num_patches(), g.patch_dim()])?;
        let mut tokens = self.proj.forward(tape, store, patches)?;
        if let Some(cls) = self.class_token {
            let cls = tape.param(store, cls).index_select(0, &vec![0; b])?;
            tokens = tape.concat(&[cls, tokens], 1)?;
        }
        if let Some(pos) = self.position {
            tokens = tokens.add(tape.param(store, pos))?;
        }
        Ok(tokens)
    }
}

/// Concatenates each 2×2 neighbourhood, normalizes, and projects `4C → 2C`.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new<T: Float, R: Rng>(init: &mut ParamInit<'_, T, R>, grid_h: usize, grid_w: usize, dim: usize) -> Result<Self> {
        if grid_h % 2 != 0 || grid_w % 2 != 0 {
            return Err(Error::shape("patch_merging", &[grid_h, grid_w], &[2, 2]));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            norm: LayerNorm::new(&mut init.sub("norm"), 4 * dim),
            reduction: Linear::new(&mut init.sub("reduction"), 4 * dim, 2 * dim, false),
        })
    }

    pub fn output_grid(&self) -> (usize, usize) {
        (self.grid_h / 2, self.grid_w / 2)
    }

    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (h, w, c) = (self.grid_h, self.grid_w, self.dim);
        if s.len() != 3 || s[1] != h * w || s[2] != c {
            return Err(Error::shape("patch_merging", &s, &[h * w, c]));
        }
        let b = s[0];
        let merged = x
            .reshape(&[b, h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, (h / 2) * (w / 2), 4 * c])?;
        let normed = self.norm.forward(tape, store, merged)?;
        self.reduction.forward(tape, store, normed)
    }
}
