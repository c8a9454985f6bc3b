//! Local attention inside non-overlapping windows, optionally over a
//! cyclically shifted grid.
//!
//! Windowing is expressed as a token permutation: the tokens of every window
//! (after the shift) are gathered into contiguous runs, attention runs per
//! run, and the inverse permutation restores grid order. The cyclic shift is
//! folded into the same permutation, so no separate roll is needed.

use rand::Rng;

use super::attention::{merge_heads, scaled_dot_attention, SelfAttention};
use super::ParamInit;
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};

/// Effective window and shift on a concrete grid. A window that covers a
/// whole axis is clamped to it, and no shift is applied along that axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub window_h: usize,
    pub window_w: usize,
    pub shift_h: usize,
    pub shift_w: usize,
}

impl WindowLayout {
    pub fn new(grid_h: usize, grid_w: usize, window: usize, shift: usize) -> Result<Self> {
        let (window_h, window_w) = (window.min(grid_h), window.min(grid_w));
        let layout = Self {
            grid_h,
            grid_w,
            window_h,
            window_w,
            shift_h: if grid_h <= window { 0 } else { shift },
            shift_w: if grid_w <= window { 0 } else { shift },
        };
        if window == 0 || grid_h % window_h != 0 || grid_w % window_w != 0 {
            return Err(Error::shape("window_attention", &[grid_h, grid_w], &[window]));
        }
        if shift >= window && shift > 0 {
            return Err(Error::Validation(format!("shift {shift} must be smaller than window {window}")));
        }
        Ok(layout)
    }

    pub fn num_windows(&self) -> usize {
        (self.grid_h / self.window_h) * (self.grid_w / self.window_w)
    }

    pub fn window_len(&self) -> usize {
        self.window_h * self.window_w
    }

    pub fn is_shifted(&self) -> bool {
        self.shift_h > 0 || self.shift_w > 0
    }

    /// Coordinates on the shifted grid of token `t` of window `w`.
    pub fn shifted_position(&self, w: usize, t: usize) -> (usize, usize) {
        let per_row = self.grid_w / self.window_w;
        let (wy, wx) = (w / per_row, w % per_row);
        (wy * self.window_h + t / self.window_w, wx * self.window_w + t % self.window_w)
    }

    /// Coordinates on the original grid of a shifted-grid position.
    pub fn source_position(&self, (r, c): (usize, usize)) -> (usize, usize) {
        ((r + self.shift_h) % self.grid_h, (c + self.shift_w) % self.grid_w)
    }
}

/// Flat source indices in window-major order, cyclic shift included.
pub fn window_permutation(layout: &WindowLayout) -> Vec<usize> {
    let mut perm = Vec::with_capacity(layout.grid_h * layout.grid_w);
    for w in 0..layout.num_windows() {
        for t in 0..layout.window_len() {
            let (r, c) = layout.source_position(layout.shifted_position(w, t));
            perm.push(r * layout.grid_w + c);
        }
    }
    perm
}

/// `[num_windows, window_len, window_len]` additive mask that blocks
/// attention between tokens which were only brought together by the wrap
/// of the cyclic shift. All zeros when unshifted.
pub fn shifted_window_mask<T: Float>(layout: &WindowLayout) -> Tensor<T> {
    let region = |pos: usize, size: usize, window: usize, shift: usize| -> usize {
        if shift == 0 || pos < size - window {
            0
        } else if pos < size - shift {
            1
        } else {
            2
        }
    };
    let n = layout.window_len();
    let mut data = Vec::with_capacity(layout.num_windows() * n * n);
    for w in 0..layout.num_windows() {
        let labels: Vec<usize> = (0..n)
            .map(|t| {
                let (r, c) = layout.shifted_position(w, t);
                3 * region(r, layout.grid_h, layout.window_h, layout.shift_h)
                    + region(c, layout.grid_w, layout.window_w, layout.shift_w)
            })
            .collect();
        for i in 0..n {
            for j in 0..n {
                data.push(if labels[i] == labels[j] { T::zero() } else { T::neg_infinity() });
            }
        }
    }
    Tensor::new(&[layout.num_windows(), n, n], data).expect("mask shape")
}

/// Learned per-head bias indexed by the relative offset of two tokens.
#[derive(Clone, Debug)]
pub struct RelativePositionBias {
    pub table: ParamId,
    /// Table row for every `(query, key)` pair, row-major.
    pub index: Vec<usize>,
    pub num_heads: usize,
    pub len: usize,
}

impl RelativePositionBias {
    /// Bias over an `h × w` token grid.
    pub fn for_grid<T: Float, R: Rng>(init: &mut ParamInit<'_, T, R>, h: usize, w: usize, num_heads: usize) -> Self {
        let rows = (2 * h - 1) * (2 * w - 1);
        Self {
            table: init.zeros("table", &[rows, num_heads]),
            index: grid_offsets(h, w),
            num_heads,
            len: h * w,
        }
    }

    /// Bias over an `h × w` grid preceded by a class token. The class
    /// token's three relations (to tokens, from tokens, to itself) get
    /// dedicated table rows.
    pub fn for_grid_with_class<T: Float, R: Rng>(
        init: &mut ParamInit<'_, T, R>,
        h: usize,
        w: usize,
        num_heads: usize,
    ) -> Self {
        let grid_rows = (2 * h - 1) * (2 * w - 1);
        let inner = grid_offsets(h, w);
        let n = h * w;
        let mut index = Vec::with_capacity((n + 1) * (n + 1));
        for i in 0..=n {
            for j in 0..=n {
                index.push(match (i, j) {
                    (0, 0) => grid_rows + 2,
                    (0, _) => grid_rows,
                    (_, 0) => grid_rows + 1,
                    _ => inner[(i - 1) * n + (j - 1)],
                });
            }
        }
        Self {
            table: init.zeros("table", &[grid_rows + 3, num_heads]),
            index,
            num_heads,
            len: n + 1,
        }
    }

    /// `[heads, len, len]` bias.
    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, store: &ParamStore<T>) -> Result<Var<'t, T>> {
        tape.param(store, self.table)
            .index_select(0, &self.index)?
            .reshape(&[self.len, self.len, self.num_heads])?
            .permute(&[2, 0, 1])
    }
}

fn grid_offsets(h: usize, w: usize) -> Vec<usize> {
    let n = h * w;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dr = (i / w) as isize - (j / w) as isize + h as isize - 1;
            let dc = (i % w) as isize - (j % w) as isize + w as isize - 1;
            index.push(dr as usize * (2 * w - 1) + dc as usize);
        }
    }
    index
}

/// Window (or shifted-window) multi-head self-attention on a token grid.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub attn: SelfAttention,
    pub layout: WindowLayout,
    pub bias: Option<RelativePositionBias>,
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl WindowAttention {
    pub fn new<T: Float, R: Rng>(
        init: &mut ParamInit<'_, T, R>,
        dim: usize,
        num_heads: usize,
        layout: WindowLayout,
        relative_position_bias: bool,
    ) -> Self {
        let perm = window_permutation(&layout);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let bias = relative_position_bias.then(|| {
            RelativePositionBias::for_grid(&mut init.sub("relative_position_bias"), layout.window_h, layout.window_w, num_heads)
        });
        Self {
            attn: SelfAttention::new(init, dim, num_heads),
            layout,
            bias,
            perm,
            inverse,
        }
    }

    /// `x` is `[batch, grid_h * grid_w, dim]` in row-major grid order.
    pub fn forward_with_weights<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        let l = &self.layout;
        if s.len() != 3 || s[1] != l.grid_h * l.grid_w {
            return Err(Error::shape("window_attention", &s, &[l.grid_h, l.grid_w]));
        }
        let (b, dim) = (s[0], s[2]);
        let (nw, n, h) = (l.num_windows(), l.window_len(), self.attn.num_heads);

        let windows = x.index_select(1, &self.perm)?.reshape(&[b * nw, n, dim])?;
        let (q, k, v) = self.attn.project(tape, store, windows)?;
        // scores are computed per window; the bias terms broadcast over them
        let rank_fix = |t: Var<'t, T>| t.reshape(&[b, nw, h, n, t.shape()[3]]);
        let mut bias: Option<Var<'t, T>> = None;
        if let Some(rel) = &self.bias {
            bias = Some(rel.forward(tape, store)?);
        }
        if l.is_shifted() {
            let mask = tape.constant(shifted_window_mask::<T>(l).reshape(&[nw, 1, n, n])?);
            bias = Some(match bias {
                Some(rb) => mask.add(rb)?,
                None => mask,
            });
        }
        let (out, weights) = scaled_dot_attention(rank_fix(q)?, rank_fix(k)?, rank_fix(v)?, bias)?;
        let out = merge_heads(out.reshape(&[b * nw, h, n, dim / h])?)?;
        let out = self.attn.proj.forward(tape, store, out)?;
        let out = out.reshape(&[b, nw * n, dim])?.index_select(1, &self.inverse)?;
        Ok((out, weights))
    }

    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_weights(tape, store, x)?.0)
    }
}
