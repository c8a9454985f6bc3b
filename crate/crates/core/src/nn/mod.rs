//! Transformer building blocks on top of the gradient tape.
//!
//! Every block owns only [`ParamId`]s; the values live in a [`ParamStore`]
//! and are bound to a tape at forward time. All blocks use pre-layer-norm
//! residual connections.

mod attention;
mod blocks;
mod layers;
mod patch;
mod window;

pub use attention::{causal_mask, scaled_dot_attention, AttentionConfig, CrossAttention, SelfAttention};
pub use blocks::{DecoderBlock, EncoderBlock, TokenMixer};
pub use layers::{LayerNorm, Linear, Mlp};
pub use patch::{PatchEmbed, PatchGrid, PatchMerging};
pub use window::{shifted_window_mask, window_permutation, RelativePositionBias, WindowAttention, WindowLayout};

use rand::Rng;

use crate::tensor::{Float, ParamId, ParamStore, Tensor};

/// Standard deviation of freshly initialized weight matrices.
pub const INIT_STD: f64 = 0.02;

/// Registers freshly initialized parameters under a dotted name prefix.
pub struct ParamInit<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Float, R: Rng> ParamInit<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child initializer whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> ParamInit<'_, T, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamInit {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let value = Tensor::randn(shape, std, self.rng);
        self.store.add(self.full_name(name), value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(self.full_name(name), Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(self.full_name(name), Tensor::ones(shape))
    }
}
