use rand::Rng;

use super::{CrossAttention, LayerNorm, Mlp, ParamInit, RelativePositionBias, SelfAttention, WindowAttention};
use crate::error::Result;
use crate::tensor::{Float, ParamStore, Tape, Var};

/// The attention half of an encoder block.
#[derive(Clone, Debug)]
pub enum TokenMixer {
    /// Full self-attention, with an optional learned relative bias.
    Global {
        attn: SelfAttention,
        bias: Option<RelativePositionBias>,
    },
    /// Window or shifted-window attention.
    Windowed(WindowAttention),
}

impl TokenMixer {
    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            TokenMixer::Global { attn, bias } => {
                let b = bias.as_ref().map(|b| b.forward(tape, store)).transpose()?;
                attn.forward(tape, store, x, b)
            }
            TokenMixer::Windowed(w) => w.forward(tape, store, x),
        }
    }
}

/// `x + mix(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub mixer: TokenMixer,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<T: Float, R: Rng>(
        init: &mut ParamInit<'_, T, R>,
        dim: usize,
        mlp_hidden: usize,
        mixer: impl FnOnce(&mut ParamInit<'_, T, R>) -> TokenMixer,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(&mut init.sub("norm1"), dim),
            mixer: mixer(&mut init.sub("attn")),
            norm2: LayerNorm::new(&mut init.sub("norm2"), dim),
            mlp: Mlp::new(&mut init.sub("mlp"), dim, mlp_hidden),
        }
    }

    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.mixer.forward(tape, store, self.norm1.forward(tape, store, x)?)?;
        let x = x.add(h)?;
        let h = self.mlp.forward(tape, store, self.norm2.forward(tape, store, x)?)?;
        x.add(h)
    }
}

/// GPT-2 style block with an added cross-attention sublayer.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: SelfAttention,
    pub norm2: LayerNorm,
    pub cross_attn: CrossAttention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderBlock {
    pub fn new<T: Float, R: Rng>(
        init: &mut ParamInit<'_, T, R>,
        dim: usize,
        memory_dim: usize,
        num_heads: usize,
        mlp_hidden: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(&mut init.sub("norm1"), dim),
            self_attn: SelfAttention::new(&mut init.sub("self_attn"), dim, num_heads),
            norm2: LayerNorm::new(&mut init.sub("norm2"), dim),
            cross_attn: CrossAttention::new(&mut init.sub("cross_attn"), dim, memory_dim, num_heads),
            norm3: LayerNorm::new(&mut init.sub("norm3"), dim),
            mlp: Mlp::new(&mut init.sub("mlp"), dim, mlp_hidden),
        }
    }

    pub fn forward<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        memory: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let h = self.self_attn.forward_causal(tape, store, self.norm1.forward(tape, store, x)?)?;
        let x = x.add(h)?;
        let h = self.cross_attn.forward(tape, store, self.norm2.forward(tape, store, x)?, memory)?;
        let x = x.add(h)?;
        let h = self.mlp.forward(tape, store, self.norm3.forward(tape, store, x)?)?;
        x.add(h)
    }
}
