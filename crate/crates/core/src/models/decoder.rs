use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{DecoderBlock, LayerNorm, Linear, ParamInit, INIT_STD};
use crate::tensor::{Float, ParamId, ParamStore, Tape, Var};

/// GPT-2-style decoder: token plus learned position embeddings, blocks
/// with causal self-attention and cross-attention, final norm and a
/// language-model head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    /// Starts at zero, so an untrained model predicts uniformly.
    pub head: Linear,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Decoder {
    pub fn new<T: Float, R: Rng>(init: &mut ParamInit<'_, T, R>, cfg: &ModelConfig) -> Self {
        let d = cfg.decoder_dim;
        let token_embedding = init.normal("token_embedding", &[cfg.vocab_size, d], INIT_STD);
        let position_embedding = init.normal("position_embedding", &[cfg.max_target_length, d], INIT_STD);
        let blocks = (0..cfg.decoder_depth)
            .map(|i| {
                DecoderBlock::new(
                    &mut init.sub(&format!("blocks.{i}")),
                    d,
                    cfg.memory_dim(),
                    cfg.decoder_heads,
                    d * cfg.mlp_ratio,
                )
            })
            .collect();
        Self {
            token_embedding,
            position_embedding,
            blocks,
            norm: LayerNorm::new(&mut init.sub("norm"), d),
            head: Linear::zeroed(&mut init.sub("head"), d, cfg.vocab_size, true),
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_target_length,
        }
    }

    /// Logits `[batch, len, vocab]` for equal-length `ids` rows attending
    /// to `memory` `[batch, tokens, memory_dim]`.
    pub fn forward<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        memory: Var<'t, T>,
        ids: &[Vec<u32>],
    ) -> Result<Var<'t, T>> {
        let b = ids.len();
        let len = ids.first().map_or(0, Vec::len);
        if b == 0 || len == 0 || ids.iter().any(|r| r.len() != len) {
            return Err(Error::Contract("decoder input must be a non-empty rectangle of ids".into()));
        }
        if len > self.max_len {
            return Err(Error::Contract(format!("{len} positions exceed the {} learned ones", self.max_len)));
        }
        let flat: Vec<usize> = ids.iter().flatten().map(|&t| t as usize).collect();
        let d = store.get(self.token_embedding).shape()[1];
        let tokens = tape.param(store, self.token_embedding).embedding(&flat)?.reshape(&[b, len, d])?;
        let positions = tape.param(store, self.position_embedding).slice(0, 0, len)?;
        let mut x = tokens.add(positions)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, memory)?;
        }
        let x = self.norm.forward(tape, store, x)?;
        self.head.forward(tape, store, x)
    }
}
