use rand::Rng;

use super::{EncoderKind, ModelConfig};
use crate::error::Result;
use crate::nn::{
    EncoderBlock, LayerNorm, ParamInit, PatchEmbed, PatchGrid, PatchMerging, RelativePositionBias, SelfAttention,
    TokenMixer, WindowAttention, WindowLayout,
};
use crate::tensor::{Float, ParamStore, Tape, Var};

/// Blocks at one resolution, optionally followed by patch merging.
#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<EncoderBlock>,
    pub merge: Option<PatchMerging>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub embed: PatchEmbed,
    /// Swin normalizes patch tokens before the first stage.
    pub embed_norm: Option<LayerNorm>,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Float, R: Rng>(init: &mut ParamInit<'_, T, R>, cfg: &ModelConfig) -> Result<Self> {
        let grid = PatchGrid::new(cfg.image_height, cfg.image_width, cfg.patch_size, 3)?;
        let dim = cfg.encoder_dim;
        let (class_token, position) = match cfg.encoder_kind {
            EncoderKind::Vit => (true, true),
            EncoderKind::Beit => (true, false),
            EncoderKind::Swin => (false, false),
        };
        let embed = PatchEmbed::new(&mut init.sub("patch_embed"), grid, dim, class_token, position);
        let embed_norm = (cfg.encoder_kind == EncoderKind::Swin).then(|| LayerNorm::new(&mut init.sub("embed_norm"), dim));

        let mut stages = Vec::with_capacity(cfg.encoder_depths.len());
        let (mut gh, mut gw, mut dim) = (grid.grid_h, grid.grid_w, dim);
        for (s, (&depth, &heads)) in cfg.encoder_depths.iter().zip(&cfg.encoder_heads).enumerate() {
            let mut stage_init = init.sub(&format!("stages.{s}"));
            let mut blocks = Vec::with_capacity(depth);
            for i in 0..depth {
                let mut block_init = stage_init.sub(&format!("blocks.{i}"));
                let hidden = dim * cfg.mlp_ratio;
                let block = match cfg.encoder_kind {
                    EncoderKind::Vit => EncoderBlock::new(&mut block_init, dim, hidden, |a| TokenMixer::Global {
                        attn: SelfAttention::new(a, dim, heads),
                        bias: None,
                    }),
                    EncoderKind::Beit => EncoderBlock::new(&mut block_init, dim, hidden, |a| TokenMixer::Global {
                        attn: SelfAttention::new(a, dim, heads),
                        bias: Some(RelativePositionBias::for_grid_with_class(
                            &mut a.sub("relative_position_bias"),
                            gh,
                            gw,
                            heads,
                        )),
                    }),
                    EncoderKind::Swin => {
                        let shift = if i % 2 == 1 { cfg.window_size / 2 } else { 0 };
                        let layout = WindowLayout::new(gh, gw, cfg.window_size, shift)?;
                        EncoderBlock::new(&mut block_init, dim, hidden, |a| {
                            TokenMixer::Windowed(WindowAttention::new(a, dim, heads, layout, true))
                        })
                    }
                };
                blocks.push(block);
            }
            let merge = if s + 1 < cfg.encoder_depths.len() {
                let m = PatchMerging::new(&mut stage_init.sub("merge"), gh, gw, dim)?;
                (gh, gw) = m.output_grid();
                dim *= 2;
                Some(m)
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        Ok(Self {
            kind: cfg.encoder_kind,
            embed,
            embed_norm,
            stages,
            norm: LayerNorm::new(&mut init.sub("norm"), dim),
        })
    }

    /// `[batch, 3, h, w]` to `[batch, tokens, dim]`; every token, class
    /// token included, is part of the memory.
    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut x = self.embed.forward(tape, store, images)?;
        if let Some(n) = &self.embed_norm {
            x = n.forward(tape, store, x)?;
        }
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(tape, store, x)?;
            }
            if let Some(m) = &stage.merge {
                x = m.forward(tape, store, x)?;
            }
        }
        self.norm.forward(tape, store, x)
    }
}
