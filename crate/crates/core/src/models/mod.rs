//! Encoder-decoder recognizers: a ViT-, BEiT- or Swin-style image encoder
//! feeding a GPT-2-style decoder through cross-attention.

mod checkpoint;
mod decoder;
mod encoder;
mod preprocess;

pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decoder::Decoder;
pub use encoder::{Encoder, Stage};
pub use preprocess::{preprocess, stack_images, ImageProcessorConfig};

use std::path::Path;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{beam_search, log_softmax, GenerationConfig, Hypothesis, StepModel};
use crate::error::{Error, Result};
use crate::nn::ParamInit;
use crate::tensor::{Float, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{Tokenizer, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Vit,
    Beit,
    Swin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    /// Blocks per stage. ViT and BEiT have exactly one stage.
    pub encoder_depths: Vec<usize>,
    pub encoder_heads: Vec<usize>,
    /// Swin only.
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub vocab_size: usize,
    /// Longest token sequence the decoder sees, BOS and EOS included.
    pub max_target_length: usize,
    pub image_mean: [f32; 3],
    pub image_std: [f32; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::swin()
    }
}

impl ModelConfig {
    fn base(encoder_kind: EncoderKind) -> Self {
        Self {
            encoder_kind,
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            encoder_dim: 64,
            encoder_depths: vec![4],
            encoder_heads: vec![4],
            window_size: 7,
            mlp_ratio: 4,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            max_target_length: 32,
            image_mean: [0.5; 3],
            image_std: [0.5; 3],
        }
    }

    pub fn vit() -> Self {
        Self::base(EncoderKind::Vit)
    }

    pub fn beit() -> Self {
        Self::base(EncoderKind::Beit)
    }

    pub fn swin() -> Self {
        Self {
            patch_size: 4,
            encoder_dim: 32,
            encoder_depths: vec![2, 2],
            encoder_heads: vec![2, 4],
            ..Self::base(EncoderKind::Swin)
        }
    }

    pub fn for_kind(kind: EncoderKind) -> Self {
        match kind {
            EncoderKind::Vit => Self::vit(),
            EncoderKind::Beit => Self::beit(),
            EncoderKind::Swin => Self::swin(),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    /// Width of the encoder output.
    pub fn memory_dim(&self) -> usize {
        match self.encoder_kind {
            EncoderKind::Swin => self.encoder_dim << (self.encoder_depths.len() - 1),
            _ => self.encoder_dim,
        }
    }

    /// Number of encoder output tokens per image.
    pub fn memory_tokens(&self) -> usize {
        let (h, w) = self.grid();
        match self.encoder_kind {
            EncoderKind::Swin => {
                let s = self.encoder_depths.len() - 1;
                (h >> s) * (w >> s)
            }
            _ => h * w + 1,
        }
    }

    pub fn processor(&self) -> ImageProcessorConfig {
        ImageProcessorConfig {
            height: self.image_height,
            width: self.image_width,
            mean: self.image_mean,
            std: self.image_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            section: "model".into(),
            key: key.into(),
            message,
        };
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(bad(
                "patch_size",
                format!("{}x{} image is not tiled by {p}-pixel patches", self.image_height, self.image_width),
            ));
        }
        let stages = self.encoder_depths.len();
        if stages == 0 || stages != self.encoder_heads.len() {
            return Err(bad("encoder_depths", "one depth and one head count per stage are required".into()));
        }
        if self.encoder_kind != EncoderKind::Swin && stages != 1 {
            return Err(bad("encoder_depths", format!("{:?} encoders have a single stage", self.encoder_kind)));
        }
        for (s, &heads) in self.encoder_heads.iter().enumerate() {
            let dim = self.encoder_dim << s;
            if heads == 0 || dim % heads != 0 {
                return Err(bad("encoder_heads", format!("stage {s}: width {dim} not divisible by {heads} heads")));
            }
        }
        if self.encoder_kind == EncoderKind::Swin {
            let (h, w) = self.grid();
            for s in 0..stages {
                let (gh, gw) = (h >> s, w >> s);
                if s + 1 < stages && (gh % 2 != 0 || gw % 2 != 0) {
                    return Err(bad("encoder_depths", format!("stage {s} grid {gh}x{gw} cannot be merged")));
                }
                let ws = self.window_size;
                if ws == 0 || gh % ws.min(gh) != 0 || gw % ws.min(gw) != 0 {
                    return Err(bad("window_size", format!("window {ws} does not tile the {gh}x{gw} grid of stage {s}")));
                }
            }
        }
        if self.mlp_ratio == 0 {
            return Err(bad("mlp_ratio", "must be at least 1".into()));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(bad("decoder_heads", format!("width {} not divisible by {} heads", self.decoder_dim, self.decoder_heads)));
        }
        if self.vocab_size <= EOS as usize {
            return Err(bad("vocab_size", "must include the special tokens".into()));
        }
        if self.max_target_length < 2 {
            return Err(bad("max_target_length", "must be at least 2".into()));
        }
        if self.image_std.iter().any(|&s| !(s > 0.0)) {
            return Err(bad("image_std", "must be positive".into()));
        }
        Ok(())
    }
}

/// A complete recognizer: architecture plus its parameters.
#[derive(Clone, Debug)]
pub struct Recognizer<T: Float> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl<T: Float> Recognizer<T> {
    /// Freshly initialized parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = ParamInit::new(&mut store, &mut rng);
        let encoder = Encoder::new(&mut init.sub("encoder"), &config)?;
        let decoder = Decoder::new(&mut init.sub("decoder"), &config);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// `[batch, 3, h, w]` images to `[batch, tokens, memory_dim]`.
    pub fn encode<'t>(&self, tape: &'t Tape<T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        self.encoder.forward(tape, &self.store, images)
    }

    /// Logits `[batch, len, vocab]` for equal-length id rows.
    pub fn decode<'t>(&self, tape: &'t Tape<T>, memory: Var<'t, T>, ids: &[Vec<u32>]) -> Result<Var<'t, T>> {
        self.decoder.forward(tape, &self.store, memory, ids)
    }

    /// Teacher-forced mean cross-entropy. `targets` are BOS..EOS rows of
    /// any length; they are right-padded with PAD.
    pub fn loss<'t>(&self, tape: &'t Tape<T>, memory: Var<'t, T>, targets: &[Vec<u32>]) -> Result<Var<'t, T>> {
        let (inputs, labels) = teacher_forcing(targets, self.config.max_target_length)?;
        let logits = self.decode(tape, memory, &inputs)?;
        logits.cross_entropy(&labels, PAD as usize)
    }

    /// Memory `[1, tokens, memory_dim]` for one preprocessed `[3, h, w]` image.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::shape("encode_image", s, &[3, self.config.image_height, self.config.image_width]));
        }
        let tape = Tape::new();
        let x = tape.constant(image.clone().reshape(&[1, s[0], s[1], s[2]])?);
        Ok(self.encode(&tape, x)?.value())
    }

    /// Next-token logits for each prefix against one image's memory.
    pub fn decode_step(&self, memory: &Tensor<T>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let len = prefixes.first().map_or(0, Vec::len);
        if prefixes.iter().any(|p| p.len() != len || p.first() != Some(&BOS)) {
            return Err(Error::Contract("prefixes must be equally long and start with BOS".into()));
        }
        if len >= self.config.max_target_length {
            return Err(Error::Contract(format!(
                "prefix of length {len} leaves no room within max_target_length {}",
                self.config.max_target_length
            )));
        }
        let tape = Tape::new();
        let mem = tape.constant(memory.clone());
        let mem = if prefixes.len() == 1 { mem } else { mem.index_select(0, &vec![0; prefixes.len()])? };
        let logits = self.decode(&tape, mem, prefixes)?.value();
        let v = self.config.vocab_size;
        Ok(logits
            .data()
            .chunks(len * v)
            .map(|row| row[(len - 1) * v..].iter().map(|x| x.as_f64()).collect())
            .collect())
    }

    /// Beam search on one preprocessed image.
    pub fn generate(&self, image: &Tensor<T>, cfg: &GenerationConfig) -> Result<Hypothesis> {
        let memory = self.encode_image(image)?;
        let max_length = cfg.max_length.min(self.config.max_target_length);
        let cfg = GenerationConfig { max_length, ..cfg.clone() };
        beam_search(&MemoryDecoder { model: self, memory }, &cfg)
    }

    /// Recognized text of one RGB image.
    pub fn predict(&self, image: &RgbImage, tokenizer: &Tokenizer, cfg: &GenerationConfig) -> Result<String> {
        let x = preprocess::<T>(image, &self.config.processor())?;
        let h = self.generate(&x, cfg)?;
        tokenizer.decode(h.content())
    }

    pub fn to_checkpoint(&self, tokenizer_hash: &str, optimizer: Option<OptimizerState<T>>) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            tokenizer_hash: tokenizer_hash.to_string(),
            params: self.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer,
        }
    }

    /// Rebuilds a model from a checkpoint, requiring every parameter
    /// exactly once with the expected shape.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut model = Self::new(ckpt.config.clone(), 0)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors, model expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, value) in &ckpt.params {
            if !seen.insert(name.as_str()) {
                return Err(Error::Incompatible(format!("parameter {name} appears twice")));
            }
            model.store.set(name, value.clone()).map_err(|e| match e {
                Error::Shape { .. } => Error::Incompatible(format!("parameter {name} has shape {:?}", value.shape())),
                other => other,
            })?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, tokenizer: &Tokenizer) -> Result<()> {
        self.to_checkpoint(&tokenizer.hash(), None).save(path)
    }

    /// Loads a checkpoint and checks it against the expected configuration
    /// and tokenizer.
    pub fn load(path: &Path, expected: &ModelConfig, tokenizer: &Tokenizer) -> Result<Self> {
        let ckpt = Checkpoint::<T>::load(path)?;
        ckpt.check_compatible(expected, &tokenizer.hash())?;
        Self::from_checkpoint(&ckpt)
    }

    /// Copies every `decoder.*` parameter from `other`.
    pub fn copy_decoder_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with("decoder."))
            .map(|(_, n, _)| n.to_string())
            .collect();
        for name in names {
            let id = other
                .id(&name)
                .ok_or_else(|| Error::Incompatible(format!("pretrained decoder lacks {name}")))?;
            self.store.set(&name, other.get(id).clone()).map_err(|_| {
                Error::Incompatible(format!("pretrained decoder parameter {name} has a different shape"))
            })?;
            copied += 1;
        }
        Ok(copied)
    }
}

/// Right-shifted inputs and flattened labels, both padded to the longest
/// row. Labels at padded positions are PAD and ignored by the loss.
pub fn teacher_forcing(targets: &[Vec<u32>], max_target_length: usize) -> Result<(Vec<Vec<u32>>, Vec<usize>)> {
    let len = targets.iter().map(Vec::len).max().unwrap_or(0);
    if len < 2 {
        return Err(Error::Contract("targets need at least BOS and one more token".into()));
    }
    if len > max_target_length {
        return Err(Error::Contract(format!("target of {len} tokens exceeds max_target_length {max_target_length}")));
    }
    let mut inputs = Vec::with_capacity(targets.len());
    let mut labels = Vec::with_capacity(targets.len() * (len - 1));
    for t in targets {
        let mut row = t.clone();
        row.resize(len, PAD);
        inputs.push(row[..len - 1].to_vec());
        labels.extend(row[1..].iter().map(|&x| x as usize));
    }
    Ok((inputs, labels))
}

/// Adapts a recognizer plus fixed image memory to the beam search.
pub struct MemoryDecoder<'a, T: Float> {
    pub model: &'a Recognizer<T>,
    pub memory: Tensor<T>,
}

impl<T: Float> StepModel for MemoryDecoder<'_, T> {
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .model
            .decode_step(&self.memory, prefixes)?
            .iter()
            .map(|row| log_softmax(row))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: EncoderKind) -> ModelConfig {
        ModelConfig {
            encoder_kind: kind,
            image_height: 16,
            image_width: 32,
            patch_size: 4,
            encoder_dim: 8,
            encoder_depths: if kind == EncoderKind::Swin { vec![2, 1] } else { vec![2] },
            encoder_heads: if kind == EncoderKind::Swin { vec![2, 2] } else { vec![2] },
            window_size: 2,
            mlp_ratio: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
            vocab_size: 11,
            max_target_length: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn memory_token_counts() {
        assert_eq!(ModelConfig::vit().memory_tokens(), 197);
        assert_eq!(ModelConfig::beit().memory_tokens(), 197);
        assert_eq!(ModelConfig::swin().memory_tokens(), 784);
        assert_eq!(ModelConfig::swin().memory_dim(), 64);
        for kind in [EncoderKind::Vit, EncoderKind::Beit, EncoderKind::Swin] {
            let cfg = tiny(kind);
            let m = Recognizer::<f32>::new(cfg.clone(), 1).unwrap();
            let img = Tensor::from_fn(&[3, 16, 32], |i| ((i * 7) % 13) as f32 / 13.0);
            let mem = m.encode_image(&img).unwrap();
            assert_eq!(mem.shape(), &[1, cfg.memory_tokens(), cfg.memory_dim()], "{kind:?}");
        }
    }

    #[test]
    fn identical_images_identical_memory() {
        let m = Recognizer::<f32>::new(tiny(EncoderKind::Swin), 3).unwrap();
        let one = Tensor::from_fn(&[1, 3, 16, 32], |i| (i as f32 * 0.01).sin());
        let two = Tensor::new(&[2, 3, 16, 32], [one.data(), one.data()].concat()).unwrap();
        let tape = Tape::new();
        let mem = m.encode(&tape, tape.constant(two)).unwrap().value();
        let half = mem.len() / 2;
        assert_eq!(mem.data()[..half], mem.data()[half..]);
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let cfg = tiny(EncoderKind::Vit);
        let m = Recognizer::<f64>::new(cfg.clone(), 0).unwrap();
        let tape = Tape::new();
        let mem = m.encode(&tape, tape.constant(Tensor::zeros(&[2, 3, 16, 32]))).unwrap();
        let loss = m.loss(&tape, mem, &[vec![BOS, 5, 6, EOS], vec![BOS, 7, EOS]]).unwrap();
        assert!((loss.value().item() - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn decode_step_is_causal() {
        let mut m = Recognizer::<f64>::new(tiny(EncoderKind::Beit), 5).unwrap();
        // give the head some weight so logits are informative
        let head = m.store.id("decoder.head.weight").unwrap();
        let shape = m.store.get(head).shape().to_vec();
        m.store.set("decoder.head.weight", Tensor::from_fn(&shape, |i| (i as f64 * 0.37).sin())).unwrap();
        let mem = m.encode_image(&Tensor::from_fn(&[3, 16, 32], |i| (i as f64 * 0.1).cos())).unwrap();
        let short = m.decode_step(&mem, &[vec![BOS, 4]]).unwrap();
        assert_eq!(short[0].len(), 11);
        let tape = Tape::new();
        let full = m.decode(&tape, tape.constant(mem.clone()), &[vec![BOS, 4, 9, 3]]).unwrap().value();
        let at1: Vec<f64> = full.data()[11..22].to_vec();
        assert_eq!(short[0], at1);
        assert!(matches!(m.decode_step(&mem, &[vec![BOS; 8]]), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny(EncoderKind::Vit);
        c.encoder_depths = vec![1, 1];
        c.encoder_heads = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = tiny(EncoderKind::Swin);
        c.window_size = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(EncoderKind::Swin);
        c.patch_size = 5;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::vit().validate().is_ok());
    }

    #[test]
    fn teacher_forcing_shifts_and_pads() {
        let (inputs, labels) = teacher_forcing(&[vec![BOS, 5, EOS], vec![BOS, 6, 7, EOS]], 8).unwrap();
        assert_eq!(inputs, vec![vec![BOS, 5, EOS], vec![BOS, 6, 7]]);
        assert_eq!(labels, vec![5, 2, 0, 6, 7, 2]);
        assert!(teacher_forcing(&[vec![BOS; 9]], 8).is_err());
    }
}
