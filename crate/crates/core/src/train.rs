//! AdamW and the three training regimes: standard, augmented and decoder
//! language-model pre-training.

use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment, AugmentConfig};
use crate::decode::GenerationConfig;
use crate::error::{Error, Result};
use crate::eval::cer;
use crate::models::{preprocess, stack_images, OptimizerState, Recognizer};
use crate::tensor::{Float, Gradients, ParamStore, Tape, Tensor};
use crate::tokenizer::{Tokenizer, BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Standard,
    Augmented,
    PretrainDecoder,
}

impl Regime {
    pub fn default_epochs(self) -> usize {
        match self {
            Regime::Standard => 5,
            Regime::Augmented => 20,
            Regime::PretrainDecoder => 10,
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Regime::PretrainDecoder => 192,
            _ => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Regime default when unset.
    pub epochs: Option<usize>,
    /// Regime default when unset.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Used only by the augmented regime; `None` turns augmentation off.
    pub augment: Option<AugmentConfig>,
    /// Evaluate every this many epochs when an evaluation set is given.
    pub eval_every: usize,
    /// Stop once the evaluation CER is at or below this value.
    pub stop_at_cer: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_regime(Regime::Standard)
    }
}

impl TrainConfig {
    pub fn for_regime(regime: Regime) -> Self {
        Self {
            regime,
            epochs: None,
            batch_size: None,
            learning_rate: 3e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 42,
            augment: (regime == Regime::Augmented).then(AugmentConfig::default),
            eval_every: 1,
            stop_at_cer: None,
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(self.regime.default_epochs())
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(self.regime.default_batch_size())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Error::Config {
            section: "train".into(),
            key: key.into(),
            message: message.into(),
        };
        if self.epochs() == 0 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if self.batch_size() == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        let o = self.optimizer();
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be positive"));
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(bad("betas", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(bad("eps", "eps must be positive and weight_decay non-negative"));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    fn augmentation(&self) -> Option<&AugmentConfig> {
        match self.regime {
            Regime::Augmented => self.augment.as_ref(),
            _ => None,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            state: OptimizerState {
                step: 0,
                epoch: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    /// One update of every parameter that received a gradient; the rest
    /// are left alone, moments included.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if let Some(g) = grads.param(id) {
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for {} at step {}",
                        store.name(id),
                        self.state.step + 1
                    )));
                }
            }
        }
        self.state.step += 1;
        let t = self.state.step;
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            adamw_update(
                store.get_mut(id).data_mut(),
                g.data(),
                self.state.m[i].data_mut(),
                self.state.v[i].data_mut(),
                t,
                &self.config,
            );
        }
        Ok(())
    }
}

/// In-place AdamW update of one tensor at step `t` (1-based).
pub fn adamw_update<T: Float>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamWConfig) {
    let [b1, b2] = cfg.betas;
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g.as_f64();
        let mi = b1 * m.as_f64() + (1.0 - b1) * g;
        let vi = b2 * v.as_f64() + (1.0 - b2) * g * g;
        *m = T::from_f64(mi);
        *v = T::from_f64(vi);
        let update = cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        *p = T::from_f64(p.as_f64() * decay - update);
    }
}

/// An image with its label text.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: RgbImage,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub eval_cer: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Config snapshot on the first line, then one line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({ "config": self.config }).to_string();
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Visiting order of `n` samples in `epoch`, a pure function of
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(b"lemma-htr/shuffle");
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Optional held-out evaluation during training.
pub struct EvalSet<'a> {
    pub samples: &'a [Sample],
    pub generation: GenerationConfig,
}

/// Teacher-forced training of the whole recognizer.
///
/// Each epoch visits the samples in [`epoch_order`]. In the augmented
/// regime every sample is augmented afresh per epoch from
/// `(seed, sample index, epoch)`.
pub fn train_recognizer<T: Float>(
    model: &mut Recognizer<T>,
    samples: &[Sample],
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    eval: Option<&EvalSet<'_>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    let targets = encode_targets(samples.iter().map(|s| s.label.as_str()), tokenizer, &model.config)?;
    let processor = model.config.processor();
    let augmentation = cfg.augmentation();
    let cached: Option<Vec<Tensor<T>>> = match augmentation {
        None => Some(samples.par_iter().map(|s| preprocess(&s.image, &processor)).collect::<Result<_>>()?),
        Some(_) => None,
    };

    let mut opt = AdamW::new(cfg.optimizer(), &model.store);
    let mut log = TrainLog {
        config: cfg.clone(),
        epochs: Vec::new(),
    };
    for epoch in 0..cfg.epochs() {
        let start = Instant::now();
        let order = epoch_order(samples.len(), cfg.seed, epoch as u64);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size()) {
            let fresh: Vec<Tensor<T>>;
            let images: Vec<&Tensor<T>> = match (&cached, augmentation) {
                (Some(c), _) => batch.iter().map(|&i| &c[i]).collect(),
                (None, Some(aug)) => {
                    fresh = batch
                        .par_iter()
                        .map(|&i| preprocess(&augment(&samples[i].image, aug, cfg.seed, i as u64, epoch as u64), &processor))
                        .collect::<Result<_>>()?;
                    fresh.iter().collect()
                }
                (None, None) => unreachable!("images are cached when augmentation is off"),
            };
            let batch_targets: Vec<Vec<u32>> = batch.iter().map(|&i| targets[i].clone()).collect();
            let grads = {
                let tape = Tape::new();
                let x = tape.constant(stack_images(&images)?);
                let memory = model.encode(&tape, x)?;
                let loss = model.loss(&tape, memory, &batch_targets)?;
                let value = loss.value().item().as_f64();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("loss became {value} in epoch {}", epoch + 1)));
                }
                total += value;
                tape.backward(loss)?
            };
            opt.step(&mut model.store, &grads)?;
            batches += 1;
        }
        opt.state.epoch = epoch as u64 + 1;
        let eval_cer = match eval {
            Some(e) if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs()) => {
                Some(mean_cer(model, e.samples, tokenizer, &e.generation)?)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: opt.state.step,
            mean_loss: total / batches as f64,
            eval_cer,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
        if let (Some(target), Some(c)) = (cfg.stop_at_cer, eval_cer) {
            if c <= target {
                break;
            }
        }
    }
    Ok(log)
}

/// BOS + tokens + EOS for each label, checked against the model limits.
pub fn encode_targets<'a>(
    labels: impl Iterator<Item = &'a str>,
    tokenizer: &Tokenizer,
    config: &crate::models::ModelConfig,
) -> Result<Vec<Vec<u32>>> {
    if tokenizer.vocab_size() > config.vocab_size {
        return Err(Error::Incompatible(format!(
            "tokenizer has {} tokens but the model vocabulary is {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    labels
        .map(|l| {
            let t = tokenizer.encode_target(l);
            if t.len() > config.max_target_length {
                return Err(Error::Validation(format!(
                    "label {l:?} needs {} tokens, max_target_length is {}",
                    t.len(),
                    config.max_target_length
                )));
            }
            Ok(t)
        })
        .collect()
}

/// Lemmas joined by newlines into one token stream, cut into windows
/// that fill `max_target_length` once BOS is prepended. The lemma order
/// is shuffled by `seed`; the stream ends with EOS.
pub fn lemma_documents(lemmas: &[String], tokenizer: &Tokenizer, max_target_length: usize, seed: u64) -> Vec<Vec<u32>> {
    let newline = tokenizer.encode("\n");
    let mut stream = Vec::new();
    for (k, &i) in epoch_order(lemmas.len(), seed, u64::MAX).iter().enumerate() {
        if k > 0 {
            stream.extend_from_slice(&newline);
        }
        stream.extend(tokenizer.encode(&lemmas[i]));
    }
    stream.push(EOS);
    stream
        .chunks(max_target_length - 1)
        .filter(|c| !c.is_empty())
        .map(|c| std::iter::once(BOS).chain(c.iter().copied()).collect())
        .collect()
}

/// Causal language-model training of the decoder on concatenated lemmas.
/// Cross-attention sees a single all-zero memory token, so the trained
/// weights drop straight into the recognizer.
pub fn pretrain_decoder<T: Float>(
    model: &mut Recognizer<T>,
    lemmas: &[String],
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if lemmas.is_empty() {
        return Err(Error::Validation("empty lemma corpus".into()));
    }
    encode_targets(lemmas.iter().map(String::as_str), tokenizer, &model.config)?;
    let docs = lemma_documents(lemmas, tokenizer, model.config.max_target_length, cfg.seed);
    let mem_dim = model.config.memory_dim();
    let mut opt = AdamW::new(cfg.optimizer(), &model.store);
    let mut log = TrainLog {
        config: cfg.clone(),
        epochs: Vec::new(),
    };
    for epoch in 0..cfg.epochs() {
        let start = Instant::now();
        let order = epoch_order(docs.len(), cfg.seed, epoch as u64);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size()) {
            let rows: Vec<Vec<u32>> = batch.iter().map(|&i| docs[i].clone()).collect();
            let grads = {
                let tape = Tape::new();
                let memory = tape.constant(Tensor::zeros(&[rows.len(), 1, mem_dim]));
                let loss = model.loss(&tape, memory, &rows)?;
                total += loss.value().item().as_f64();
                tape.backward(loss)?
            };
            opt.step(&mut model.store, &grads)?;
            batches += 1;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: opt.state.step,
            mean_loss: total / batches as f64,
            eval_cer: None,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok(log)
}

/// Log-likelihood of `text` (as BOS..EOS) under the decoder with zero memory.
pub fn decoder_log_likelihood<T: Float>(model: &Recognizer<T>, tokenizer: &Tokenizer, text: &str) -> Result<f64> {
    let target = tokenizer.encode_target(text);
    let tape = Tape::new();
    let memory = tape.constant(Tensor::zeros(&[1, 1, model.config.memory_dim()]));
    let loss = model.loss(&tape, memory, std::slice::from_ref(&target))?.value().item().as_f64();
    Ok(-loss * (target.len() - 1) as f64)
}

/// Transcribes every sample.
pub fn transcribe<T: Float>(
    model: &Recognizer<T>,
    images: &[&RgbImage],
    tokenizer: &Tokenizer,
    generation: &GenerationConfig,
) -> Result<Vec<String>> {
    images.par_iter().map(|img| model.predict(img, tokenizer, generation)).collect()
}

/// Mean per-sample CER of the model's transcriptions.
pub fn mean_cer<T: Float>(
    model: &Recognizer<T>,
    samples: &[Sample],
    tokenizer: &Tokenizer,
    generation: &GenerationConfig,
) -> Result<f64> {
    let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
    let preds = transcribe(model, &images, tokenizer, generation)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += cer(p, &s.label)?.cer();
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamWConfig {
            learning_rate: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        for betas in [[0.9, 0.999], [0.5, 0.7], [0.0, 0.0]] {
            let cfg = AdamWConfig { betas, ..cfg.clone() };
            let mut p = [1.0f64, -2.0];
            let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
            adamw_update(&mut p, &[1.0, 1.0], &mut m, &mut v, 1, &cfg);
            let expect = 0.01 / (1.0 + 1e-8);
            assert!((1.0 - p[0] - expect).abs() < 1e-15, "{betas:?}");
            assert!((-2.0 - p[1] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = [3.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let no_decay = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, &no_decay);
        assert_eq!(p, [3.0]);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 2, &cfg);
        assert!((p[0] - 3.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::ones(&[2]));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let tape = Tape::new();
        let w = tape.param(&store, id);
        let nan = tape.constant(Tensor::full(&[2], f64::NAN));
        let grads = tape.backward(w.mul(nan).unwrap().sum()).unwrap();
        let err = opt.step(&mut store, &grads).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("w")), "{err}");
        assert_eq!(store.get(id).data(), &[1.0, 1.0]);
    }

    #[test]
    fn shuffle_depends_only_on_seed_and_epoch() {
        assert_eq!(epoch_order(50, 42, 3), epoch_order(50, 42, 3));
        assert_ne!(epoch_order(50, 42, 3), epoch_order(50, 42, 4));
        let mut o = epoch_order(50, 1, 0);
        o.sort_unstable();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn regime_defaults() {
        let s = TrainConfig::for_regime(Regime::Standard);
        let a = TrainConfig::for_regime(Regime::Augmented);
        let p = TrainConfig::for_regime(Regime::PretrainDecoder);
        assert_eq!((s.epochs(), a.epochs(), p.epochs()), (5, 20, 10));
        assert_eq!((s.batch_size(), a.batch_size(), p.batch_size()), (64, 64, 192));
        assert_eq!(s.seed, 42);
        assert!(s.augment.is_none() && a.augment.is_some());
    }

    #[test]
    fn documents_fill_windows() {
        let tok = Tokenizer::default();
        let lemmas: Vec<String> = ["salus", "sanctus", "lex"].iter().map(|s| s.to_string()).collect();
        let docs = lemma_documents(&lemmas, &tok, 8, 42);
        let stream: Vec<u32> = docs.iter().flat_map(|d| d[1..].to_vec()).collect();
        assert!(docs.iter().all(|d| d[0] == BOS && d.len() <= 8));
        assert_eq!(stream.len(), 5 + 7 + 3 + 2 + 1);
        assert_eq!(stream.last(), Some(&EOS));
    }
}
