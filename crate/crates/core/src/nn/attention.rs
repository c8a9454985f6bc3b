use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Linear, ParamInit};
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Tape, Tensor, Var};

/// Shape and masking parameters shared by all attention variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub window_size: Option<usize>,
    pub shift_size: Option<usize>,
    pub causal: bool,
    pub relative_position_bias: bool,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, num_heads: usize) -> Self {
        Self {
            embed_dim,
            num_heads,
            window_size: None,
            shift_size: None,
            causal: false,
            relative_position_bias: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Validation(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if let (Some(shift), Some(window)) = (self.shift_size, self.window_size) {
            if shift >= window {
                return Err(Error::Validation(format!(
                    "shift_size {shift} must be smaller than window_size {window}"
                )));
            }
        }
        if self.shift_size.is_some() && self.window_size.is_none() {
            return Err(Error::Validation("shift_size requires window_size".into()));
        }
        Ok(())
    }
}

/// `[t, t]` additive mask: zero on and below the diagonal, `-inf` above.
pub fn causal_mask<T: Float>(t: usize) -> Tensor<T> {
    Tensor::from_fn(&[t, t], |i| {
        if i % t > i / t {
            T::neg_infinity()
        } else {
            T::zero()
        }
    })
}

/// `softmax(q kᵀ / sqrt(d) + bias) v` for `[.., heads, len, head_dim]`
/// inputs. Returns the output and the attention weights.
pub fn scaled_dot_attention<'t, T: Float>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let shape = q.shape();
    let d = *shape.last().ok_or_else(|| Error::shape("attention", &shape, &[]))?;
    let rank = shape.len();
    let kt = k.transpose(rank - 2, rank - 1)?;
    let mut scores = q.matmul(kt)?.scale(T::from_f64(1.0 / (d as f64).sqrt()));
    if let Some(b) = bias {
        scores = scores.add(b)?;
    }
    let weights = scores.softmax()?;
    Ok((weights.matmul(v)?, weights))
}

/// `[b, n, heads*d]` to `[b, heads, n, d]`.
pub(crate) fn split_heads<'t, T: Float>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, n, dim) = (s[0], s[1], s[2]);
    x.reshape(&[b, n, heads, dim / heads])?.permute(&[0, 2, 1, 3])
}

/// `[b, heads, n, d]` to `[b, n, heads*d]`.
pub(crate) fn merge_heads<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, h, n, d) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3])?.reshape(&[b, n, h * d])
}

/// Multi-head self-attention over `[batch, tokens, dim]`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub num_heads: usize,
}

impl SelfAttention {
    pub fn new<T: Float, R: Rng>(init: &mut ParamInit<'_, T, R>, dim: usize, num_heads: usize) -> Self {
        Self {
            qkv: Linear::new(&mut init.sub("qkv"), dim, 3 * dim, true),
            proj: Linear::new(&mut init.sub("proj"), dim, dim, true),
            num_heads,
        }
    }

    /// Projected `(q, k, v)`, each `[batch, heads, tokens, head_dim]`.
    pub(crate) fn project<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::shape("self_attention", &s, &[self.qkv.in_dim]));
        }
        let (b, n, dim) = (s[0], s[1], s[2]);
        let h = self.num_heads;
        let qkv = self
            .qkv
            .forward(tape, store, x)?
            .reshape(&[b, n, 3, h, dim / h])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i| qkv.slice(0, i, 1)?.reshape(&[b, h, n, dim / h]);
        Ok((part(0)?, part(1)?, part(2)?))
    }

    /// Attention with an optional additive bias broadcastable to
    /// `[batch, heads, tokens, tokens]`.
    pub fn forward_with_weights<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        bias: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (q, k, v) = self.project(tape, store, x)?;
        let (out, weights) = scaled_dot_attention(q, k, v, bias)?;
        Ok((self.proj.forward(tape, store, merge_heads(out)?)?, weights))
    }

    pub fn forward<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        bias: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_with_weights(tape, store, x, bias)?.0)
    }

    /// Position `t` attends only to positions `<= t`.
    pub fn forward_causal<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let n = x.shape()[1];
        let mask = tape.constant(causal_mask(n));
        self.forward(tape, store, x, Some(mask))
    }
}

/// Queries from the decoder stream, keys and values from encoder memory.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key_value: Linear,
    pub proj: Linear,
    pub num_heads: usize,
}

impl CrossAttention {
    pub fn new<T: Float, R: Rng>(init: &mut ParamInit<'_, T, R>, dim: usize, memory_dim: usize, num_heads: usize) -> Self {
        Self {
            query: Linear::new(&mut init.sub("q"), dim, dim, true),
            key_value: Linear::new(&mut init.sub("kv"), memory_dim, 2 * dim, true),
            proj: Linear::new(&mut init.sub("proj"), dim, dim, true),
            num_heads,
        }
    }

    pub fn forward_with_weights<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        memory: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let ms = memory.shape();
        let xs = x.shape();
        if ms.len() != 3 || xs.len() != 3 || ms[0] != xs[0] {
            return Err(Error::shape("cross_attention", &xs, &ms));
        }
        let (b, s) = (ms[0], ms[1]);
        let dim = self.query.out_dim;
        let h = self.num_heads;
        let q = split_heads(self.query.forward(tape, store, x)?, h)?;
        let kv = self
            .key_value
            .forward(tape, store, memory)?
            .reshape(&[b, s, 2, h, dim / h])?
            .permute(&[2, 0, 3, 1, 4])?;
        let k = kv.slice(0, 0, 1)?.reshape(&[b, h, s, dim / h])?;
        let v = kv.slice(0, 1, 1)?.reshape(&[b, h, s, dim / h])?;
        let (out, weights) = scaled_dot_attention(q, k, v, None)?;
        Ok((self.proj.forward(tape, store, merge_heads(out)?)?, weights))
    }

    pub fn forward<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        memory: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_with_weights(tape, store, x, memory)?.0)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(dim: usize, heads: usize) -> (ParamStore<f64>, SelfAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let attn = {
            let mut init = ParamInit::new(&mut store, &mut rng);
            SelfAttention::new(&mut init.sub("attn"), dim, heads)
        };
        // larger weights so the test actually exercises the softmax
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v *= 20.0;
            }
        }
        (store, attn)
    }

    /// Naive per-position causal attention with explicit loops.
    fn causal_oracle(store: &ParamStore<f64>, attn: &SelfAttention, x: &Tensor<f64>) -> Vec<f64> {
        let (n, dim) = (x.shape()[1], x.shape()[2]);
        let h = attn.num_heads;
        let d = dim / h;
        let lin = |l: &Linear, row: &[f64]| -> Vec<f64> {
            let w = store.get(l.weight).data();
            let b = store.get(l.bias.unwrap()).data();
            (0..l.out_dim)
                .map(|o| b[o] + (0..l.in_dim).map(|i| row[i] * w[i * l.out_dim + o]).sum::<f64>())
                .collect()
        };
        let qkv: Vec<Vec<f64>> = (0..n).map(|t| lin(&attn.qkv, &x.data()[t * dim..(t + 1) * dim])).collect();
        let mut out = Vec::new();
        for t in 0..n {
            let mut merged = vec![0.0; dim];
            for head in 0..h {
                let q = &qkv[t][head * d..(head + 1) * d];
                let logits: Vec<f64> = (0..=t)
                    .map(|s| {
                        let k = &qkv[s][dim + head * d..dim + (head + 1) * d];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (s, l) in logits.iter().enumerate() {
                    let w = (l - m).exp() / z;
                    for j in 0..d {
                        merged[head * d + j] += w * qkv[s][2 * dim + head * d + j];
                    }
                }
            }
            out.extend(lin(&attn.proj, &merged));
        }
        out
    }

    #[test]
    fn causal_matches_loop_reference() {
        let (store, attn) = setup(8, 2);
        let x = Tensor::from_fn(&[1, 5, 8], |i| ((i * 7919) % 13) as f64 / 6.5 - 1.0);
        let tape = Tape::new();
        let y = attn.forward_causal(&tape, &store, tape.constant(x.clone())).unwrap().value();
        let expect = causal_oracle(&store, &attn, &x);
        let diff = y.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "max diff {diff}");
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let (store, attn) = setup(8, 2);
        let x = Tensor::from_fn(&[1, 5, 8], |i| (i as f64 * 0.31).sin());
        let mut x2 = x.clone();
        for j in 0..8 {
            x2.data_mut()[3 * 8 + j] += 5.0;
        }
        let run = |x: Tensor<f64>| {
            let tape = Tape::new();
            attn.forward_causal(&tape, &store, tape.constant(x)).unwrap().value()
        };
        let (a, b) = (run(x), run(x2));
        assert_eq!(a.data()[..3 * 8], b.data()[..3 * 8]);
        assert_ne!(a.data()[3 * 8..], b.data()[3 * 8..]);
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let (store, attn) = setup(8, 4);
        let x = Tensor::from_fn(&[2, 6, 8], |i| (i as f64 * 0.17).cos());
        let tape = Tape::new();
        let (out, w) = attn.forward_with_weights(&tape, &store, tape.constant(x), None).unwrap();
        assert_eq!(out.shape(), vec![2, 6, 8]);
        for row in w.value().data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_memory_token_gets_all_weight() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cross = CrossAttention::new(&mut ParamInit::new(&mut store, &mut rng), 8, 6, 2);
        let mem = Tensor::from_fn(&[1, 1, 6], |i| i as f64 - 2.0);
        let run = |x: Tensor<f64>| {
            let tape = Tape::new();
            let (out, w) = cross
                .forward_with_weights(&tape, &store, tape.constant(x), tape.constant(mem.clone()))
                .unwrap();
            assert!(w.value().data().iter().all(|&v| v == 1.0));
            out.value()
        };
        let a = run(Tensor::from_fn(&[1, 3, 8], |i| i as f64));
        let b = run(Tensor::from_fn(&[1, 3, 8], |i| -(i as f64) * 3.0));
        // every query position receives the same projected memory token
        assert_eq!(a, b);
        assert_eq!(a.data()[..8], a.data()[8..16]);
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(10, 3).validate().is_err());
        let mut c = AttentionConfig::new(8, 2);
        c.window_size = Some(4);
        c.shift_size = Some(4);
        assert!(c.validate().is_err());
        c.shift_size = Some(2);
        assert!(c.validate().is_ok());
    }
}
