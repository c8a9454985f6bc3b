//! Beam search with n-gram repetition bans and length normalization.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub num_beams: usize,
    /// Maximum sequence length, counting the leading BOS.
    pub max_length: usize,
    /// 0 disables the ban.
    pub no_repeat_ngram_size: usize,
    pub length_penalty: f64,
    pub early_stopping: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_beams: 4,
            max_length: 32,
            no_repeat_ngram_size: 3,
            length_penalty: 2.0,
            early_stopping: true,
        }
    }
}

impl GenerationConfig {
    pub fn greedy(max_length: usize) -> Self {
        Self {
            num_beams: 1,
            max_length,
            no_repeat_ngram_size: 0,
            length_penalty: 0.0,
            early_stopping: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Error::Config {
            section: "generation".into(),
            key: key.into(),
            message: message.into(),
        };
        if self.num_beams == 0 {
            return Err(bad("num_beams", "must be at least 1"));
        }
        if self.max_length < 2 {
            return Err(bad("max_length", "must be at least 2"));
        }
        if !self.length_penalty.is_finite() {
            return Err(bad("length_penalty", "must be finite"));
        }
        Ok(())
    }
}

/// Anything that scores the next token given equal-length prefixes.
pub trait StepModel {
    /// Next-token log-probabilities, one row per prefix.
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS unless the length limit was hit.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// `log_prob / generated_len^length_penalty`.
    pub score: f64,
}

impl Hypothesis {
    /// Tokens without BOS and the trailing EOS.
    pub fn content(&self) -> &[u32] {
        let t = &self.tokens[1..];
        t.strip_suffix(&[EOS]).unwrap_or(t)
    }
}

/// Length-normalized score; the generated length excludes BOS.
pub fn normalized_score(log_prob: f64, generated_len: usize, length_penalty: f64) -> f64 {
    log_prob / (generated_len as f64).powf(length_penalty)
}

/// Tokens that would complete an n-gram already present in `seq`.
pub fn ban_repeated_ngrams(seq: &[u32], n: usize) -> HashSet<u32> {
    let mut banned = HashSet::new();
    if n == 0 || seq.len() + 1 < n {
        return banned;
    }
    let tail = &seq[seq.len() + 1 - n..];
    for w in seq.windows(n) {
        if &w[..n - 1] == tail {
            banned.insert(w[n - 1]);
        }
    }
    banned
}

struct Candidate {
    score: f64,
    beam: usize,
    token: u32,
}

/// Beam search from a lone BOS.
///
/// At each step every live beam is extended by every non-banned token and
/// candidates are ranked by cumulative log-probability (ties: lower token
/// id, then lower beam index). An EOS candidate is finished if it ranks
/// within the top `num_beams`; other candidates refill the live beams.
/// Hypotheses that reach `max_length` are finished as well. With
/// `early_stopping`, search ends as soon as `num_beams` hypotheses are
/// finished. The result maximizes the length-normalized score.
pub fn beam_search(model: &dyn StepModel, cfg: &GenerationConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let k = cfg.num_beams;
    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let finish = |tokens: Vec<u32>, log_prob: f64| Hypothesis {
        score: normalized_score(log_prob, tokens.len() - 1, cfg.length_penalty),
        tokens,
        log_prob,
    };

    while !live.is_empty() {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|(t, _)| t.clone()).collect();
        let rows = model.next_log_probs(&prefixes)?;
        if rows.len() != live.len() {
            return Err(Error::Contract(format!("model returned {} rows for {} prefixes", rows.len(), live.len())));
        }
        let mut cands = Vec::new();
        for (b, ((tokens, lp), row)) in live.iter().zip(&rows).enumerate() {
            if row.iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric(format!("NaN log-probability at step {}", tokens.len())));
            }
            let banned = ban_repeated_ngrams(tokens, cfg.no_repeat_ngram_size);
            for (t, &v) in row.iter().enumerate() {
                let t = t as u32;
                if v == f64::NEG_INFINITY || banned.contains(&t) {
                    continue;
                }
                cands.push(Candidate {
                    score: lp + v,
                    beam: b,
                    token: t,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.token.cmp(&b.token))
                .then(a.beam.cmp(&b.beam))
        });

        let at_limit = live[0].0.len() + 1 >= cfg.max_length;
        let mut next = Vec::with_capacity(k);
        for (rank, c) in cands.iter().enumerate() {
            let mut tokens = live[c.beam].0.clone();
            tokens.push(c.token);
            if c.token == EOS {
                if rank < k {
                    finished.push(finish(tokens, c.score));
                }
            } else {
                next.push((tokens, c.score));
                if next.len() == k {
                    break;
                }
            }
        }
        if at_limit {
            finished.extend(next.drain(..).map(|(t, s)| finish(t, s)));
        }
        if cfg.early_stopping && finished.len() >= k {
            break;
        }
        live = next;
    }

    finished
        .into_iter()
        .reduce(|best, h| if h.score > best.score { h } else { best })
        .ok_or_else(|| Error::Numeric("every continuation was banned or impossible".into()))
}

/// Highest-probability token at every step, until EOS or `max_length`.
pub fn greedy_search(model: &dyn StepModel, max_length: usize) -> Result<Hypothesis> {
    let mut tokens = vec![BOS];
    let mut log_prob = 0.0;
    while tokens.len() < max_length {
        let row = model.next_log_probs(std::slice::from_ref(&tokens))?.remove(0);
        let (t, v) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if v.is_nan() || v == f64::NEG_INFINITY {
            return Err(Error::Numeric("no finite next-token log-probability".into()));
        }
        tokens.push(t as u32);
        log_prob += v;
        if t as u32 == EOS {
            break;
        }
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        score: log_prob,
    })
}

/// Numerically stable `log_softmax` of one row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Log-probs depend only on the prefix length.
    struct ByStep(Vec<Vec<f64>>);

    impl StepModel for ByStep {
        fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|p| log_softmax(&self.0[p.len() - 1])).collect())
        }
    }

    #[test]
    fn defaults() {
        let c = GenerationConfig::default();
        assert_eq!((c.num_beams, c.max_length, c.no_repeat_ngram_size, c.length_penalty, c.early_stopping), (4, 32, 3, 2.0, true));
    }

    #[test]
    fn ngram_bans() {
        assert_eq!(ban_repeated_ngrams(&[0, 1, 2, 0, 1], 3), HashSet::from([2]));
        assert!(ban_repeated_ngrams(&[5], 3).is_empty());
        assert_eq!(ban_repeated_ngrams(&[4, 3, 4], 1), HashSet::from([3, 4]));
        assert!(ban_repeated_ngrams(&[4, 4], 0).is_empty());
    }

    #[test]
    fn division_favours_longer_at_equal_log_prob() {
        let short = normalized_score(-2.0, 2, 2.0);
        let long = normalized_score(-2.0, 4, 2.0);
        assert!(long > short);
        assert_eq!(normalized_score(-2.0, 4, 0.0), -2.0);
    }

    #[test]
    fn stops_at_max_length() {
        // EOS is never likely; the search must stop on length
        let m = ByStep(vec![vec![0.0, 0.0, -50.0, 5.0, 1.0]; 8]);
        let h = beam_search(&m, &GenerationConfig { max_length: 6, ..Default::default() }).unwrap();
        assert_eq!(h.tokens.len(), 6);
        assert!(ban_repeated_ngrams(&h.tokens[..5], 3).iter().all(|t| *t != h.tokens[5]));
    }

    #[test]
    fn nan_is_reported() {
        let m = ByStep(vec![vec![f64::NAN; 5]; 4]);
        assert!(matches!(beam_search(&m, &GenerationConfig::default()), Err(Error::Numeric(_))));
    }
}
