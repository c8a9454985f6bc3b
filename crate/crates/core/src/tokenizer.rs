//! Byte-level BPE trained on the label corpus.
//!
//! Ids `0..3` are the specials (`PAD`, `BOS`, `EOS`), ids `3..259` are the
//! raw bytes, and every learned merge appends one id after that. Any byte
//! string can therefore be encoded, whatever the training corpus was.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const NUM_SPECIALS: u32 = 3;
/// Specials plus the 256 byte symbols.
pub const BASE_VOCAB: usize = 259;
pub const DEFAULT_VOCAB_SIZE: usize = 512;

const HEADER: &str = "#lemma-htr bpe v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    /// `(left, right)` ids of each merge, in training order.
    merges: Vec<(u32, u32)>,
    /// Byte content of every non-special id (index `id - NUM_SPECIALS`).
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

impl Default for Tokenizer {
    /// The byte-only vocabulary, with no merges.
    fn default() -> Self {
        Self {
            merges: Vec::new(),
            pieces: (0..=255u8).map(|b| vec![b]).collect(),
            ranks: HashMap::new(),
        }
    }
}

fn byte_id(b: u8) -> u32 {
    NUM_SPECIALS + b as u32
}

impl Tokenizer {
    /// Greedy BPE: repeatedly merge the most frequent adjacent pair until
    /// `target_vocab_size` is reached or no pair occurs twice. Frequency
    /// ties go to the pair whose byte contents sort first.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<Self> {
        if target_vocab_size <= BASE_VOCAB {
            return Err(Error::Config {
                section: "tokenizer".into(),
                key: "vocab_size".into(),
                message: format!("must exceed {BASE_VOCAB}, got {target_vocab_size}"),
            });
        }
        if corpus.is_empty() {
            return Err(Error::Validation("tokenizer corpus is empty".into()));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for s in corpus {
            *counts.entry(s.as_ref()).or_default() += 1;
        }
        let mut words: Vec<(Vec<u32>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (w.bytes().map(byte_id).collect(), c))
            .collect();
        words.sort();

        let mut tok = Self::default();
        while tok.vocab_size() < target_vocab_size {
            let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        let ka = (tok.piece(pa.0), tok.piece(pa.1));
                        let kb = (tok.piece(pb.0), tok.piece(pb.1));
                        kb.cmp(&ka).then_with(|| pb.cmp(pa))
                    })
                });
            let Some((pair, _)) = best else { break };
            let id = tok.push_merge(pair);
            for (w, _) in &mut words {
                merge_in_place(w, pair, id);
            }
        }
        Ok(tok)
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.vocab_size() as u32;
        let mut piece = self.piece(pair.0).to_vec();
        piece.extend_from_slice(self.piece(pair.1));
        self.pieces.push(piece);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        id
    }

    fn piece(&self, id: u32) -> &[u8] {
        &self.pieces[(id - NUM_SPECIALS) as usize]
    }

    pub fn vocab_size(&self) -> usize {
        BASE_VOCAB + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Byte content of a token; empty for the specials.
    pub fn token_bytes(&self, id: u32) -> Result<&[u8]> {
        match id {
            PAD | BOS | EOS => Ok(&[]),
            _ if (id as usize) < self.vocab_size() => Ok(self.piece(id)),
            _ => Err(Error::UnknownToken(id)),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Applies merges lowest rank first until none applies.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| byte_id(b)).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_in_place(&mut ids, pair, BASE_VOCAB as u32 + rank);
        }
        ids
    }

    /// Concatenated bytes of `ids`; specials contribute nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(out)
    }

    /// Like [`decode_bytes`](Self::decode_bytes); invalid UTF-8 (possible
    /// for arbitrary generated ids) is replaced by U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// `BOS + encode(text) + EOS`.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BOS);
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\nspecial PAD {PAD}\nspecial BOS {BOS}\nspecial EOS {EOS}\nmerges {}\n", self.merges.len());
        for &(l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("<tokenizer>", m);
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header".into()));
        }
        for (name, id) in [("PAD", PAD), ("BOS", BOS), ("EOS", EOS)] {
            let want = format!("special {name} {id}");
            if lines.next() != Some(want.as_str()) {
                return Err(bad(format!("expected `{want}`")));
            }
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("merges "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing merge count".into()))?;

        let mut tok = Self::default();
        for (i, line) in lines.by_ref().take(count).enumerate() {
            let pair = line
                .split_once(' ')
                .and_then(|(l, r)| Some((l.parse::<u32>().ok()?, r.parse::<u32>().ok()?)))
                .ok_or_else(|| bad(format!("merge {i}: expected two ids")))?;
            let next = tok.vocab_size() as u32;
            if pair.0 < NUM_SPECIALS || pair.1 < NUM_SPECIALS || pair.0 >= next || pair.1 >= next {
                return Err(bad(format!("merge {i}: references an undefined token")));
            }
            tok.push_merge(pair);
        }
        if tok.merges.len() != count || lines.any(|l| !l.is_empty()) {
            return Err(bad(format!("expected exactly {count} merges")));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path, message),
            e => e,
        })
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
fn merge_in_place(ids: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut out = 0;
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            ids[out] = id;
            i += 2;
        } else {
            ids[out] = ids[i];
            i += 1;
        }
        out += 1;
    }
    ids.truncate(out);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let tok = Tokenizer::train(&["aaab"], 260).unwrap();
        assert_eq!(tok.merges(), &[(byte_id(b'a'), byte_id(b'a'))]);
        assert_eq!(tok.encode("aaab"), vec![259, byte_id(b'a'), byte_id(b'b')]);
    }

    #[test]
    fn frequency_ties_prefer_smaller_bytes() {
        // "ab" and "cd" both occur twice
        let tok = Tokenizer::train(&["cdab", "abcd"], 260).unwrap();
        assert_eq!(tok.merges(), &[(byte_id(b'a'), byte_id(b'b'))]);
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let tok = Tokenizer::train(&["abc"], 400).unwrap();
        assert_eq!(tok.vocab_size(), BASE_VOCAB);
    }

    #[test]
    fn minimum_vocab_is_enforced() {
        assert!(matches!(Tokenizer::train(&["a"], 259), Err(Error::Config { .. })));
    }

    #[test]
    fn empty_string() {
        let tok = Tokenizer::train(&["salus", "sanctus"], 300).unwrap();
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
        assert!(tok.encode("sanctus").len() <= 7);
    }

    #[test]
    fn unknown_id_is_an_error() {
        let tok = Tokenizer::default();
        assert!(matches!(tok.decode(&[259]), Err(Error::UnknownToken(259))));
        assert_eq!(tok.decode(&[BOS, byte_id(b'x'), EOS, PAD]).unwrap(), "x");
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let tok = Tokenizer::train(&["abundantia", "abacus", "abbas", "äbä"], 300).unwrap();
        let text = tok.to_text();
        let back = Tokenizer::from_text(&text).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.to_text(), text);
        assert!(Tokenizer::from_text(&text.replace("merges", "merge")).is_err());
    }
}
