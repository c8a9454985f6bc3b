//! Lemma recognition for scanned record cards: box selection, augmentation,
//! byte-level BPE, transformer encoder-decoders trained on a home-grown
//! gradient tape, beam search and CER evaluation.
//!
//! The guide in `book/` walks through each module; its snippets run as
//! doc-tests of this crate.

pub mod augment;
pub mod dataprep;
pub mod decode;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    mod tokenizer {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/cer.md")]
    mod cer {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/dataprep.md")]
    mod dataprep {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
