//! Token corpora: a bundled deterministic synthetic corpus plus loaders for
//! raw byte files and "TOK16" token files.
//!
//! The synthetic corpus is an order-3 Markov source over 64 printable
//! symbols. Eight Zipf-weighted candidate successors hang off every symbol,
//! and the classes of the two older symbols rotate the weights. That layers
//! the structure a byte model can learn: symbol support (~4.16 nats), the
//! bigram candidate tables (~2.1) and the full order-3 rotation rule
//! (~1.8), so loss keeps improving with capacity, data and a working
//! attention path. The final fraction of every corpus is held out for
//! evaluation and never served for training.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fraction of the corpus reserved as the fixed held-out split.
pub const HELD_OUT_FRACTION: f64 = 0.02;

/// Default synthetic corpus length in tokens.
pub const DEFAULT_SYNTH_LEN: usize = 20 * 1024 * 1024;

pub const SYNTH_SEED: u64 = 0x6d75_7761_726d_3031; // "muwarm01"

#[derive(Debug, Clone)]
pub struct Corpus {
    pub tokens: Vec<u16>,
    pub vocab: usize,
    /// First token offset of the held-out split.
    pub split_start: usize,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Corpus {
    /// Deterministic synthetic corpus; identical bytes for identical
    /// (seed, len).
    pub fn synthetic(seed: u64, len: usize) -> Corpus {
        let mut rng = Rng::new(seed, 0);
        let mut tokens = Vec::with_capacity(len);
        // eight candidate successors per symbol
        let mut candidates = [[0u16; 8]; 64];
        for (sym, row) in candidates.iter_mut().enumerate() {
            let h = mix(seed ^ (sym as u64).wrapping_mul(GOLDEN));
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = ((h >> (6 * k)) & 63) as u16;
            }
        }
        // cumulative Zipf-8 weights: w_k = 1/(k+1)
        let h8: f64 = (1..=8).map(|k| 1.0 / k as f64).sum();
        let mut cum = [0.0f64; 8];
        let mut acc = 0.0;
        for (k, c) in cum.iter_mut().enumerate() {
            acc += (1.0 / (k + 1) as f64) / h8;
            *c = acc;
        }
        let (mut s1, mut s2, mut s3) = (0u16, 0u16, 0u16);
        for _ in 0..len {
            let u = rng.uniform();
            let rank = cum.iter().position(|&c| u < c).unwrap_or(7);
            // classes of the two older symbols rotate the Zipf weights
            let rot = ((s2 >> 3) * 3 + (s1 >> 3) * 5) as usize;
            let slot = (rank + rot) % 8;
            let next = candidates[s3 as usize][slot];
            tokens.push(32 + next);
            s1 = s2;
            s2 = s3;
            s3 = next;
        }
        Corpus::from_tokens(tokens, 256)
    }

    /// The bundled default corpus used when no path is supplied.
    pub fn bundled() -> Corpus {
        Corpus::synthetic(SYNTH_SEED, DEFAULT_SYNTH_LEN)
    }

    pub fn from_tokens(tokens: Vec<u16>, vocab: usize) -> Corpus {
        let split_start = ((tokens.len() as f64) * (1.0 - HELD_OUT_FRACTION)).floor() as usize;
        Corpus {
            tokens,
            vocab,
            split_start,
        }
    }

    /// Load raw bytes, or a token file with a "TOK16 <vocab>\n" header
    /// followed by little-endian 16-bit ids.
    pub fn from_file(path: &Path) -> Result<Corpus> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if let Some(rest) = bytes.strip_prefix(b"TOK16 ") {
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Input("TOK16 header missing newline".into()))?;
            let vocab: usize = std::str::from_utf8(&rest[..nl])
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Input("TOK16 header vocab unparsable".into()))?;
            let payload = &rest[nl + 1..];
            if payload.len() % 2 != 0 {
                return Err(Error::Input("TOK16 payload has odd byte length".into()));
            }
            let tokens: Vec<u16> = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Input(format!(
                    "TOK16 token {bad} out of declared vocab {vocab}"
                )));
            }
            Ok(Corpus::from_tokens(tokens, vocab))
        } else {
            let tokens: Vec<u16> = bytes.iter().map(|&b| b as u16).collect();
            Ok(Corpus::from_tokens(tokens, 256))
        }
    }

    /// Tokens available for training (cursor space).
    pub fn train_len(&self) -> usize {
        self.split_start
    }

    pub fn eval_len(&self) -> usize {
        self.tokens.len() - self.split_start
    }
}
