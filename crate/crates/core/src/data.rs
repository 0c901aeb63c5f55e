//! Character-level corpus, vocabulary and window batching.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const SPECIALS: usize = 2;

/// `<pad>` = 0, `<unk>` = 1, then the corpus code points in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Self {
            chars: set.into_iter().collect(),
        }
    }

    /// Rebuilds a vocabulary from its code points (as stored in checkpoint metadata).
    pub fn from_chars(chars: &str) -> Result<Self> {
        let list: Vec<char> = chars.chars().collect();
        if list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parse("vocabulary characters must be strictly sorted".into()));
        }
        Ok(Self { chars: list })
    }

    pub fn chars(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.chars.binary_search(&c).map_or(UNK, |i| i + SPECIALS)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Specials decode to nothing.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS)
            .filter_map(|&i| self.chars.get(i - SPECIALS))
            .collect()
    }
}

/// Encoded text with a train / validation split; validation is the tail.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    tokens: Vec<usize>,
    split: usize,
}

impl Corpus {
    pub fn from_text(text: &str, valid_fraction: f64) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Config("corpus is empty".into()));
        }
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::Config(format!("valid_fraction {valid_fraction} must lie in [0, 1)")));
        }
        let vocab = Vocab::from_text(text);
        Ok(Self::with_vocab(vocab, text, valid_fraction))
    }

    /// Encodes `text` with an existing vocabulary; unseen characters map to `<unk>`.
    pub fn with_vocab(vocab: Vocab, text: &str, valid_fraction: f64) -> Self {
        let tokens = vocab.encode(text);
        let valid = (tokens.len() as f64 * valid_fraction).floor() as usize;
        let split = tokens.len() - valid;
        Self { vocab, tokens, split }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn valid(&self) -> &[usize] {
        &self.tokens[self.split..]
    }
}

/// Start offsets of contiguous `T`-token windows; each window carries one
/// extra token for the shifted targets.
pub fn window_starts(len: usize, seq_len: usize) -> Vec<usize> {
    if len < seq_len + 1 {
        return Vec::new();
    }
    (0..(len - 1) / seq_len).map(|i| i * seq_len).collect()
}

/// Draws batches of windows in a seeded per-epoch order. The batch for a
/// step depends only on `(seed, step)`, so a resumed run sees the same data.
#[derive(Debug, Clone)]
pub struct Batcher {
    starts: Vec<usize>,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Batcher {
    pub fn new(tokens: &[usize], seq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let starts = window_starts(tokens.len(), seq_len);
        if starts.is_empty() {
            return Err(Error::EmptySplit("training split is shorter than one window"));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(Self {
            starts,
            seq_len,
            batch_size,
            seed,
            epoch: None,
        })
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.starts.len()
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.starts.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
            self.epoch = Some((epoch, order));
        }
        &self.epoch.as_ref().expect("epoch order cached").1
    }

    /// Windows of `T+1` tokens for 0-based step `step`.
    pub fn batch(&mut self, tokens: &[usize], step: u64) -> Vec<Vec<usize>> {
        let n = self.starts.len() as u64;
        (0..self.batch_size as u64)
            .map(|b| {
                let g = step * self.batch_size as u64 + b;
                let pick = self.order(g / n)[(g % n) as usize];
                let s = self.starts[pick];
                tokens[s..s + self.seq_len + 1].to_vec()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocabulary_layout() {
        let v = Vocab::from_text("banana");
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode("abn"), vec![2, 3, 4]);
        assert_eq!(v.id('z'), UNK);
        assert_eq!(v.decode(&[PAD, 3, UNK, 2]), "ba");
        assert_eq!(Vocab::from_chars(&v.chars()).unwrap(), v);
        assert!(Vocab::from_chars("ba").is_err());
    }

    #[test]
    fn split_is_a_disjoint_tail() {
        let c = Corpus::from_text("abcdefghij", 0.2).unwrap();
        assert_eq!(c.train().len(), 8);
        assert_eq!(c.valid(), &c.tokens()[8..]);
        assert!(Corpus::from_text("", 0.1).is_err());
        assert!(Corpus::from_text("abc", 1.0).is_err());
    }

    #[test]
    fn windows_do_not_overlap_except_the_target_token() {
        assert_eq!(window_starts(10, 3), vec![0, 3, 6]);
        assert_eq!(window_starts(9, 3), vec![0, 3]);
        assert!(window_starts(3, 3).is_empty());
    }

    #[test]
    fn batcher_covers_each_window_once_per_epoch() {
        let tokens: Vec<usize> = (0..41).collect();
        let mut b = Batcher::new(&tokens, 4, 2, 7).unwrap();
        assert_eq!(b.windows_per_epoch(), 10);
        let mut firsts: Vec<usize> = (0..5).flat_map(|s| b.batch(&tokens, s)).map(|w| w[0]).collect();
        firsts.sort_unstable();
        assert_eq!(firsts, (0..10).map(|i| i * 4).collect::<Vec<_>>());
        let again = Batcher::new(&tokens, 4, 2, 7).unwrap().batch(&tokens, 3);
        assert_eq!(b.batch(&tokens, 3), again);
        assert_ne!(b.batch(&tokens, 0), b.batch(&tokens, 5));
    }

    proptest! {
        #[test]
        fn encode_then_decode_is_identity(text in "[a-zA-Z .,;\n]{1,200}") {
            let v = Vocab::from_text(&text);
            prop_assert_eq!(v.decode(&v.encode(&text)), text);
        }
    }
}
