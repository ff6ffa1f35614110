//! Role-partitioned token vocabulary.
//!
//! Layout from id 0 upward: structural markers, question templates, topic
//! tokens and their spoken variants, fillers, keys, slide values, audio-only
//! values, then the spoken variants of keys and slide values.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
/// Stands in for a value that is only given in the narration.
pub const NOTE: usize = 4;
/// Introduces an audio-only fact in a transcript.
pub const AUD: usize = 5;
pub const READ: usize = 6;
pub const TRANSCRIBE: usize = 7;
pub const MAX_SLIDES: usize = 3;
const SLIDE_BASE: usize = 8;
pub const MAX_BLOCKS: usize = 8;
const POS_BASE: usize = SLIDE_BASE + MAX_SLIDES;
pub const Q_VALUE: usize = POS_BASE + MAX_BLOCKS;
pub const Q_AUDIO: usize = Q_VALUE + 1;
pub const Q_CROSS: usize = Q_VALUE + 2;
pub const Q_FIRST: usize = Q_VALUE + 3;
pub const Q_ORDER: usize = Q_VALUE + 4;
const RESERVED: usize = Q_ORDER + 1;

/// Seed of the spoken-variant permutation. Part of the format, never configurable.
const PARAPHRASE_SEED: u64 = 0x5041_5241;

/// 1-based slide index token.
pub fn slide_token(index: usize) -> usize {
    assert!(index < MAX_SLIDES, "slide index {index} out of range");
    SLIDE_BASE + index
}

pub fn slide_of_token(tok: usize) -> Option<usize> {
    (SLIDE_BASE..SLIDE_BASE + MAX_SLIDES)
        .contains(&tok)
        .then(|| tok - SLIDE_BASE)
}

pub fn pos_token(index: usize) -> usize {
    assert!(index < MAX_BLOCKS, "block index {index} out of range");
    POS_BASE + index
}

pub fn pos_of_token(tok: usize) -> Option<usize> {
    (POS_BASE..POS_BASE + MAX_BLOCKS).contains(&tok).then(|| tok - POS_BASE)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub n_domains: usize,
    pub n_fillers: usize,
    pub n_keys: usize,
    pub n_slide_values: usize,
    pub n_audio_values: usize,
    topic_base: usize,
    spoken_topic_base: usize,
    filler_base: usize,
    key_base: usize,
    slide_value_base: usize,
    audio_value_base: usize,
    spoken_base: usize,
    /// canonical index (keys then slide values) → offset in the spoken range
    spoken: Vec<usize>,
    written: Vec<usize>,
}

impl Vocab {
    pub fn new(
        size: usize,
        n_domains: usize,
        n_fillers: usize,
        n_keys: usize,
        n_slide_values: usize,
        n_audio_values: usize,
    ) -> Result<Self> {
        let needed = RESERVED + 2 * n_domains + n_fillers + 2 * (n_keys + n_slide_values) + n_audio_values;
        if needed > size {
            return Err(Error::Config(format!(
                "vocabulary of {size} tokens is too small: the requested pools need {needed}"
            )));
        }
        if n_domains == 0 || n_keys == 0 || n_slide_values == 0 || n_audio_values == 0 {
            return Err(Error::Config("token pools must be non-empty".into()));
        }
        let topic_base = RESERVED;
        let spoken_topic_base = topic_base + n_domains;
        let filler_base = spoken_topic_base + n_domains;
        let key_base = filler_base + n_fillers;
        let slide_value_base = key_base + n_keys;
        let audio_value_base = slide_value_base + n_slide_values;
        let spoken_base = audio_value_base + n_audio_values;

        let n = n_keys + n_slide_values;
        let mut spoken: Vec<usize> = (0..n).collect();
        spoken.shuffle(&mut ChaCha8Rng::seed_from_u64(PARAPHRASE_SEED));
        let mut written = vec![0; n];
        for (i, &s) in spoken.iter().enumerate() {
            written[s] = i;
        }
        Ok(Self {
            size,
            n_domains,
            n_fillers,
            n_keys,
            n_slide_values,
            n_audio_values,
            topic_base,
            spoken_topic_base,
            filler_base,
            key_base,
            slide_value_base,
            audio_value_base,
            spoken_base,
            spoken,
            written,
        })
    }

    pub fn topic(&self, domain: usize) -> usize {
        self.topic_base + domain
    }

    pub fn filler(&self, i: usize) -> usize {
        self.filler_base + i
    }

    pub fn key(&self, i: usize) -> usize {
        self.key_base + i
    }

    pub fn slide_value(&self, i: usize) -> usize {
        self.slide_value_base + i
    }

    pub fn audio_value(&self, i: usize) -> usize {
        self.audio_value_base + i
    }

    pub fn is_key(&self, tok: usize) -> bool {
        (self.key_base..self.slide_value_base).contains(&tok)
    }

    pub fn is_filler(&self, tok: usize) -> bool {
        (self.filler_base..self.key_base).contains(&tok)
    }

    /// Spoken form of a topic, key or slide value. Other tokens map to themselves.
    pub fn paraphrase(&self, tok: usize) -> usize {
        if (self.topic_base..self.spoken_topic_base).contains(&tok) {
            return tok + self.n_domains;
        }
        if (self.key_base..self.audio_value_base).contains(&tok) {
            return self.spoken_base + self.spoken[tok - self.key_base];
        }
        tok
    }

    /// Inverse of [`Vocab::paraphrase`].
    pub fn unparaphrase(&self, tok: usize) -> usize {
        if (self.spoken_topic_base..self.filler_base).contains(&tok) {
            return tok - self.n_domains;
        }
        let end = self.spoken_base + self.spoken.len();
        if (self.spoken_base..end).contains(&tok) {
            return self.key_base + self.written[tok - self.spoken_base];
        }
        tok
    }

    /// One past the largest id the generator can emit.
    pub fn used(&self) -> usize {
        self.spoken_base + self.spoken.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(512, 23, 16, 64, 96, 40).unwrap()
    }

    #[test]
    fn paraphrase_is_a_bijection_off_the_canonical_range() {
        let v = vocab();
        let mut seen = std::collections::HashSet::new();
        for tok in (0..v.n_keys)
            .map(|i| v.key(i))
            .chain((0..v.n_slide_values).map(|i| v.slide_value(i)))
        {
            let p = v.paraphrase(tok);
            assert_ne!(p, tok);
            assert!(p < v.used());
            assert!(seen.insert(p));
            assert_eq!(v.unparaphrase(p), tok);
        }
        assert_eq!(v.paraphrase(v.topic(4)), v.topic(4) + 23);
        assert_eq!(v.unparaphrase(v.paraphrase(v.topic(4))), v.topic(4));
        assert_eq!(v.paraphrase(v.audio_value(3)), v.audio_value(3));
        assert_eq!(v.paraphrase(EOS), EOS);
    }

    #[test]
    fn too_small_vocab_is_config_error() {
        assert!(matches!(Vocab::new(200, 23, 16, 64, 96, 40), Err(Error::Config(_))));
    }

    #[test]
    fn marker_helpers_round_trip() {
        for s in 0..MAX_SLIDES {
            assert_eq!(slide_of_token(slide_token(s)), Some(s));
        }
        for p in 0..MAX_BLOCKS {
            assert_eq!(pos_of_token(pos_token(p)), Some(p));
        }
        assert_eq!(slide_of_token(Q_VALUE), None);
    }
}
