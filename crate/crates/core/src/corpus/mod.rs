//! Synthetic document-video corpus: slide decks with a reading order, narration
//! that paraphrases and supplements them, and template QA with exact answers.

mod generate;
mod samples;
mod split;
pub mod vocab;

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{gen_corpus, gen_subvideo};
pub use samples::{make_reading_order_sample, make_transcription_sample, qa_prompt, InstructionSample};
pub use split::{split, Splits};
pub use vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_subvideos: usize,
    pub n_domains: usize,
    pub qa_per_subvideo: usize,
    pub vocab_size: usize,
    pub n_fillers: usize,
    pub n_keys: usize,
    pub n_slide_values: usize,
    pub n_audio_values: usize,
    pub keys_per_domain: usize,
    pub values_per_domain: usize,
    pub audio_values_per_domain: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_subvideos: 2000,
            n_domains: 23,
            qa_per_subvideo: 6,
            vocab_size: 512,
            n_fillers: 16,
            // small pools keep the number of key/value correspondences the
            // 64-wide projections must align within reach
            n_keys: 24,
            n_slide_values: 32,
            n_audio_values: 40,
            keys_per_domain: 10,
            values_per_domain: 12,
            audio_values_per_domain: 8,
        }
    }
}

/// Most facts a sub-video can hold: three slides of three blocks.
const MAX_FACTS: usize = 9;

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_subvideos", self.n_subvideos),
            ("n_domains", self.n_domains),
            ("qa_per_subvideo", self.qa_per_subvideo),
            ("audio_values_per_domain", self.audio_values_per_domain),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("corpus.{name} must be >= 1")));
            }
        }
        // slide keys plus one audio-only key that must differ from all of them
        if self.keys_per_domain < MAX_FACTS + 1 || self.keys_per_domain > self.n_keys {
            return Err(Error::Config(format!(
                "corpus.keys_per_domain must lie in [{}, n_keys={}]",
                MAX_FACTS + 1,
                self.n_keys
            )));
        }
        if self.values_per_domain < MAX_FACTS || self.values_per_domain > self.n_slide_values {
            return Err(Error::Config(format!(
                "corpus.values_per_domain must lie in [{MAX_FACTS}, n_slide_values={}]",
                self.n_slide_values
            )));
        }
        if self.audio_values_per_domain > self.n_audio_values {
            return Err(Error::Config(
                "corpus.audio_values_per_domain exceeds n_audio_values".into(),
            ));
        }
        self.vocab().map(|_| ())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(
            self.vocab_size,
            self.n_domains,
            self.n_fillers,
            self.n_keys,
            self.n_slide_values,
            self.n_audio_values,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    InformationExtraction,
    ContentComprehension,
    TemporalAwareness,
}

impl Category {
    pub const ALL: [Category; 3] = [
        Category::InformationExtraction,
        Category::ContentComprehension,
        Category::TemporalAwareness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::InformationExtraction => "InformationExtraction",
            Category::ContentComprehension => "ContentComprehension",
            Category::TemporalAwareness => "TemporalAwareness",
        }
    }
}

/// Which modality (or combination) suffices to answer a question.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answerability {
    VisualOnly,
    AudioOnly,
    CrossModal,
    Temporal,
}

impl Answerability {
    pub fn name(self) -> &'static str {
        match self {
            Answerability::VisualOnly => "visual_only",
            Answerability::AudioOnly => "audio_only",
            Answerability::CrossModal => "cross_modal",
            Answerability::Temporal => "temporal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub q: Vec<usize>,
    pub a: Vec<usize>,
    pub category: Category,
    pub answerability: Answerability,
}

/// One slide. `facts` are `[key, value]` in reading order; a value of
/// [`vocab::NOTE`] means the value is only spoken. `layout[j]` is the reading
/// index of the block a layout-naive OCR emits `j`-th.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slide {
    pub title: Vec<usize>,
    pub facts: Vec<[usize; 2]>,
    pub layout: Vec<usize>,
}

impl Slide {
    /// OCR-order token stream: `[SLIDE_s, title.., (POS_p, key, value) per emitted block]`.
    pub fn tokens(&self, index: usize) -> Vec<usize> {
        let mut out = vec![vocab::slide_token(index)];
        out.extend_from_slice(&self.title);
        for &p in &self.layout {
            let [k, v] = self.facts[p];
            out.extend_from_slice(&[vocab::pos_token(p), k, v]);
        }
        out
    }

    /// Facts flattened in true reading order.
    pub fn reading_order(&self) -> Vec<usize> {
        self.facts.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubVideo {
    pub id: u64,
    pub domain: String,
    pub slides: Vec<Slide>,
    pub transcripts: Vec<Vec<usize>>,
    pub timestamps: Vec<[f64; 2]>,
    pub qa: Vec<QAPair>,
}

pub fn domain_label(index: usize) -> String {
    format!("domain_{index:02}")
}

impl SubVideo {
    /// Vision-branch input: every slide's OCR stream, in slide order.
    pub fn visual_tokens(&self) -> Vec<usize> {
        self.slides.iter().enumerate().flat_map(|(i, s)| s.tokens(i)).collect()
    }

    /// Audio-branch input: every transcript, in slide order.
    pub fn audio_tokens(&self) -> Vec<usize> {
        self.transcripts.iter().flatten().copied().collect()
    }

    pub fn duration(&self) -> f64 {
        match (self.timestamps.first(), self.timestamps.last()) {
            (Some(a), Some(b)) => b[1] - a[0],
            _ => 0.0,
        }
    }

    pub fn max_token(&self) -> usize {
        let slides = self
            .slides
            .iter()
            .flat_map(|s| s.title.iter().chain(s.facts.iter().flatten()));
        let qa = self.qa.iter().flat_map(|p| p.q.iter().chain(&p.a));
        slides
            .chain(self.transcripts.iter().flatten())
            .chain(qa)
            .copied()
            .max()
            .unwrap_or(0)
    }
}

pub fn to_jsonl(items: &[SubVideo]) -> Result<String> {
    let mut out = String::new();
    for sv in items {
        out.push_str(&serde_json::to_string(sv)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<SubVideo>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1))))
        .collect()
}

pub fn write_manifest(path: &Path, items: &[SubVideo]) -> Result<()> {
    crate::util::write_atomic(path, to_jsonl(items)?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SubVideo>> {
    let f = std::fs::File::open(path)?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?);
    }
    Ok(items)
}
