//! Accuracy at a similarity threshold, with breakdowns by domain, question
//! category and answerability.

mod metric;
mod report;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metric::{semantic_score, MetricTable, METRIC_DIM, METRIC_SEED};
pub use report::{accuracy_at, render_table, EvalItem, EvalReport, HISTOGRAM_BINS};

use crate::corpus::vocab::EOS;
use crate::corpus::{qa_prompt, QAPair, SubVideo};
use crate::error::{Error, Result};
use crate::model::{DvLlama, Modality};
use crate::numerics::{Graph, Tensor};

/// Which modality streams enter the decoder context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMask {
    #[default]
    Both,
    VisualOnly,
    AudioOnly,
}

impl ModalityMask {
    pub fn name(self) -> &'static str {
        match self {
            ModalityMask::Both => "both",
            ModalityMask::VisualOnly => "visual_only",
            ModalityMask::AudioOnly => "audio_only",
        }
    }

    pub fn keeps(self, m: Modality) -> bool {
        !matches!(
            (self, m),
            (ModalityMask::VisualOnly, Modality::Audio) | (ModalityMask::AudioOnly, Modality::Vision)
        )
    }
}

impl FromStr for ModalityMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ModalityMask::Both),
            "visual_only" => Ok(ModalityMask::VisualOnly),
            "audio_only" => Ok(ModalityMask::AudioOnly),
            _ => Err(Error::Config(format!(
                "unknown modality mask {s:?}; expected both, visual_only or audio_only"
            ))),
        }
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Anything that can answer a question about a sub-video.
pub trait Answerer {
    fn answer(&mut self, video: &SubVideo, qa: &QAPair) -> Result<Vec<usize>>;
}

/// Test double that returns the reference answer.
pub struct CopyReference;

impl Answerer for CopyReference {
    fn answer(&mut self, _video: &SubVideo, qa: &QAPair) -> Result<Vec<usize>> {
        Ok(qa.a.clone())
    }
}

/// Greedy decoding with the model, modality tokens computed once per video.
pub struct ModelAnswerer<'a> {
    model: &'a DvLlama<f32>,
    mask: ModalityMask,
    max_new: usize,
    cache: HashMap<u64, [Option<Tensor<f32>>; 2]>,
}

impl<'a> ModelAnswerer<'a> {
    pub fn new(model: &'a DvLlama<f32>, mask: ModalityMask, max_new: usize) -> Self {
        Self {
            model,
            mask,
            max_new,
            cache: HashMap::new(),
        }
    }

    fn streams(&mut self, video: &SubVideo) -> Result<&[Option<Tensor<f32>>; 2]> {
        if !self.cache.contains_key(&video.id) {
            let mut out = [None, None];
            for (slot, m) in Modality::ALL.into_iter().enumerate() {
                if !self.mask.keeps(m) {
                    continue;
                }
                let tokens = match m {
                    Modality::Vision => video.visual_tokens(),
                    Modality::Audio => video.audio_tokens(),
                };
                let mut g = Graph::inference(&self.model.params);
                let t = self.model.arch.modality_tokens(&mut g, m, &tokens)?;
                out[slot] = Some(g.value(t).clone());
            }
            // a video is asked several questions in a row; keep the cache small
            self.cache.clear();
            self.cache.insert(video.id, out);
        }
        Ok(&self.cache[&video.id])
    }
}

impl Answerer for ModelAnswerer<'_> {
    fn answer(&mut self, video: &SubVideo, qa: &QAPair) -> Result<Vec<usize>> {
        let (model, max_new) = (self.model, self.max_new);
        let [vis, aud] = self.streams(video)?;
        model.arch.generate(
            &model.params,
            vis.as_ref(),
            aud.as_ref(),
            &qa_prompt(&qa.q),
            max_new,
            EOS,
        )
    }
}

/// Predictions of `answerer` for every QA pair of `manifest`, in manifest order.
pub fn collect_items<A: Answerer>(answerer: &mut A, manifest: &[SubVideo]) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for sv in manifest {
        for qa in &sv.qa {
            items.push(EvalItem {
                question: qa.q.clone(),
                reference: qa.a.clone(),
                prediction: answerer.answer(sv, qa)?,
                category: qa.category,
                domain: sv.domain.clone(),
                answerability: qa.answerability,
            });
        }
    }
    Ok(items)
}

pub fn evaluate_with<A: Answerer>(
    answerer: &mut A,
    manifest: &[SubVideo],
    threshold: f64,
    table: &MetricTable,
) -> Result<EvalReport> {
    accuracy_at(&collect_items(answerer, manifest)?, threshold, table)
}

/// Fails with a configuration error if `manifest` uses ids beyond the model vocabulary.
pub fn check_vocab(model: &DvLlama<f32>, manifest: &[SubVideo]) -> Result<()> {
    let v = model.config().vocab_size;
    match manifest.iter().map(SubVideo::max_token).max() {
        Some(m) if m >= v => Err(Error::Config(format!(
            "manifest uses token {m} but the model vocabulary has {v} entries"
        ))),
        _ => Ok(()),
    }
}

/// Greedy answers from `model` under `mask`, scored against the standard metric table.
pub fn evaluate_model(
    model: &DvLlama<f32>,
    manifest: &[SubVideo],
    mask: ModalityMask,
    threshold: f64,
    max_new: usize,
) -> Result<EvalReport> {
    check_vocab(model, manifest)?;
    let table = MetricTable::new(model.config().vocab_size);
    evaluate_with(
        &mut ModelAnswerer::new(model, mask, max_new),
        manifest,
        threshold,
        &table,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, CorpusConfig};
    use crate::model::ModelConfig;

    fn tiny_corpus() -> Vec<SubVideo> {
        gen_corpus(&CorpusConfig {
            n_subvideos: 6,
            n_domains: 3,
            n_fillers: 4,
            n_keys: 12,
            n_slide_values: 12,
            n_audio_values: 4,
            keys_per_domain: 10,
            values_per_domain: 9,
            audio_values_per_domain: 2,
            vocab_size: 96,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn tiny_model(v: usize) -> DvLlama<f32> {
        DvLlama::new(ModelConfig {
            vocab_size: v,
            d_enc: 8,
            d_llm: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_query: 2,
            max_seq: 64,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn copy_reference_is_perfect() {
        let data = tiny_corpus();
        let r = evaluate_with(&mut CopyReference, &data, 0.8, &MetricTable::new(96)).unwrap();
        assert_eq!(r.overall, 1.0);
        assert_eq!(r.n, data.iter().map(|s| s.qa.len()).sum::<usize>());
    }

    #[test]
    fn model_eval_is_deterministic_and_checks_vocab() {
        let data = tiny_corpus();
        let m = tiny_model(96);
        let a = evaluate_model(&m, &data, ModalityMask::Both, 0.8, 3).unwrap();
        let b = evaluate_model(&m, &data, ModalityMask::Both, 0.8, 3).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            evaluate_model(&tiny_model(40), &data, ModalityMask::Both, 0.8, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn masks_parse() {
        for m in [ModalityMask::Both, ModalityMask::VisualOnly, ModalityMask::AudioOnly] {
            assert_eq!(m.name().parse::<ModalityMask>().unwrap(), m);
        }
        assert!(!ModalityMask::VisualOnly.keeps(Modality::Audio));
        assert!("audio".parse::<ModalityMask>().is_err());
    }
}
