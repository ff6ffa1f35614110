use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Schedule};
use crate::error::{Error, Result};
use crate::model::Modality;
use crate::numerics::{glob_match, Element, ParamStore};
use crate::util::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "S1_VISION")]
    S1Vision,
    #[serde(rename = "S1_AUDIO")]
    S1Audio,
    #[serde(rename = "S2_ALIGN")]
    S2Align,
    #[serde(rename = "S3_FUSION")]
    S3Fusion,
}

/// The three training families; the unit of `--stages` and of ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageFamily {
    S1,
    S2,
    S3,
}

impl StageId {
    /// Canonical execution order.
    pub const ALL: [StageId; 4] = [StageId::S1Vision, StageId::S1Audio, StageId::S2Align, StageId::S3Fusion];

    pub fn tag(self) -> &'static str {
        match self {
            StageId::S1Vision => "S1_VISION",
            StageId::S1Audio => "S1_AUDIO",
            StageId::S2Align => "S2_ALIGN",
            StageId::S3Fusion => "S3_FUSION",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown stage tag {tag:?}")))
    }

    pub fn family(self) -> StageFamily {
        match self {
            StageId::S1Vision | StageId::S1Audio => StageFamily::S1,
            StageId::S2Align => StageFamily::S2,
            StageId::S3Fusion => StageFamily::S3,
        }
    }

    fn ordinal(self) -> usize {
        self as usize
    }

    pub fn data_selector(self) -> &'static str {
        match self {
            StageId::S1Vision => "reading_order",
            StageId::S1Audio => "transcription",
            StageId::S2Align => "av_pairs",
            StageId::S3Fusion => "fusion_qa",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl StageFamily {
    pub fn stages(self) -> &'static [StageId] {
        match self {
            StageFamily::S1 => &[StageId::S1Vision, StageId::S1Audio],
            StageFamily::S2 => &[StageId::S2Align],
            StageFamily::S3 => &[StageId::S3Fusion],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageFamily::S1 => "s1",
            StageFamily::S2 => "s2",
            StageFamily::S3 => "s3",
        }
    }
}

impl FromStr for StageFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(StageFamily::S1),
            "s2" => Ok(StageFamily::S2),
            "s3" => Ok(StageFamily::S3),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected s1, s2 or s3"))),
        }
    }
}

/// Expands `s1,s2,s3` style lists to stage ids and checks canonical order.
pub fn parse_stage_list(text: &str) -> Result<Vec<StageId>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let family: StageFamily = part.parse()?;
        out.extend_from_slice(family.stages());
    }
    check_order(&out)?;
    Ok(out)
}

/// Stages must be non-empty, strictly increasing in canonical order.
pub fn check_order(stages: &[StageId]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Config("stage list is empty".into()));
    }
    if stages.windows(2).any(|w| w[0].ordinal() >= w[1].ordinal()) {
        let tags: Vec<&str> = stages.iter().map(|s| s.tag()).collect();
        return Err(Error::Config(format!(
            "stages {tags:?} are not a subsequence of S1_VISION, S1_AUDIO, S2_ALIGN, S3_FUSION"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: StageId,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub data: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stage 3 only: train LoRA adapters on the decoder.
    pub lora: bool,
}

fn globs(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

const BASE_LLM: [&str; 8] = [
    "llm.embed",
    "llm.pos",
    "llm.ln_f.*",
    "llm.*.ln1.*",
    "llm.*.ln2.*",
    "llm.*.attn.*.weight",
    "llm.*.attn.*.bias",
    "llm.*.ffn.*",
];

impl StageSpec {
    /// The canonical spec of `stage` with schedule values from `cfg`.
    pub fn canonical(stage: StageId, cfg: &RunConfig) -> Self {
        let (trainable, frozen) = match stage {
            StageId::S1Vision => (
                globs(&["vision.qformer.*", "vision.proj.*"]),
                globs(&["vision.enc.*", "audio.*", "llm.*"]),
            ),
            StageId::S1Audio => (
                globs(&["audio.qformer.*", "audio.proj.*"]),
                globs(&["audio.enc.*", "vision.*", "llm.*"]),
            ),
            StageId::S2Align => (
                globs(&["vision.proj.*", "audio.proj.*"]),
                globs(&[
                    "vision.enc.*",
                    "audio.enc.*",
                    "vision.qformer.*",
                    "audio.qformer.*",
                    "llm.*",
                ]),
            ),
            StageId::S3Fusion => {
                let mut frozen = globs(&["vision.enc.*", "audio.enc.*", "vision.qformer.*", "audio.qformer.*"]);
                frozen.extend(globs(&BASE_LLM));
                (globs(&["vision.proj.*", "audio.proj.*", "llm.*.lora.*"]), frozen)
            }
        };
        let t = &cfg.train;
        let sched: Schedule = match stage.family() {
            StageFamily::S1 => t.s1,
            StageFamily::S2 => t.s2,
            StageFamily::S3 => t.s3,
        };
        Self {
            stage,
            trainable,
            frozen,
            data: stage.data_selector().into(),
            epochs: sched.epochs.unwrap_or(t.epochs),
            batch_size: sched.batch_size.unwrap_or(t.batch_size),
            lr: sched.lr.unwrap_or(t.lr),
            seed: mix_seed(t.seed, 0x5354_4147_0000 + stage as u64),
            lora: stage == StageId::S3Fusion,
        }
    }

    /// Stage 3 with the decoder left alone: only the projections learn from
    /// the fusion objective.
    pub fn without_lora(mut self) -> Self {
        if self.stage == StageId::S3Fusion {
            self.trainable = globs(&["vision.proj.*", "audio.proj.*"]);
            self.frozen = globs(&[
                "vision.enc.*",
                "audio.enc.*",
                "vision.qformer.*",
                "audio.qformer.*",
                "llm.*",
            ]);
            self.lora = false;
        }
        self
    }

    pub fn modality(&self) -> Option<Modality> {
        match self.stage {
            StageId::S1Vision => Some(Modality::Vision),
            StageId::S1Audio => Some(Modality::Audio),
            _ => None,
        }
    }

    /// Trainable mask over `params`. Every pattern must match something and
    /// every parameter must be claimed by exactly one side.
    pub fn resolve<T: Element>(&self, params: &ParamStore<T>) -> Result<Vec<bool>> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "{}: epochs and batch_size must be >= 1",
                self.stage
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("{}: learning rate must be > 0", self.stage)));
        }
        let names: Vec<&str> = params.iter().map(|(_, p)| p.name.as_str()).collect();
        for pat in self.trainable.iter().chain(&self.frozen) {
            if !names.iter().any(|n| glob_match(pat, n)) {
                return Err(Error::Config(format!(
                    "{}: pattern {pat:?} matches no parameter",
                    self.stage
                )));
            }
        }
        names
            .iter()
            .map(|n| {
                let t = self.trainable.iter().any(|p| glob_match(p, n));
                let f = self.frozen.iter().any(|p| glob_match(p, n));
                match (t, f) {
                    (true, false) => Ok(true),
                    (false, true) => Ok(false),
                    (true, true) => Err(Error::Config(format!(
                        "{}: parameter {n} is both trainable and frozen",
                        self.stage
                    ))),
                    (false, false) => Err(Error::Config(format!(
                        "{}: parameter {n} matches no pattern",
                        self.stage
                    ))),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach_targets, LoraConfig};
    use crate::model::{DvLlama, ModelConfig};

    fn tiny() -> DvLlama<f32> {
        DvLlama::new(ModelConfig {
            vocab_size: 32,
            d_enc: 8,
            d_llm: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_query: 2,
            max_seq: 16,
            seed: 1,
        })
        .unwrap()
    }

    fn trained(spec: &StageSpec, m: &DvLlama<f32>) -> Vec<String> {
        let mask = spec.resolve(&m.params).unwrap();
        m.params
            .iter()
            .zip(mask)
            .filter(|(_, t)| *t)
            .map(|((_, p), _)| p.name.clone())
            .collect()
    }

    #[test]
    fn canonical_sets_partition_parameters() {
        let cfg = RunConfig::default();
        let mut m = tiny();
        for s in [StageId::S1Vision, StageId::S1Audio, StageId::S2Align] {
            let names = trained(&StageSpec::canonical(s, &cfg), &m);
            assert!(!names.is_empty());
            match s {
                StageId::S1Vision => assert!(names
                    .iter()
                    .all(|n| n.starts_with("vision.qformer.") || n.starts_with("vision.proj."))),
                StageId::S1Audio => assert!(names
                    .iter()
                    .all(|n| n.starts_with("audio.qformer.") || n.starts_with("audio.proj."))),
                _ => assert!(names.iter().all(|n| n.contains(".proj."))),
            }
        }
        // stage 3 needs its adapters present
        assert!(matches!(
            StageSpec::canonical(StageId::S3Fusion, &cfg).resolve(&m.params),
            Err(Error::Config(_))
        ));
        attach_targets(&mut m, LoraConfig::default()).unwrap();
        let s3 = trained(&StageSpec::canonical(StageId::S3Fusion, &cfg), &m);
        assert!(s3.iter().all(|n| n.contains(".proj.") || n.contains(".lora.")));
        assert_eq!(s3.iter().filter(|n| n.contains(".lora.")).count(), 8);
        let plain = trained(&StageSpec::canonical(StageId::S3Fusion, &cfg).without_lora(), &m);
        assert_eq!(plain.len(), 4);
    }

    #[test]
    fn overlap_and_empty_patterns_rejected() {
        let m = tiny();
        let mut spec = StageSpec::canonical(StageId::S2Align, &RunConfig::default());
        spec.trainable.push("llm.embed".into());
        assert!(matches!(spec.resolve(&m.params), Err(Error::Config(_))));
        let mut spec = StageSpec::canonical(StageId::S2Align, &RunConfig::default());
        spec.frozen.push("nothing.*".into());
        assert!(matches!(spec.resolve(&m.params), Err(Error::Config(_))));
        let mut spec = StageSpec::canonical(StageId::S2Align, &RunConfig::default());
        spec.frozen.retain(|p| p != "llm.*");
        assert!(matches!(spec.resolve(&m.params), Err(Error::Config(_))));
    }

    #[test]
    fn stage_lists() {
        assert_eq!(parse_stage_list("s1,s2,s3").unwrap(), StageId::ALL.to_vec());
        assert_eq!(
            parse_stage_list("s1,s3").unwrap(),
            vec![StageId::S1Vision, StageId::S1Audio, StageId::S3Fusion]
        );
        for bad in ["", "s3,s1", "s2,s2", "s4"] {
            assert!(matches!(parse_stage_list(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
