use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{run_stage, StageRecord};
use super::stage::{check_order, StageFamily, StageId, StageSpec};
use crate::corpus::SubVideo;
use crate::error::{Error, Result};
use crate::lora::{attach_targets, merge_all, LoraConfig};
use crate::model::checkpoint::{CheckpointFile, FORMAT_VERSION};
use crate::model::{DvLlama, ModelConfig};

/// Everything about a checkpoint that is not a parameter value; stored as
/// JSON next to the binary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: StageId,
    pub seed: u64,
    pub step_count: u64,
    pub lineage: Vec<StageId>,
    pub ablation: Option<StageFamily>,
    pub history: Vec<StageRecord>,
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    /// Adapters folded into the base weights.
    pub merged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub file: CheckpointFile,
}

/// Path of the metadata sidecar of a checkpoint file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

impl Checkpoint {
    pub fn capture(model: &DvLlama<f32>, meta: CheckpointMeta) -> Self {
        let file = CheckpointFile::from_store(meta.stage.tag(), meta.seed, &model.params);
        Self { meta, file }
    }

    pub fn meta_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.file.write(path)?;
        crate::util::write_atomic(&meta_path(path), self.meta_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = CheckpointFile::read(path)?;
        let text = std::fs::read_to_string(meta_path(path))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.format_version != file.version || meta.stage.tag() != file.stage_tag {
            return Err(Error::Format(
                "checkpoint metadata does not match its parameter file".into(),
            ));
        }
        Ok(Self { meta, file })
    }

    /// Rebuilds the model, adapters included, with the stored values.
    pub fn restore(&self) -> Result<DvLlama<f32>> {
        let mut model = DvLlama::new(self.meta.model.clone())?;
        if let Some(cfg) = self.meta.lora {
            attach_targets(&mut model, cfg)?;
        }
        self.file.load_into(&mut model.params)?;
        Ok(model)
    }

    /// Same checkpoint with LoRA folded into the decoder weights.
    pub fn merged(&self) -> Result<Self> {
        let model = self.restore()?;
        if model.arch.lora.is_none() {
            return Ok(self.clone());
        }
        let merged = merge_all(&model)?;
        let meta = CheckpointMeta {
            lora: None,
            merged: true,
            ..self.meta.clone()
        };
        Ok(Self::capture(&merged, meta))
    }
}

/// A model after some stages, with the checkpoint describing it.
pub struct Trained {
    pub model: DvLlama<f32>,
    pub checkpoint: Checkpoint,
}

/// Runs `stages` in order on `corpus`, continuing from `prior` when given.
///
/// With `out_dir` set, a checkpoint `<STAGE>.ckpt` is written after each stage.
pub fn run_stages(
    mut model: DvLlama<f32>,
    prior: Option<&CheckpointMeta>,
    corpus: &[SubVideo],
    stages: &[StageId],
    cfg: &RunConfig,
    ablation: Option<StageFamily>,
    out_dir: Option<&Path>,
) -> Result<Trained> {
    cfg.validate()?;
    let mut lineage = prior.map(|m| m.lineage.clone()).unwrap_or_default();
    let mut history = prior.map(|m| m.history.clone()).unwrap_or_default();
    let mut steps = prior.map_or(0, |m| m.step_count);
    let ablation = ablation.or(prior.and_then(|m| m.ablation));
    let mut full = lineage.clone();
    full.extend_from_slice(stages);
    check_order(stages)?;
    check_order(&full)?;
    if let Some(skip) = ablation {
        if let Some(s) = full.iter().find(|s| s.family() == skip && skip != StageFamily::S3) {
            return Err(Error::Config(format!(
                "stage {s} runs although {} is ablated",
                skip.name()
            )));
        }
    }
    let mut last = None;
    for &stage in stages {
        let mut spec = StageSpec::canonical(stage, cfg);
        if ablation == Some(StageFamily::S3) {
            spec = spec.without_lora();
        }
        info!(
            "running {stage} ({} epochs, batch {}, lr {})",
            spec.epochs, spec.batch_size, spec.lr
        );
        let rec = run_stage(&mut model, corpus, &spec, &cfg.align, &cfg.lora)?;
        steps += rec.steps;
        lineage.push(stage);
        history.push(rec);
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            stage,
            seed: cfg.train.seed,
            step_count: steps,
            lineage: lineage.clone(),
            ablation,
            history: history.clone(),
            model: model.arch.config.clone(),
            lora: model.arch.lora.as_ref().map(|s| s.config),
            merged: false,
        };
        let ck = Checkpoint::capture(&model, meta);
        if let Some(dir) = out_dir {
            let path = dir.join(format!("{}.ckpt", stage.tag()));
            ck.save(&path)?;
            info!("wrote {}", path.display());
        }
        last = Some(ck);
    }
    let checkpoint = last.expect("stage list checked non-empty");
    Ok(Trained { model, checkpoint })
}

/// Fresh model through `stages`.
pub fn train_pipeline(
    corpus: &[SubVideo],
    stages: &[StageId],
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<Trained> {
    let model = DvLlama::new(cfg.model.clone())?;
    run_stages(model, None, corpus, stages, cfg, None, out_dir)
}

/// Continues a saved checkpoint with later stages.
pub fn resume(
    ck: &Checkpoint,
    corpus: &[SubVideo],
    stages: &[StageId],
    cfg: &RunConfig,
    ablation: Option<StageFamily>,
    out_dir: Option<&Path>,
) -> Result<Trained> {
    if ck.meta.merged {
        return Err(Error::Config("cannot resume training from a merged checkpoint".into()));
    }
    if ck.meta.model != cfg.model {
        return Err(Error::Config(
            "checkpoint model configuration differs from the run configuration".into(),
        ));
    }
    run_stages(ck.restore()?, Some(&ck.meta), corpus, stages, cfg, ablation, out_dir)
}

/// The stage list of the full pipeline minus one family. Skipping stage 3
/// keeps its data but trains only the projections.
pub fn ablated_stages(skip: StageFamily) -> Vec<StageId> {
    StageId::ALL
        .into_iter()
        .filter(|s| skip == StageFamily::S3 || s.family() != skip)
        .collect()
}

/// Full pipeline with one stage family removed.
pub fn ablate(corpus: &[SubVideo], skip: &[StageFamily], cfg: &RunConfig, out_dir: Option<&Path>) -> Result<Trained> {
    let skip = single_skip(skip)?.ok_or_else(|| Error::Config("ablation needs a stage to skip".into()))?;
    let model = DvLlama::new(cfg.model.clone())?;
    run_stages(model, None, corpus, &ablated_stages(skip), cfg, Some(skip), out_dir)
}

/// At most one ablation per run.
pub fn single_skip(skip: &[StageFamily]) -> Result<Option<StageFamily>> {
    match skip {
        [] => Ok(None),
        [one] => Ok(Some(*one)),
        _ => Err(Error::Config(format!(
            "only one stage may be skipped, got {}",
            skip.len()
        ))),
    }
}
