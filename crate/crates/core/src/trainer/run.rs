use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::data::StageData;
use super::stage::{StageId, StageSpec};
use crate::alignment::AlignConfig;
use crate::corpus::SubVideo;
use crate::error::{Error, Result};
use crate::lora::{attach_targets, LoraConfig};
use crate::model::DvLlama;
use crate::numerics::{Element, Graph};
use crate::util::mix_seed;

/// Items whose loss is measured before and after a stage.
const PROBE_ITEMS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageId,
    pub items: usize,
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Frozen parameters whose digest was confirmed unchanged.
    pub frozen_verified: usize,
    pub trainable: usize,
    /// Trainable parameters whose value moved.
    pub trainable_changed: usize,
}

fn probe_loss<T: Element>(model: &DvLlama<T>, data: &StageData<T>, batch: usize, align: &AlignConfig) -> Result<f64> {
    let n = data.len().min(PROBE_ITEMS);
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    if data.batched() {
        for chunk in idx.chunks(batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::inference(&model.params);
            let l = data.batch_loss(&model.arch, &mut g, chunk, align)?;
            total += g.scalar(l).f64();
            count += 1;
        }
    } else {
        for &i in &idx {
            let mut g = Graph::inference(&model.params);
            let l = data.item_loss(&model.arch, &mut g, i)?;
            total += g.scalar(l).f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("stage has no usable probe items".into()));
    }
    Ok(total / count as f64)
}

/// One optimisation step over `batch`; returns the mean batch loss.
fn train_step<T: Element>(
    model: &mut DvLlama<T>,
    data: &StageData<T>,
    batch: &[usize],
    align: &AlignConfig,
    adam: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<f64> {
    model.params.zero_grads();
    let loss = if data.batched() {
        let mut g = Graph::new(&model.params);
        let l = data.batch_loss(&model.arch, &mut g, batch, align)?;
        let v = g.scalar(l).f64();
        let grads = g.backward(l)?;
        model.params.accumulate(&grads, T::one());
        v
    } else {
        let scale = T::of(1.0 / batch.len() as f64);
        let mut sum = 0.0;
        for &i in batch {
            let mut g = Graph::new(&model.params);
            let l = data.item_loss(&model.arch, &mut g, i)?;
            sum += g.scalar(l).f64();
            let grads = g.backward(l)?;
            model.params.accumulate(&grads, scale);
        }
        sum / batch.len() as f64
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "training loss",
        });
    }
    adam_step(&mut model.params, adam, cfg)?;
    Ok(loss)
}

/// Builds the cached dataset a stage trains on.
pub fn stage_data<T: Element>(model: &DvLlama<T>, corpus: &[SubVideo], spec: &StageSpec) -> Result<StageData<T>> {
    let (arch, params) = (&model.arch, &model.params);
    let data = match spec.stage {
        StageId::S1Vision | StageId::S1Audio => {
            StageData::branch(arch, params, spec.modality().expect("stage 1 has a modality"), corpus)?
        }
        StageId::S2Align => StageData::align(arch, params, corpus)?,
        StageId::S3Fusion => StageData::fusion(arch, params, corpus)?,
    };
    if data.is_empty() {
        return Err(Error::Degenerate(format!(
            "{}: corpus yields no training items",
            spec.stage
        )));
    }
    Ok(data)
}

/// Trains the parameters selected by `spec` in place and verifies that
/// every other parameter is bit-for-bit untouched.
///
/// A stage-3 spec with `lora` attaches adapters first if the model has none.
pub fn run_stage<T: Element>(
    model: &mut DvLlama<T>,
    corpus: &[SubVideo],
    spec: &StageSpec,
    align: &AlignConfig,
    lora: &LoraConfig,
) -> Result<StageRecord> {
    if spec.lora && model.arch.lora.is_none() {
        attach_targets(model, *lora)?;
    }
    let mask = spec.resolve(&model.params)?;
    model.params.restore_trainable_flags(&mask);
    let adam_cfg = AdamConfig::new(spec.lr)?;

    let before: BTreeMap<String, String> = model.params.digests();
    let data = stage_data(model, corpus, spec)?;
    let initial_loss = probe_loss(model, &data, spec.batch_size, align)?;
    info!("{}: {} items, initial loss {initial_loss:.4}", spec.stage, data.len());

    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    let mut steps = 0u64;
    for epoch in 0..spec.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in order.chunks(spec.batch_size) {
            if data.batched() && batch.len() < 2 {
                continue;
            }
            let l = train_step(model, &data, batch, align, &mut adam, &adam_cfg)?;
            steps += 1;
            sum += l;
            n += 1;
            debug!("{} step {steps}: {l:.4}", spec.stage);
        }
        let mean = if n == 0 { f64::NAN } else { sum / n as f64 };
        info!("{} epoch {}: mean loss {mean:.4}", spec.stage, epoch + 1);
        epoch_losses.push(mean);
    }
    let final_loss = probe_loss(model, &data, spec.batch_size, align)?;
    info!("{}: final loss {final_loss:.4}", spec.stage);

    let after = model.params.digests();
    let mut frozen_verified = 0;
    let mut trainable_changed = 0;
    for (_, p) in model.params.iter() {
        let (old, new) = (&before[&p.name], &after[&p.name]);
        if p.trainable {
            trainable_changed += usize::from(new != old);
        } else if new != old {
            let name = &p.name;
            return Err(Error::Contract(format!(
                "{}: frozen parameter {name} changed",
                spec.stage
            )));
        } else {
            frozen_verified += 1;
        }
    }
    Ok(StageRecord {
        stage: spec.stage,
        items: data.len(),
        steps,
        epoch_losses,
        initial_loss,
        final_loss,
        frozen_verified,
        trainable: mask.iter().filter(|&&t| t).count(),
        trainable_changed,
    })
}
