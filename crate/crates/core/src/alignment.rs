//! Audio-visual contrastive alignment over pooled branch embeddings.

use std::collections::HashSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax_lowest;
use crate::numerics::{kernels, Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Audio anchors, visual candidates: the one-directional form.
    A2v,
    Symmetric,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2v" => Ok(Direction::A2v),
            "symmetric" => Ok(Direction::Symmetric),
            _ => Err(Error::Config(format!(
                "unknown align.direction {s:?} (expected a2v or symmetric)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub tau: f64,
    pub direction: Direction,
    /// Use the raw cosine (clamped to 1e-6) as the similarity instead of
    /// `exp(cos / tau)`. Kept for comparison only.
    pub strict_paper_f: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            direction: Direction::A2v,
            strict_paper_f: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("align.tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

const STRICT_FLOOR: f64 = 1e-6;

/// Mean over rows, then unit L2 norm.
pub fn pool<T: Element>(g: &mut Graph<'_, T>, feats: Var) -> Result<Var> {
    let m = g.mean_rows(feats)?;
    g.l2_normalize_rows(m)
}

/// `exp(cosine(e_a, e_v) / tau)`.
pub fn similarity_f<T: Element>(g: &mut Graph<'_, T>, e_a: Var, e_v: Var, tau: f64) -> Result<Var> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let c = g.cosine(e_a, e_v)?;
    let s = g.scale(c, 1.0 / tau)?;
    g.exp(s)
}

/// In-batch contrastive loss. Row `i` of `audio` and `visual` form the positive
/// pair; every other row of the opposite modality is a negative.
///
/// `a2v` is `-(1/B) Σ_i log(f_ii / Σ_k f_ik)`; `symmetric` averages it with the
/// transposed form.
pub fn contrastive_loss<T: Element>(
    g: &mut Graph<'_, T>,
    audio: &[Var],
    visual: &[Var],
    segment_ids: &[u64],
    cfg: &AlignConfig,
) -> Result<Var> {
    cfg.validate()?;
    let b = audio.len();
    if b == 0 {
        return Err(Error::Degenerate("contrastive batch is empty".into()));
    }
    if visual.len() != b || segment_ids.len() != b {
        return Err(Error::Contract(format!(
            "batch has {b} audio, {} visual embeddings and {} segment ids",
            visual.len(),
            segment_ids.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = segment_ids.iter().find(|id| !seen.insert(**id)) {
        return Err(Error::Contract(format!("segment {dup} appears twice in one batch")));
    }
    let a = g.concat_rows(audio)?;
    let v = g.concat_rows(visual)?;
    let a = g.l2_normalize_rows(a)?;
    let v = g.l2_normalize_rows(v)?;
    let cos = g.matmul_nt(a, v)?;
    let logits = |g: &mut Graph<'_, T>, s: Var| -> Result<Var> {
        if cfg.strict_paper_f {
            let f = g.clamp_min(s, STRICT_FLOOR)?;
            g.log(f)
        } else {
            g.scale(s, 1.0 / cfg.tau)
        }
    };
    let targets: Vec<i64> = (0..b as i64).collect();
    let fwd = logits(g, cos)?;
    let a2v = g.cross_entropy_mean(fwd, &targets, -1)?;
    match cfg.direction {
        Direction::A2v => Ok(a2v),
        Direction::Symmetric => {
            let ct = g.transpose(cos)?;
            let bwd = logits(g, ct)?;
            let v2a = g.cross_entropy_mean(bwd, &targets, -1)?;
            let s = g.add(a2v, v2a)?;
            g.scale(s, 0.5)
        }
    }
}

/// Fraction of audio embeddings whose most similar visual embedding (by
/// cosine, ties to the lowest index) is their own pair.
pub fn retrieval_top1<T: Element>(audio: &[Tensor<T>], visual: &[Tensor<T>]) -> Result<f64> {
    if audio.is_empty() || audio.len() != visual.len() {
        return Err(Error::Contract(
            "retrieval needs equally many audio and visual embeddings".into(),
        ));
    }
    let unit = |t: &Tensor<T>| -> Result<Vec<f64>> {
        let d = t.to_f64_vec();
        let n = kernels::dot(&d, &d).sqrt();
        if n < 1e-12 {
            return Err(Error::Degenerate("zero-norm embedding".into()));
        }
        Ok(d.iter().map(|x| x / n).collect())
    };
    let vs = visual.iter().map(unit).collect::<Result<Vec<_>>>()?;
    let mut hits = 0;
    for (i, a) in audio.iter().enumerate() {
        let a = unit(a)?;
        let sims: Vec<f64> = vs.iter().map(|v| kernels::dot(&a, v)).collect();
        if argmax_lowest(&sims) == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / audio.len() as f64)
}

/// Mean [`retrieval_top1`] over consecutive batches of `batch` pairs; a short
/// trailing batch is dropped unless it is the only one.
pub fn batched_retrieval<T: Element>(audio: &[Tensor<T>], visual: &[Tensor<T>], batch: usize) -> Result<f64> {
    if batch == 0 {
        return Err(Error::Config("retrieval batch must be >= 1".into()));
    }
    let n = audio.len().min(visual.len());
    let full = n / batch;
    if full == 0 {
        return retrieval_top1(audio, visual);
    }
    let mut total = 0.0;
    for b in 0..full {
        let r = b * batch..(b + 1) * batch;
        total += retrieval_top1(&audio[r.clone()], &visual[r])?;
    }
    Ok(total / full as f64)
}
