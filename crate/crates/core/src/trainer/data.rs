//! Per-stage training items and the losses they feed.
//!
//! Frozen front ends are run once up front and their outputs cached: encoder
//! features for stage 1, Q-Former outputs for stages 2 and 3.

use crate::alignment::{contrastive_loss, pool, AlignConfig};
use crate::corpus::vocab::EOS;
use crate::corpus::{make_reading_order_sample, make_transcription_sample, qa_prompt, InstructionSample, SubVideo};
use crate::error::{Error, Result};
use crate::model::{assemble_context, Architecture, Modality, TextSegment};
use crate::numerics::{Element, Graph, ParamStore, Tensor, Var};

/// Encoder output for a token stream, `[n, d_enc]`.
pub fn encoder_features<T: Element>(
    arch: &Architecture,
    params: &ParamStore<T>,
    modality: Modality,
    tokens: &[usize],
) -> Result<Tensor<T>> {
    let mut g = Graph::inference(params);
    let f = arch.encode(&mut g, modality, tokens)?;
    Ok(g.value(f).clone())
}

/// Q-Former output before projection, `[n_query, d_enc]`.
pub fn qformer_features<T: Element>(
    arch: &Architecture,
    params: &ParamStore<T>,
    modality: Modality,
    tokens: &[usize],
) -> Result<Tensor<T>> {
    let mut g = Graph::inference(params);
    let f = arch.encode(&mut g, modality, tokens)?;
    let q = arch.qformer(&mut g, modality, f)?;
    Ok(g.value(q).clone())
}

/// Stage-1 objective: the branch's modality tokens alone as context, the
/// instruction target (plus EOS) as the supervised answer.
pub fn instruction_loss<T: Element>(
    arch: &Architecture,
    g: &mut Graph<'_, T>,
    modality: Modality,
    feats: Var,
    sample: &InstructionSample,
) -> Result<Var> {
    let m = arch.qformer_compress(g, modality, feats)?;
    let mut answer = sample.target.clone();
    answer.push(EOS);
    let seg = TextSegment::new(sample.prompt.clone(), answer);
    let (vis, aud) = match modality {
        Modality::Vision => (Some(m), None),
        Modality::Audio => (None, Some(m)),
    };
    let ctx = assemble_context(arch, g, vis, aud, &seg)?;
    arch.answer_loss(g, &ctx)
}

/// Pooled, projected embedding of a cached Q-Former output.
pub fn segment_embedding<T: Element>(
    arch: &Architecture,
    g: &mut Graph<'_, T>,
    modality: Modality,
    q: Var,
) -> Result<Var> {
    let p = arch.project(g, modality, q)?;
    pool(g, p)
}

/// Stage-2 objective over one batch of segments.
pub fn alignment_loss<T: Element>(
    arch: &Architecture,
    g: &mut Graph<'_, T>,
    visual: &[Var],
    audio: &[Var],
    segment_ids: &[u64],
    cfg: &AlignConfig,
) -> Result<Var> {
    let v = visual
        .iter()
        .map(|&q| segment_embedding(arch, g, Modality::Vision, q))
        .collect::<Result<Vec<_>>>()?;
    let a = audio
        .iter()
        .map(|&q| segment_embedding(arch, g, Modality::Audio, q))
        .collect::<Result<Vec<_>>>()?;
    contrastive_loss(g, &a, &v, segment_ids, cfg)
}

/// Stage-3 objective: answer cross-entropy given both projected streams.
pub fn fusion_loss<T: Element>(
    arch: &Architecture,
    g: &mut Graph<'_, T>,
    visual: Option<Var>,
    audio: Option<Var>,
    prompt: &[usize],
    answer: &[usize],
) -> Result<Var> {
    let vis = visual.map(|q| arch.project(g, Modality::Vision, q)).transpose()?;
    let aud = audio.map(|q| arch.project(g, Modality::Audio, q)).transpose()?;
    let mut ans = answer.to_vec();
    ans.push(EOS);
    let ctx = assemble_context(arch, g, vis, aud, &TextSegment::new(prompt.to_vec(), ans))?;
    arch.answer_loss(g, &ctx)
}

pub struct BranchItem<T> {
    pub feats: Tensor<T>,
    pub sample: InstructionSample,
}

/// One slide's visual/audio pair.
pub struct PairItem<T> {
    pub id: u64,
    pub visual: Tensor<T>,
    pub audio: Tensor<T>,
}

pub struct QaItem {
    pub video: usize,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Stage-3 items referencing per-video Q-Former outputs.
pub struct FusionData<T> {
    pub visual: Vec<Tensor<T>>,
    pub audio: Vec<Tensor<T>>,
    pub items: Vec<QaItem>,
}

pub enum StageData<T> {
    Branch {
        modality: Modality,
        items: Vec<BranchItem<T>>,
    },
    Align(Vec<PairItem<T>>),
    Fusion(FusionData<T>),
}

/// Segment id of slide `s` of a sub-video: unique across the corpus.
pub fn segment_id(video: u64, slide: usize) -> u64 {
    video * 4 + slide as u64
}

impl<T: Element> StageData<T> {
    pub fn branch(
        arch: &Architecture,
        params: &ParamStore<T>,
        modality: Modality,
        corpus: &[SubVideo],
    ) -> Result<Self> {
        let mut items = Vec::new();
        for sv in corpus {
            for s in 0..sv.slides.len() {
                let sample = match modality {
                    Modality::Vision => make_reading_order_sample(&sv.slides[s], s),
                    Modality::Audio => make_transcription_sample(sv, s),
                };
                if let Some(sample) = sample {
                    let feats = encoder_features(arch, params, modality, &sample.input)?;
                    items.push(BranchItem { feats, sample });
                }
            }
        }
        Ok(StageData::Branch { modality, items })
    }

    pub fn align(arch: &Architecture, params: &ParamStore<T>, corpus: &[SubVideo]) -> Result<Self> {
        Ok(StageData::Align(align_pairs(arch, params, corpus)?))
    }

    pub fn fusion(arch: &Architecture, params: &ParamStore<T>, corpus: &[SubVideo]) -> Result<Self> {
        let mut data = FusionData {
            visual: Vec::with_capacity(corpus.len()),
            audio: Vec::with_capacity(corpus.len()),
            items: Vec::new(),
        };
        for (i, sv) in corpus.iter().enumerate() {
            data.visual
                .push(qformer_features(arch, params, Modality::Vision, &sv.visual_tokens())?);
            data.audio
                .push(qformer_features(arch, params, Modality::Audio, &sv.audio_tokens())?);
            data.items.extend(sv.qa.iter().map(|qa| QaItem {
                video: i,
                prompt: qa_prompt(&qa.q),
                answer: qa.a.clone(),
            }));
        }
        Ok(StageData::Fusion(data))
    }

    pub fn len(&self) -> usize {
        match self {
            StageData::Branch { items, .. } => items.len(),
            StageData::Align(items) => items.len(),
            StageData::Fusion(d) => d.items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether one graph spans the whole batch (the contrastive loss couples items).
    pub fn batched(&self) -> bool {
        matches!(self, StageData::Align(_))
    }

    /// Loss of a single item.
    pub fn item_loss(&self, arch: &Architecture, g: &mut Graph<'_, T>, i: usize) -> Result<Var> {
        match self {
            StageData::Branch { modality, items } => {
                let it = &items[i];
                let f = g.input(it.feats.clone());
                instruction_loss(arch, g, *modality, f, &it.sample)
            }
            StageData::Fusion(d) => {
                let it = &d.items[i];
                let v = g.input(d.visual[it.video].clone());
                let a = g.input(d.audio[it.video].clone());
                fusion_loss(arch, g, Some(v), Some(a), &it.prompt, &it.answer)
            }
            StageData::Align(_) => Err(Error::Contract("contrastive items have no per-item loss".into())),
        }
    }

    /// Contrastive loss of a batch of pair indices.
    pub fn batch_loss(
        &self,
        arch: &Architecture,
        g: &mut Graph<'_, T>,
        idx: &[usize],
        cfg: &AlignConfig,
    ) -> Result<Var> {
        let StageData::Align(items) = self else {
            return Err(Error::Contract("batch_loss is for contrastive data".into()));
        };
        let vis: Vec<Var> = idx.iter().map(|&i| g.input(items[i].visual.clone())).collect();
        let aud: Vec<Var> = idx.iter().map(|&i| g.input(items[i].audio.clone())).collect();
        let ids: Vec<u64> = idx.iter().map(|&i| items[i].id).collect();
        alignment_loss(arch, g, &vis, &aud, &ids, cfg)
    }
}

/// Every slide of `corpus` as a (visual, audio) Q-Former output pair.
pub fn align_pairs<T: Element>(
    arch: &Architecture,
    params: &ParamStore<T>,
    corpus: &[SubVideo],
) -> Result<Vec<PairItem<T>>> {
    let mut out = Vec::new();
    for sv in corpus {
        for (s, slide) in sv.slides.iter().enumerate() {
            out.push(PairItem {
                id: segment_id(sv.id, s),
                visual: qformer_features(arch, params, Modality::Vision, &slide.tokens(s))?,
                audio: qformer_features(arch, params, Modality::Audio, &sv.transcripts[s])?,
            });
        }
    }
    Ok(out)
}

/// Pooled projected embeddings `(audio, visual)` of every pair, for retrieval.
pub fn pair_embeddings<T: Element>(
    arch: &Architecture,
    params: &ParamStore<T>,
    pairs: &[PairItem<T>],
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut audio = Vec::with_capacity(pairs.len());
    let mut visual = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut g = Graph::inference(params);
        let v = g.input(p.visual.clone());
        let v = segment_embedding(arch, &mut g, Modality::Vision, v)?;
        let a = g.input(p.audio.clone());
        let a = segment_embedding(arch, &mut g, Modality::Audio, a)?;
        audio.push(g.value(a).clone());
        visual.push(g.value(v).clone());
    }
    Ok((audio, visual))
}
