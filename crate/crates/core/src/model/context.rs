use super::Architecture;
use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Var};

/// Target value for positions excluded from the loss.
pub const IGNORE: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Visual,
    Audio,
    Prompt,
    Answer,
}

/// Text part of a decoder input: a prompt followed by the supervised answer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextSegment {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl TextSegment {
    pub fn new(prompt: Vec<usize>, answer: Vec<usize>) -> Self {
        Self { prompt, answer }
    }

    pub fn prompt_only(prompt: Vec<usize>) -> Self {
        Self {
            prompt,
            answer: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.prompt.iter().chain(&self.answer).copied().collect()
    }
}

/// Decoder input rows with per-position segment markers and next-token targets.
#[derive(Clone, Debug)]
pub struct Context {
    pub inputs: Var,
    pub kinds: Vec<SegmentKind>,
    /// `targets[t]` is the token expected at `t + 1`, or [`IGNORE`].
    pub targets: Vec<i64>,
    pub text_offset: usize,
}

impl Context {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Positions holding answer tokens: the only ones whose prediction is scored.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.kinds.iter().map(|k| *k == SegmentKind::Answer).collect()
    }

    /// Half-open row range with a non-ignored target, if any.
    pub fn loss_rows(&self) -> Option<(usize, usize)> {
        let start = self.targets.iter().position(|&t| t != IGNORE)?;
        let end = self.targets.iter().rposition(|&t| t != IGNORE)? + 1;
        Some((start, end))
    }
}

/// Concatenates `[visual | audio | text embeddings]` in that fixed order.
pub fn assemble_context<T: Element>(
    arch: &Architecture,
    g: &mut Graph<'_, T>,
    visual: Option<Var>,
    audio: Option<Var>,
    text: &TextSegment,
) -> Result<Context> {
    if visual.is_none() && audio.is_none() && text.is_empty() {
        return Err(Error::Contract("context needs at least one segment".into()));
    }
    let mut parts = Vec::new();
    let mut kinds = Vec::new();
    for (seg, kind) in [(visual, SegmentKind::Visual), (audio, SegmentKind::Audio)] {
        if let Some(v) = seg {
            kinds.extend(std::iter::repeat_n(kind, g.value(v).rows()));
            parts.push(v);
        }
    }
    let text_offset = kinds.len();
    if !text.is_empty() {
        parts.push(arch.embed_text(g, &text.tokens())?);
        kinds.extend(std::iter::repeat_n(SegmentKind::Prompt, text.prompt.len()));
        kinds.extend(std::iter::repeat_n(SegmentKind::Answer, text.answer.len()));
    }
    let len = kinds.len();
    if len > arch.config.max_seq {
        return Err(Error::Length {
            len,
            max: arch.config.max_seq,
        });
    }
    let inputs = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };
    let answer_start = text_offset + text.prompt.len();
    let mut targets = vec![IGNORE; len];
    for (i, &tok) in text.answer.iter().enumerate() {
        let pos = answer_start + i;
        if pos > 0 {
            targets[pos - 1] = tok as i64;
        }
    }
    Ok(Context {
        inputs,
        kinds,
        targets,
        text_offset,
    })
}
