use super::vocab::{self, BOS};
use super::{Slide, SubVideo};

/// One branch-level instruction pair: modality input, text prompt, text target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionSample {
    pub input: Vec<usize>,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

/// Scrambled OCR blocks in, facts in reading order out. Single-block slides carry no signal.
pub fn make_reading_order_sample(slide: &Slide, index: usize) -> Option<InstructionSample> {
    (slide.facts.len() >= 2).then(|| InstructionSample {
        input: slide.tokens(index),
        prompt: vec![BOS, vocab::READ],
        target: slide.reading_order(),
    })
}

/// Decoder prompt for a question: `[BOS, q.., SEP]`.
pub fn qa_prompt(question: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(question.len() + 2);
    p.push(BOS);
    p.extend_from_slice(question);
    p.push(vocab::SEP);
    p
}

/// Narration of one slide in, the same narration out.
pub fn make_transcription_sample(sv: &SubVideo, slide_index: usize) -> Option<InstructionSample> {
    let t = sv.transcripts.get(slide_index)?;
    (!t.is_empty()).then(|| InstructionSample {
        input: t.clone(),
        prompt: vec![BOS, vocab::TRANSCRIBE],
        target: t.clone(),
    })
}
