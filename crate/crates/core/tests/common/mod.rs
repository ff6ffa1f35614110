//! Answerability resolvers shared by the integration tests. Each one reads a
//! single modality's token stream and knows nothing about the generator.

use dvllama::corpus::vocab::{self, AUD};

/// Answers a question from a single token stream, or gives up.
pub fn resolve_visual(visual: &[usize], q: &[usize]) -> Option<usize> {
    let [qt, key, slide] = q else { return None };
    if *qt != vocab::Q_VALUE {
        return None;
    }
    let want = vocab::slide_of_token(*slide)?;
    let mut current = None;
    let mut i = 0;
    while i < visual.len() {
        if let Some(s) = vocab::slide_of_token(visual[i]) {
            current = Some(s);
            i += 1;
            continue;
        }
        if vocab::pos_of_token(visual[i]).is_some() && i + 2 < visual.len() {
            if current == Some(want) && visual[i + 1] == *key {
                return Some(visual[i + 2]);
            }
            i += 3;
            continue;
        }
        i += 1;
    }
    None
}

pub fn resolve_audio(audio: &[usize], q: &[usize]) -> Option<usize> {
    let [qt, key] = q else { return None };
    if *qt != vocab::Q_AUDIO {
        return None;
    }
    audio.windows(3).find(|w| w[0] == AUD && w[1] == *key).map(|w| w[2])
}
