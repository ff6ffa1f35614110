use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Repeatedly appends the argmax of `next_logits(text)` until `eos` or `max_new` tokens.
///
/// `next_logits` receives the prompt plus everything generated so far and
/// returns next-token logits. The returned answer excludes `eos`.
pub fn greedy_decode<T, F>(prompt: &[usize], max_new: usize, eos: usize, mut next_logits: F) -> Result<Vec<usize>>
where
    T: Element,
    F: FnMut(&[usize]) -> Result<Tensor<T>>,
{
    if max_new == 0 {
        return Err(Error::Config("max_new must be >= 1".into()));
    }
    let mut text = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = next_logits(&text)?;
        let next = argmax_lowest(logits.data());
        if next == eos {
            break;
        }
        out.push(next);
        text.push(next);
    }
    Ok(out)
}
