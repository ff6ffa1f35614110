//! The thresholded similarity metric on hand-made predictions.

use dvllama::corpus::{Answerability, Category};
use dvllama::eval::{accuracy_at, semantic_score, EvalItem, MetricTable};

fn main() -> dvllama::Result<()> {
    let table = MetricTable::new(64);
    let reference = vec![20, 21, 22];
    for pred in [
        vec![20, 21, 22],
        vec![20, 21],
        vec![20],
        vec![22, 21, 20, 20],
        vec![40, 41],
        vec![],
    ] {
        println!(
            "{pred:?} vs {reference:?}: {:.4}",
            semantic_score(&pred, &reference, &table)?
        );
    }

    let items: Vec<EvalItem> = (0..8)
        .map(|i| EvalItem {
            question: vec![1],
            reference: vec![30, 31],
            prediction: if i < 3 {
                vec![30, 31]
            } else if i < 6 {
                vec![30]
            } else {
                vec![50]
            },
            category: Category::ALL[i % 3],
            domain: format!("domain_{:02}", i % 2),
            answerability: Answerability::VisualOnly,
        })
        .collect();
    for t in [0.5, 0.6, 0.7, 0.8, 0.9] {
        println!("Accuracy@{t}: {:.3}", accuracy_at(&items, t, &table)?.overall);
    }
    Ok(())
}
