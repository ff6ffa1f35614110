//! Generate the default synthetic corpus, print a summary and one sample,
//! and write train/val/test manifests.
//!
//! cargo run --release --example generate_corpus -- [OUT_DIR]

use std::collections::BTreeMap;
use std::path::PathBuf;

use dvllama::corpus::{gen_corpus, split, write_manifest, CorpusConfig};

fn main() -> dvllama::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dvllama-corpus"));
    std::fs::create_dir_all(&out)?;

    let cfg = CorpusConfig::default();
    let corpus = gen_corpus(&cfg)?;
    let mut slides = BTreeMap::new();
    let mut kinds = BTreeMap::new();
    for sv in &corpus {
        *slides.entry(sv.slides.len()).or_insert(0usize) += 1;
        for qa in &sv.qa {
            *kinds
                .entry((qa.category.name(), qa.answerability.name()))
                .or_insert(0usize) += 1;
        }
    }
    let secs: f64 = corpus.iter().map(|s| s.duration()).sum();
    println!(
        "{} sub-videos, mean duration {:.1}s",
        corpus.len(),
        secs / corpus.len() as f64
    );
    println!("slides per sub-video: {slides:?}");
    for ((cat, ans), n) in &kinds {
        println!("  {cat:<22} {ans:<12} {n}");
    }

    let sv = &corpus[0];
    println!("\nsub-video 0 ({}):", sv.domain);
    println!("  visual stream {:?}", sv.visual_tokens());
    println!("  audio stream  {:?}", sv.audio_tokens());
    for qa in &sv.qa {
        println!("  Q {:?} -> A {:?} [{}]", qa.q, qa.a, qa.answerability.name());
    }

    let parts = split(&corpus, [0.8, 0.1, 0.1], cfg.seed)?;
    for (name, items) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        let path = out.join(format!("{name}.jsonl"));
        write_manifest(&path, items)?;
        println!("wrote {} ({} sub-videos)", path.display(), items.len());
    }
    Ok(())
}
