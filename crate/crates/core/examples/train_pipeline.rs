//! Run the four training stages on the train split and print what each
//! stage trained, froze and achieved.
//!
//! cargo run --release --example train_pipeline -- [key=value ...]
//! e.g. `corpus.n_subvideos=300` for a quick run.

use dvllama::corpus::{gen_corpus, split};
use dvllama::trainer::{train_pipeline, RunConfig, StageId};

fn main() -> dvllama::Result<()> {
    // the tuned stage schedule; key=value arguments override it
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.cfg");
    let mut cfg = RunConfig::from_file(&path)?;
    for kv in std::env::args().skip(1) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| dvllama::Error::Config(format!("expected key=value, got {kv}")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let corpus = gen_corpus(&cfg.corpus)?;
    let parts = split(&corpus, [0.8, 0.1, 0.1], cfg.corpus.seed)?;
    let dir = std::env::temp_dir().join("dvllama-pipeline");

    let start = std::time::Instant::now();
    let trained = train_pipeline(&parts.train, &StageId::ALL, &cfg, Some(&dir))?;
    for rec in &trained.checkpoint.meta.history {
        println!(
            "{:<10} {:>5} items {:>6} steps  loss {:.4} -> {:.4}  trainable {:>3} (changed {:>3})  frozen verified {:>3}",
            rec.stage.tag(),
            rec.items,
            rec.steps,
            rec.initial_loss,
            rec.final_loss,
            rec.trainable,
            rec.trainable_changed,
            rec.frozen_verified
        );
    }
    println!("lineage {:?}", trained.checkpoint.meta.lineage);
    println!("checkpoints in {} ({:.1?})", dir.display(), start.elapsed());
    Ok(())
}
