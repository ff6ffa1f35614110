//! Full pipeline against the three single-stage ablations and the untrained
//! model, as a per-domain accuracy table.
//!
//! Stage checkpoints are shared: "- S2" resumes after stage 1, "- S3" resumes
//! after stage 2 with a projection-only stage 3, and "- S1" starts from scratch.
//!
//! cargo run --release --example ablation_table -- [key=value ...]

use dvllama::corpus::{gen_corpus, split};
use dvllama::eval::{evaluate_model, render_table, EvalReport, ModalityMask};
use dvllama::model::DvLlama;
use dvllama::trainer::{
    ablated_stages, resume, run_stages, train_pipeline, Checkpoint, RunConfig, StageFamily, StageId,
};

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
    let dir = std::env::temp_dir().join("dvllama-ablation");
    let start = std::time::Instant::now();

    let full = train_pipeline(&parts.train, &StageId::ALL, &cfg, Some(&dir))?;
    let after_s1 = Checkpoint::load(&dir.join("S1_AUDIO.ckpt"))?;
    let after_s2 = Checkpoint::load(&dir.join("S2_ALIGN.ckpt"))?;
    let no_s2 = resume(
        &after_s1,
        &parts.train,
        &[StageId::S3Fusion],
        &cfg,
        Some(StageFamily::S2),
        None,
    )?;
    let no_s3 = resume(
        &after_s2,
        &parts.train,
        &[StageId::S3Fusion],
        &cfg,
        Some(StageFamily::S3),
        None,
    )?;
    let fresh = DvLlama::new(cfg.model.clone())?;
    let no_s1 = run_stages(
        fresh,
        None,
        &parts.train,
        &ablated_stages(StageFamily::S1),
        &cfg,
        Some(StageFamily::S1),
        None,
    )?;
    let untrained = DvLlama::<f32>::new(cfg.model.clone())?;

    let score =
        |m: &DvLlama<f32>| evaluate_model(m, &parts.test, ModalityMask::Both, cfg.eval.threshold, cfg.eval.max_new);
    let rows: Vec<(&str, EvalReport)> = vec![
        ("untrained", score(&untrained)?),
        ("- S1", score(&no_s1.model)?),
        ("- S2", score(&no_s2.model)?),
        ("- S3", score(&no_s3.model)?),
        ("full", score(&full.model)?),
    ];
    let refs: Vec<(&str, &EvalReport)> = rows.iter().map(|(n, r)| (*n, r)).collect();
    println!("{}", render_table(&refs));
    println!("({:.1?})", start.elapsed());
    Ok(())
}
