//! Score a checkpoint on the test split under each modality mask, next to
//! the untrained model.
//!
//! cargo run --release --example evaluate_checkpoint -- CKPT [key=value ...]
//! (CKPT defaults to the stage-3 checkpoint written by `train_pipeline`).

use std::path::PathBuf;

use dvllama::corpus::{gen_corpus, split};
use dvllama::eval::{evaluate_model, render_table, EvalReport, ModalityMask};
use dvllama::model::DvLlama;
use dvllama::trainer::{Checkpoint, RunConfig};

fn main() -> dvllama::Result<()> {
    let mut args = std::env::args().skip(1).peekable();
    let ckpt = match args.peek() {
        Some(a) if !a.contains('=') => PathBuf::from(args.next().unwrap_or_default()),
        _ => std::env::temp_dir().join("dvllama-pipeline").join("S3_FUSION.ckpt"),
    };
    let mut cfg = RunConfig::default();
    for kv in args {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| dvllama::Error::Config(format!("expected key=value, got {kv}")))?;
        cfg.set(k, v)?;
    }
    let corpus = gen_corpus(&cfg.corpus)?;
    let test = split(&corpus, [0.8, 0.1, 0.1], cfg.corpus.seed)?.test;

    let ck = Checkpoint::load(&ckpt)?;
    println!("{}: lineage {:?}", ckpt.display(), ck.meta.lineage);
    let model = ck.restore()?;
    let untrained = DvLlama::<f32>::new(ck.meta.model.clone())?;
    let (t, max_new) = (cfg.eval.threshold, cfg.eval.max_new);

    let mut rows: Vec<(String, EvalReport)> = vec![(
        "untrained".into(),
        evaluate_model(&untrained, &test, ModalityMask::Both, t, max_new)?,
    )];
    for mask in [ModalityMask::Both, ModalityMask::VisualOnly, ModalityMask::AudioOnly] {
        rows.push((
            format!("model/{mask}"),
            evaluate_model(&model, &test, mask, t, max_new)?,
        ));
    }
    let refs: Vec<(&str, &EvalReport)> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    println!("{}", render_table(&refs));
    for (name, r) in &rows {
        println!("{name:<18} by answerability {:?}", r.per_answerability);
    }
    Ok(())
}
