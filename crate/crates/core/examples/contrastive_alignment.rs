//! The audio-to-visual contrastive objective: closed-form cases, then a short
//! projection-only alignment run on a small corpus with retrieval before and after.

use dvllama::alignment::{batched_retrieval, contrastive_loss, AlignConfig};
use dvllama::corpus::{gen_corpus, split, CorpusConfig};
use dvllama::model::{DvLlama, ModelConfig};
use dvllama::numerics::{Graph, ParamStore, Tensor};
use dvllama::trainer::data::{align_pairs, pair_embeddings};
use dvllama::trainer::{run_stage, RunConfig, StageId, StageSpec};

fn closed_form(audio: &[[f64; 2]], visual: &[[f64; 2]], tau: f64) -> dvllama::Result<f64> {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let a: Vec<_> = audio.iter().map(|r| g.input(Tensor::vector(r))).collect();
    let v: Vec<_> = visual.iter().map(|r| g.input(Tensor::vector(r))).collect();
    let ids: Vec<u64> = (0..audio.len() as u64).collect();
    let cfg = AlignConfig {
        tau,
        ..AlignConfig::default()
    };
    let l = contrastive_loss(&mut g, &a, &v, &ids, &cfg)?;
    Ok(g.value(l).item())
}

fn main() -> dvllama::Result<()> {
    println!(
        "B=1:                 {}",
        closed_form(&[[0.3, 0.4]], &[[1.0, 0.0]], 0.07)?
    );
    let same = [[1.0, 2.0]; 4];
    println!(
        "B=4 identical:       {:.6} (ln 4 = {:.6})",
        closed_form(&same, &same, 1.0)?,
        4f64.ln()
    );
    let e = [[1.0, 0.0], [0.0, 1.0]];
    println!("B=2 orthogonal pair: {:.6}", closed_form(&e, &e, 1.0)?);

    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusConfig {
        n_subvideos: 400,
        ..CorpusConfig::default()
    };
    cfg.train.s2.epochs = Some(20);
    cfg.train.s2.lr = Some(3e-3);
    let corpus = gen_corpus(&cfg.corpus)?;
    let parts = split(&corpus, [0.8, 0.1, 0.1], 0)?;
    let mut model = DvLlama::<f32>::new(ModelConfig::default())?;

    let retrieval = |m: &DvLlama<f32>| -> dvllama::Result<f64> {
        let pairs = align_pairs(&m.arch, &m.params, &parts.test)?;
        let (a, v) = pair_embeddings(&m.arch, &m.params, &pairs)?;
        batched_retrieval(&a, &v, 32)
    };
    println!(
        "\nheld-out a->v top-1 at B=32 before alignment: {:.3}",
        retrieval(&model)?
    );
    let spec = StageSpec::canonical(StageId::S2Align, &cfg);
    let rec = run_stage(&mut model, &parts.train, &spec, &cfg.align, &cfg.lora)?;
    println!(
        "contrastive loss {:.3} -> {:.3} over {} steps",
        rec.initial_loss, rec.final_loss, rec.steps
    );
    println!(
        "held-out a->v top-1 at B=32 after alignment:  {:.3}",
        retrieval(&model)?
    );
    Ok(())
}
