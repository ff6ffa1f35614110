use super::*;
use crate::corpus::{gen_corpus, CorpusConfig, SubVideo};
use crate::model::{DvLlama, ModelConfig};
use crate::Error;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig {
            vocab_size: 96,
            d_enc: 16,
            d_llm: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_query: 4,
            max_seq: 64,
            seed: 3,
        },
        corpus: CorpusConfig {
            n_subvideos: 24,
            n_domains: 3,
            n_fillers: 4,
            n_keys: 12,
            n_slide_values: 12,
            n_audio_values: 4,
            keys_per_domain: 10,
            values_per_domain: 9,
            audio_values_per_domain: 2,
            vocab_size: 96,
            ..CorpusConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.lr = 3e-3;
    cfg
}

fn corpus(cfg: &RunConfig) -> Vec<SubVideo> {
    gen_corpus(&cfg.corpus).unwrap()
}

#[test]
fn every_stage_respects_its_freeze_set_and_learns() {
    let cfg = small_config();
    let data = corpus(&cfg);
    let mut model = DvLlama::<f32>::new(cfg.model.clone()).unwrap();
    for stage in StageId::ALL {
        let spec = StageSpec::canonical(stage, &cfg);
        let before = model.params.digests();
        let rec = run_stage(&mut model, &data, &spec, &cfg.align, &cfg.lora).unwrap();
        let after = model.params.digests();
        let mask = spec.resolve(&model.params).unwrap();
        for ((_, p), trainable) in model.params.iter().zip(mask) {
            if !trainable {
                // adapters are new in stage 3 and absent from `before`
                assert_eq!(before.get(&p.name), Some(&after[&p.name]), "{stage}: {}", p.name);
            }
        }
        assert_eq!(rec.trainable_changed, rec.trainable, "{stage}");
        assert!(rec.final_loss < rec.initial_loss, "{stage}: {rec:?}");
    }
    // base decoder weights never move; adapters do
    let fresh = DvLlama::<f32>::new(cfg.model.clone()).unwrap().params.digests();
    let now = model.params.digests();
    for (name, d) in &fresh {
        if name.starts_with("llm.") {
            assert_eq!(&now[name], d, "{name}");
        }
    }
    assert!(now.keys().any(|n| n.ends_with(".lora.B")));
}

#[test]
fn pipeline_lineage_determinism_and_resume() {
    let mut cfg = small_config();
    cfg.train.epochs = 1;
    let data = corpus(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let a = train_pipeline(&data, &StageId::ALL, &cfg, Some(dir.path())).unwrap();
    assert_eq!(a.checkpoint.meta.stage, StageId::S3Fusion);
    assert_eq!(a.checkpoint.meta.lineage, StageId::ALL.to_vec());
    let b = train_pipeline(&data, &StageId::ALL, &cfg, None).unwrap();
    assert_eq!(a.checkpoint.file.to_bytes(), b.checkpoint.file.to_bytes());
    assert_eq!(a.checkpoint.meta_json().unwrap(), b.checkpoint.meta_json().unwrap());

    // resuming at the S2 boundary reproduces the one-shot run bit for bit
    let s2 = Checkpoint::load(&dir.path().join("S2_ALIGN.ckpt")).unwrap();
    let c = resume(&s2, &data, &[StageId::S3Fusion], &cfg, None, None).unwrap();
    assert_eq!(c.checkpoint, a.checkpoint);

    let saved = Checkpoint::load(&dir.path().join("S3_FUSION.ckpt")).unwrap();
    assert_eq!(saved, a.checkpoint);
    let restored = saved.restore().unwrap();
    assert_eq!(restored.params.digests(), a.model.params.digests());
    assert!(matches!(
        resume(&saved, &data, &[StageId::S2Align], &cfg, None, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn ablation_lineages() {
    let mut cfg = small_config();
    cfg.train.epochs = 1;
    let data = corpus(&cfg);
    let s2 = ablate(&data, &[StageFamily::S2], &cfg, None).unwrap();
    assert_eq!(
        s2.checkpoint.meta.lineage,
        vec![StageId::S1Vision, StageId::S1Audio, StageId::S3Fusion]
    );
    assert_eq!(s2.checkpoint.meta.ablation, Some(StageFamily::S2));
    let s3 = ablate(&data, &[StageFamily::S3], &cfg, None).unwrap();
    assert!(s3.model.arch.lora.is_none());
    let fresh = DvLlama::<f32>::new(cfg.model.clone()).unwrap().params.digests();
    let now = s3.model.params.digests();
    assert!(fresh
        .iter()
        .filter(|(n, _)| n.starts_with("llm."))
        .all(|(n, d)| &now[n] == d));

    // skipping S1 sends initial Q-Formers into S2
    let s1 = ablate(&data, &[StageFamily::S1], &cfg, None).unwrap();
    let now = s1.model.params.digests();
    assert!(fresh
        .iter()
        .filter(|(n, _)| n.contains(".qformer."))
        .all(|(n, d)| &now[n] == d));

    assert!(matches!(
        ablate(&data, &[StageFamily::S2, StageFamily::S3], &cfg, None),
        Err(Error::Config(_))
    ));
    assert!(matches!(train_pipeline(&data, &[], &cfg, None), Err(Error::Config(_))));
    assert!(matches!(
        train_pipeline(&data, &[StageId::S2Align, StageId::S1Vision], &cfg, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn merged_checkpoint_drops_adapters() {
    let mut cfg = small_config();
    cfg.train.epochs = 1;
    let data = corpus(&cfg);
    let t = train_pipeline(&data, &StageId::ALL, &cfg, None).unwrap();
    let m = t.checkpoint.merged().unwrap();
    assert!(m.meta.merged && m.meta.lora.is_none());
    let model = m.restore().unwrap();
    assert!(model.params.iter().all(|(_, p)| !p.name.contains(".lora.")));
    assert!(matches!(
        resume(&m, &data, &[StageId::S3Fusion], &cfg, None, None),
        Err(Error::Config(_))
    ));
}
