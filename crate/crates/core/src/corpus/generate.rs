use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{self, Vocab};
use super::{domain_label, Answerability, Category, CorpusConfig, QAPair, Slide, SubVideo};
use crate::error::Result;
use crate::util::mix_seed;

/// Mean seconds of narration per slide.
const SLIDE_SECONDS: f64 = 17.5;
const FILLER_PROB: f64 = 0.3;

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Vec<SubVideo>> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    Ok((0..cfg.n_subvideos as u64).map(|id| build(cfg, &vocab, id)).collect())
}

/// Sub-video `id` alone; equal to its record in [`gen_corpus`].
pub fn gen_subvideo(cfg: &CorpusConfig, id: u64) -> Result<SubVideo> {
    cfg.validate()?;
    Ok(build(cfg, &cfg.vocab()?, id))
}

/// `len` consecutive indices of a pool of `pool` starting at domain `d`'s offset, cyclically.
fn window(d: usize, n_domains: usize, pool: usize, len: usize) -> Vec<usize> {
    let start = d * pool / n_domains;
    (0..len).map(|i| (start + i) % pool).collect()
}

/// Everything QA generation needs that the manifest does not spell out directly.
struct Hidden {
    /// per slide: (reading index of the noted block, its spoken-only value)
    notes: Vec<(usize, usize)>,
    audio_fact: (usize, usize),
}

fn build(cfg: &CorpusConfig, vocab: &Vocab, id: u64) -> SubVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, id));
    let d = rng.gen_range(0..cfg.n_domains);
    let keys: Vec<usize> = window(d, cfg.n_domains, cfg.n_keys, cfg.keys_per_domain)
        .into_iter()
        .map(|i| vocab.key(i))
        .collect();
    let values: Vec<usize> = window(d, cfg.n_domains, cfg.n_slide_values, cfg.values_per_domain)
        .into_iter()
        .map(|i| vocab.slide_value(i))
        .collect();
    let audio_values = window(d, cfg.n_domains, cfg.n_audio_values, cfg.audio_values_per_domain);

    let n_slides = rng.gen_range(1..=vocab::MAX_SLIDES);
    let n_facts: Vec<usize> = (0..n_slides).map(|_| rng.gen_range(2..=3)).collect();
    // values are distinct within a sub-video
    let mut value_iter = sample(&mut rng, values.len(), n_facts.iter().sum())
        .into_iter()
        .map(|i| values[i]);

    let topic = vocab.topic(d);
    let mut slides = Vec::with_capacity(n_slides);
    let mut notes = Vec::with_capacity(n_slides);
    for &nf in &n_facts {
        let ks: Vec<usize> = sample(&mut rng, keys.len(), nf).into_iter().map(|i| keys[i]).collect();
        let mut facts: Vec<[usize; 2]> = ks
            .iter()
            .map(|&k| [k, value_iter.next().expect("sampled enough")])
            .collect();
        let noted = rng.gen_range(0..nf);
        notes.push((noted, facts[noted][1]));
        facts[noted][1] = vocab::NOTE;
        let mut layout: Vec<usize> = (0..nf).collect();
        layout.shuffle(&mut rng);
        slides.push(Slide {
            title: vec![topic],
            facts,
            layout,
        });
    }

    let on_slides: Vec<usize> = slides.iter().flat_map(|s| s.facts.iter().map(|f| f[0])).collect();
    let free: Vec<usize> = keys.iter().copied().filter(|k| !on_slides.contains(k)).collect();
    let audio_key = free[rng.gen_range(0..free.len())];
    let audio_value = vocab.audio_value(audio_values[rng.gen_range(0..audio_values.len())]);

    let mut transcripts = Vec::with_capacity(n_slides);
    for (s, slide) in slides.iter().enumerate() {
        let mut t = vec![vocab.paraphrase(topic)];
        if s == 0 {
            t.extend_from_slice(&[vocab::AUD, audio_key, audio_value]);
        }
        for (i, &[k, v]) in slide.facts.iter().enumerate() {
            if rng.gen_bool(FILLER_PROB) {
                t.push(vocab.filler(rng.gen_range(0..vocab.n_fillers.max(1))));
            }
            let spoken = if i == notes[s].0 { notes[s].1 } else { v };
            t.extend_from_slice(&[vocab.paraphrase(k), vocab.paraphrase(spoken)]);
        }
        transcripts.push(t);
    }

    let mut timestamps = Vec::with_capacity(n_slides);
    let mut start = 0.0;
    for _ in 0..n_slides {
        let dur = SLIDE_SECONDS * rng.gen_range(0.6..1.4);
        let end = ((start + dur) * 100.0_f64).round() / 100.0;
        timestamps.push([start, end]);
        start = end;
    }

    let hidden = Hidden {
        notes,
        audio_fact: (audio_key, audio_value),
    };
    let qa = gen_qa(&slides, &hidden, cfg.qa_per_subvideo, &mut rng);
    SubVideo {
        id,
        domain: domain_label(d),
        slides,
        transcripts,
        timestamps,
        qa,
    }
}

fn gen_qa(slides: &[Slide], hidden: &Hidden, n: usize, rng: &mut ChaCha8Rng) -> Vec<QAPair> {
    let mut shown: Vec<(usize, usize)> = slides
        .iter()
        .enumerate()
        .flat_map(|(s, sl)| {
            (0..sl.facts.len())
                .filter(move |&i| i != hidden.notes[s].0)
                .map(move |i| (s, i))
        })
        .collect();
    shown.shuffle(rng);
    // keys in order of first appearance across the video
    let mut key_order: Vec<usize> = Vec::new();
    for sl in slides {
        for f in &sl.facts {
            if !key_order.contains(&f[0]) {
                key_order.push(f[0]);
            }
        }
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pair = match i % 3 {
            0 => {
                let (s, f) = shown[(i / 3) % shown.len()];
                let [k, v] = slides[s].facts[f];
                QAPair {
                    q: vec![vocab::Q_VALUE, k, vocab::slide_token(s)],
                    a: vec![v],
                    category: Category::InformationExtraction,
                    answerability: Answerability::VisualOnly,
                }
            }
            1 if (i / 3) % 2 == 0 => {
                let (k, v) = hidden.audio_fact;
                QAPair {
                    q: vec![vocab::Q_AUDIO, k],
                    a: vec![v],
                    category: Category::ContentComprehension,
                    answerability: Answerability::AudioOnly,
                }
            }
            1 => {
                let s = rng.gen_range(0..slides.len());
                let (p, v) = hidden.notes[s];
                QAPair {
                    q: vec![vocab::Q_CROSS, vocab::slide_token(s), vocab::pos_token(p)],
                    a: vec![v],
                    category: Category::ContentComprehension,
                    answerability: Answerability::CrossModal,
                }
            }
            _ => temporal(slides, &key_order, rng),
        };
        out.push(pair);
    }
    out
}

fn temporal(slides: &[Slide], key_order: &[usize], rng: &mut ChaCha8Rng) -> QAPair {
    let (q, a) = if slides.len() > 1 && rng.gen_bool(0.5) {
        let k = key_order[rng.gen_range(0..key_order.len())];
        let first = slides
            .iter()
            .position(|s| s.facts.iter().any(|f| f[0] == k))
            .expect("key comes from a slide");
        (vec![vocab::Q_FIRST, k], vec![vocab::slide_token(first)])
    } else {
        // with one slide this is the within-slide order
        let idx = sample(rng, key_order.len(), 2);
        let (x, y) = (idx.index(0), idx.index(1));
        let (k1, k2) = (key_order[x], key_order[y]);
        (vec![vocab::Q_ORDER, k1, k2], vec![key_order[x.min(y)]])
    };
    QAPair {
        q,
        a,
        category: Category::TemporalAwareness,
        answerability: Answerability::Temporal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_subvideos: 300,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn structure_holds_on_every_subvideo() {
        let cfg = small();
        let vocab = cfg.vocab().unwrap();
        for sv in gen_corpus(&cfg).unwrap() {
            assert!((1..=3).contains(&sv.slides.len()));
            assert_eq!(sv.transcripts.len(), sv.slides.len());
            assert_eq!(sv.timestamps.len(), sv.slides.len());
            let mut last = 0.0;
            for [a, b] in &sv.timestamps {
                assert!(*a >= last && b > a);
                last = *b;
            }
            for sl in &sv.slides {
                let mut keys: Vec<usize> = sl.facts.iter().map(|f| f[0]).collect();
                keys.sort_unstable();
                keys.dedup();
                assert_eq!(keys.len(), sl.facts.len());
                let mut l = sl.layout.clone();
                l.sort_unstable();
                assert_eq!(l, (0..sl.facts.len()).collect::<Vec<_>>());
                assert_eq!(sl.facts.iter().filter(|f| f[1] == vocab::NOTE).count(), 1);
            }
            let cats: std::collections::BTreeSet<_> = sv.qa.iter().map(|q| q.category).collect();
            assert_eq!(cats.len(), 3);
            assert!(sv.max_token() < vocab.used());
        }
    }

    #[test]
    fn order_independent_and_deterministic() {
        let cfg = small();
        let all = gen_corpus(&cfg).unwrap();
        for id in [0u64, 17, 299] {
            assert_eq!(gen_subvideo(&cfg, id).unwrap(), all[id as usize]);
        }
        assert_eq!(
            super::super::to_jsonl(&all).unwrap(),
            super::super::to_jsonl(&gen_corpus(&cfg).unwrap()).unwrap()
        );
    }

    #[test]
    fn mean_duration_near_target() {
        let cfg = CorpusConfig {
            n_subvideos: 600,
            ..CorpusConfig::default()
        };
        let items = gen_corpus(&cfg).unwrap();
        let mean = items.iter().map(SubVideo::duration).sum::<f64>() / items.len() as f64;
        assert!((mean - 35.0).abs() < 3.5, "{mean}");
    }

    #[test]
    fn qa_examples() {
        let cfg = small();
        let vocab = cfg.vocab().unwrap();
        for sv in gen_corpus(&cfg).unwrap().iter().take(50) {
            for qa in &sv.qa {
                match qa.answerability {
                    Answerability::VisualOnly => {
                        let s = vocab::slide_of_token(qa.q[2]).unwrap();
                        let f = sv.slides[s].facts.iter().find(|f| f[0] == qa.q[1]).unwrap();
                        assert_eq!(qa.a, vec![f[1]]);
                    }
                    Answerability::AudioOnly => {
                        let k = qa.q[1];
                        assert!(sv.slides.iter().all(|s| s.facts.iter().all(|f| f[0] != k)));
                        assert!(sv.audio_tokens().windows(2).any(|w| w == [k, qa.a[0]]));
                    }
                    Answerability::CrossModal => {
                        let s = vocab::slide_of_token(qa.q[1]).unwrap();
                        let p = vocab::pos_of_token(qa.q[2]).unwrap();
                        assert_eq!(sv.slides[s].facts[p][1], vocab::NOTE);
                        let spoken = vocab.paraphrase(qa.a[0]);
                        assert!(sv.transcripts[s].contains(&spoken));
                    }
                    Answerability::Temporal => assert!(!qa.a.is_empty()),
                }
            }
        }
    }

    #[test]
    fn rejects_small_pools() {
        let cfg = CorpusConfig {
            keys_per_domain: 5,
            ..CorpusConfig::default()
        };
        assert!(matches!(gen_corpus(&cfg), Err(crate::Error::Config(_))));
    }
}
