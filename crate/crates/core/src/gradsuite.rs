//! Central-difference checks of every differentiable op and of each stage
//! objective, in binary64.
//!
//! Stage losses are checked on a small model whose weights are redrawn at
//! unit scale: at the std-0.02 training init many gradients sit near 1e-8,
//! where the finite-difference estimate is dominated by rounding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{AlignConfig, Direction};
use crate::corpus::InstructionSample;
use crate::error::Result;
use crate::lora::{attach_targets, LoraConfig};
use crate::model::{DvLlama, Modality, ModelConfig};
use crate::numerics::{finite_diff_check, Coords, Graph, ParamId, ParamStore, Tensor, Var};
use crate::trainer::data::{alignment_loss, fusion_loss, instruction_loss};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates sampled per parameter in the stage-loss checks.
const STAGE_COORDS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub seeds: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// `Σ y ⊙ w` for fixed random `w`, so each output coordinate gets its own upstream gradient.
fn weighted_sum(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = g.input(Tensor::randn(g.shape(y), 1.0, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn worst<F>(store: &mut ParamStore<f64>, ids: &[ParamId], coords: Coords, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut w: f64 = 0.0;
    for &id in ids {
        w = w.max(finite_diff_check(store, id, STEP, coords, &f)?);
    }
    Ok(w)
}

/// Max relative error of every op on random small shapes drawn from `seed`.
pub fn op_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..4);
    let k = rng.gen_range(2..5);
    let n = rng.gen_range(2..5);
    let mut s = ParamStore::new();
    let a = s.insert("a", rand_t(&mut rng, &[m, k]), true)?;
    let b = s.insert("b", rand_t(&mut rng, &[k, n]), true)?;
    let c = s.insert("c", rand_t(&mut rng, &[m, k]), true)?;
    let bn = s.insert("bn", rand_t(&mut rng, &[n, k]), true)?;
    let row = s.insert("row", rand_t(&mut rng, &[k]), true)?;
    let sq = s.insert("sq", rand_t(&mut rng, &[n, n]), true)?;
    let pos_vals: Vec<f64> = (0..m * k).map(|_| rng.gen_range(0.5..2.0)).collect();
    let pos = s.insert("pos", Tensor::from_f64(&[m, k], &pos_vals)?, true)?;
    let all = Coords::All;

    type Check<'a> = (
        &'static str,
        Vec<ParamId>,
        Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var> + 'a>,
    );
    let checks: Vec<Check> = vec![
        (
            "matmul",
            vec![a, b],
            Box::new(move |g| {
                let (x, y) = (g.param(a), g.param(b));
                let z = g.matmul(x, y)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "matmul_nt",
            vec![a, bn],
            Box::new(move |g| {
                let (x, y) = (g.param(a), g.param(bn));
                let z = g.matmul_nt(x, y)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "transpose",
            vec![a],
            Box::new(move |g| {
                let x = g.param(a);
                let z = g.transpose(x)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "add",
            vec![a, c],
            Box::new(move |g| {
                let (x, y) = (g.param(a), g.param(c));
                let z = g.add(x, y)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "sub",
            vec![a, c],
            Box::new(move |g| {
                let (x, y) = (g.param(a), g.param(c));
                let z = g.sub(x, y)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "mul",
            vec![a, c],
            Box::new(move |g| {
                let (x, y) = (g.param(a), g.param(c));
                let z = g.mul(x, y)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "scale",
            vec![a],
            Box::new(move |g| {
                let x = g.param(a);
                let z = g.scale(x, -1.7)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "add_row",
            vec![a, row],
            Box::new(move |g| {
                let (x, y) = (g.param(a), g.param(row));
                let z = g.add_row(x, y)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "gelu",
            vec![a],
            Box::new(move |g| {
                let x = g.param(a);
                let z = g.gelu(x)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "exp",
            vec![a],
            Box::new(move |g| {
                let x = g.param(a);
                let z = g.exp(x)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "log",
            vec![pos],
            Box::new(move |g| {
                let x = g.param(pos);
                let z = g.log(x)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "clamp_min",
            vec![pos],
            Box::new(move |g| {
                // floor sits between the sampled values' range and zero: identity branch
                let x = g.param(pos);
                let z = g.clamp_min(x, 0.25)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "softmax_rows",
            vec![a],
            Box::new(move |g| {
                let x = g.param(a);
                let z = g.softmax_rows(x)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "causal_softmax_rows",
            vec![sq],
            Box::new(move |g| {
                let x = g.param(sq);
                let z = g.causal_softmax_rows(x)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "layer_norm",
            vec![c, row],
            Box::new(move |g| {
                let (x, gain) = (g.param(c), g.param(row));
                let bias = g.input(Tensor::full(&[k], 0.1));
                let z = g.layer_norm(x, gain, bias)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "embed",
            vec![bn],
            Box::new(move |g| {
                let t = g.param(bn);
                let z = g.embed(t, &[0, n - 1, 0])?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "concat_rows",
            vec![a, c],
            Box::new(move |g| {
                let (x, y) = (g.param(a), g.param(c));
                let z = g.concat_rows(&[x, y])?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "concat_cols",
            vec![a, c],
            Box::new(move |g| {
                let (x, y) = (g.param(a), g.param(c));
                let z = g.concat_cols(&[x, y, x])?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "slice_rows",
            vec![sq],
            Box::new(move |g| {
                let x = g.param(sq);
                let z = g.slice_rows(x, 1, n - 1)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "slice_cols",
            vec![a],
            Box::new(move |g| {
                let x = g.param(a);
                let z = g.slice_cols(x, 1, k - 1)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "mean_rows",
            vec![a],
            Box::new(move |g| {
                let x = g.param(a);
                let z = g.mean_rows(x)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "sum",
            vec![a],
            Box::new(move |g| {
                let x = g.param(a);
                let y = g.mul(x, x)?;
                g.sum(y)
            }),
        ),
        (
            "l2_normalize_rows",
            vec![a],
            Box::new(move |g| {
                let x = g.param(a);
                let z = g.l2_normalize_rows(x)?;
                weighted_sum(g, z, seed)
            }),
        ),
        (
            "cosine",
            vec![a, c],
            Box::new(move |g| {
                let (x, y) = (g.param(a), g.param(c));
                let (mx, my) = (g.mean_rows(x)?, g.mean_rows(y)?);
                g.cosine(mx, my)
            }),
        ),
        (
            "cross_entropy_mean",
            vec![sq],
            Box::new(move |g| {
                let x = g.param(sq);
                let targets: Vec<i64> = (0..n as i64)
                    .map(|i| if i == 1 { -1 } else { (i * 7 + 1) % n as i64 })
                    .collect();
                g.cross_entropy_mean(x, &targets, -1)
            }),
        ),
    ];
    let mut out = Vec::with_capacity(checks.len());
    for (name, ids, f) in &checks {
        out.push((*name, worst(&mut s, ids, all, f)?));
    }
    Ok(out)
}

fn check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_enc: 8,
        d_llm: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_query: 3,
        max_seq: 48,
        seed,
    }
}

/// Redraws every parameter at unit scale: weights `N(0, 1/fan_in)`, tables
/// and queries `N(0, 1)`, gains near 1, biases small, adapters uniform.
fn condition(model: &mut DvLlama<f64>, rng: &mut ChaCha8Rng) {
    for p in model.params.iter_mut() {
        let shape = p.value.shape().to_vec();
        let name = p.name.as_str();
        let fresh = if name.contains(".lora.") {
            let v: Vec<f64> = (0..p.value.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Tensor::new(shape, v).expect("same shape")
        } else if name.ends_with(".gain") {
            let mut t = Tensor::randn(&shape, 0.1, rng);
            t.data_mut().iter_mut().for_each(|x| *x += 1.0);
            t
        } else if name.ends_with(".bias") {
            Tensor::randn(&shape, 0.1, rng)
        } else if name.ends_with(".weight") {
            Tensor::randn(&shape, 1.0 / (shape[1] as f64).sqrt(), rng)
        } else {
            Tensor::randn(&shape, 1.0, rng)
        };
        p.value = fresh;
    }
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..v)).collect()
}

fn ids(model: &DvLlama<f64>, names: &[&str]) -> Vec<ParamId> {
    names
        .iter()
        .map(|n| model.params.id(n).unwrap_or_else(|| panic!("no parameter {n}")))
        .collect()
}

/// Max relative error of each stage objective with respect to that stage's trainable parameters.
pub fn stage_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5747_4745);
    let cfg = check_config(seed);
    let v = cfg.vocab_size;
    let coords = Coords::Sample { n: STAGE_COORDS, seed };
    let mut out = Vec::new();

    let mut model = DvLlama::<f64>::new(cfg.clone())?;
    condition(&mut model, &mut rng);
    for (name, m) in [
        ("stage1_vision_lm", Modality::Vision),
        ("stage1_audio_lm", Modality::Audio),
    ] {
        let sample = InstructionSample {
            input: tokens(&mut rng, 7, v),
            prompt: vec![1, 6],
            target: tokens(&mut rng, 3, v),
        };
        let p = m.prefix();
        let check = ids(
            &model,
            &[
                &format!("{p}.qformer.query"),
                &format!("{p}.qformer.attn.q.weight"),
                &format!("{p}.qformer.ffn.up.weight"),
                &format!("{p}.qformer.ln2.gain"),
                &format!("{p}.proj.weight"),
                &format!("{p}.proj.bias"),
            ],
        );
        let arch = model.arch.clone();
        let e = worst(&mut model.params, &check, coords, |g| {
            let f = arch.encode(g, m, &sample.input)?;
            instruction_loss(&arch, g, m, f, &sample)
        })?;
        out.push((name, e));
    }

    let streams: Vec<(Vec<usize>, Vec<usize>)> = (0..4)
        .map(|i| (tokens(&mut rng, 5 + i, v), tokens(&mut rng, 6 + i, v)))
        .collect();
    let check = ids(
        &model,
        &[
            "vision.proj.weight",
            "vision.proj.bias",
            "audio.proj.weight",
            "audio.proj.bias",
        ],
    );
    for (name, direction) in [
        ("stage2_contrastive", Direction::A2v),
        ("stage2_contrastive_symmetric", Direction::Symmetric),
    ] {
        let align = AlignConfig {
            direction,
            ..AlignConfig::default()
        };
        let arch = model.arch.clone();
        let e = worst(&mut model.params, &check, coords, |g| {
            let mut vis = Vec::new();
            let mut aud = Vec::new();
            for (vt, at) in &streams {
                let f = arch.encode(g, Modality::Vision, vt)?;
                vis.push(arch.qformer(g, Modality::Vision, f)?);
                let f = arch.encode(g, Modality::Audio, at)?;
                aud.push(arch.qformer(g, Modality::Audio, f)?);
            }
            alignment_loss(&arch, g, &vis, &aud, &[10, 11, 12, 13], &align)
        })?;
        out.push((name, e));
    }

    attach_targets(&mut model, LoraConfig::default())?;
    condition(&mut model, &mut rng);
    let (vt, at) = (tokens(&mut rng, 9, v), tokens(&mut rng, 8, v));
    let prompt = [vec![1], tokens(&mut rng, 3, v), vec![3]].concat();
    let answer = tokens(&mut rng, 2, v);
    let check = ids(
        &model,
        &[
            "llm.0.attn.q.lora.A",
            "llm.0.attn.q.lora.B",
            "llm.0.attn.v.lora.A",
            "llm.0.attn.v.lora.B",
            "vision.proj.weight",
            "audio.proj.bias",
        ],
    );
    let arch = model.arch.clone();
    let e = worst(&mut model.params, &check, coords, |g| {
        let f = arch.encode(g, Modality::Vision, &vt)?;
        let qv = arch.qformer(g, Modality::Vision, f)?;
        let f = arch.encode(g, Modality::Audio, &at)?;
        let qa = arch.qformer(g, Modality::Audio, f)?;
        fusion_loss(&arch, g, Some(qv), Some(qa), &prompt, &answer)
    })?;
    out.push(("stage3_fusion", e));
    Ok(out)
}

/// Worst error per check over all `seeds`, ops first, then stage objectives.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<CheckResult>> {
    let mut order: Vec<&'static str> = Vec::new();
    let mut acc: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    for seed in seeds {
        for (name, e) in op_errors(seed)?.into_iter().chain(stage_errors(seed)?) {
            let slot = acc.entry(name).or_insert_with(|| {
                order.push(name);
                (0.0, 0)
            });
            slot.0 = slot.0.max(e);
            slot.1 += 1;
        }
    }
    Ok(order
        .into_iter()
        .map(|name| CheckResult {
            name: name.to_string(),
            max_rel_err: acc[name].0,
            seeds: acc[name].1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_seeds() {
        let res = run_suite(0..3).unwrap();
        assert!(res.len() > 25);
        for r in &res {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
            assert_eq!(r.seeds, 3);
        }
    }
}
