//! Low-rank adapters on the decoder's attention query and value projections.
//!
//! Adapter parameters are appended at the tail of the [`ParamStore`], so
//! detaching is a truncation back to the pre-attach length.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{AttnAdapters, LowRank};
use crate::model::{DvLlama, INIT_STD};
use crate::numerics::{kernels, Element, ParamId, ParamStore, Tensor};
use crate::util::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0 }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("lora.alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// One adapter pair `A[r, d_in]`, `B[d_out, r]` wrapping `target`.
#[derive(Clone, Copy, Debug)]
pub struct LoraAdapter {
    pub target: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn low_rank(&self) -> LowRank {
        LowRank {
            a: self.a,
            b: self.b,
            scale: self.alpha / self.rank as f64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerLora {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

/// Adapters attached to a model, plus what is needed to undo the attachment.
#[derive(Clone, Debug)]
pub struct LoraSet {
    pub config: LoraConfig,
    pub base_len: usize,
    pub saved_flags: Vec<bool>,
    pub layers: Vec<LayerLora>,
}

impl LoraSet {
    pub fn layer_adapters(&self, layer: usize) -> AttnAdapters {
        match self.layers.get(layer) {
            Some(l) => AttnAdapters {
                q: Some(l.q.low_rank()),
                v: Some(l.v.low_rank()),
            },
            None => AttnAdapters::default(),
        }
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.layers.iter().flat_map(|l| [&l.q, &l.v])
    }
}

/// Adds `llm.<l>.attn.{q,v}.lora.{A,B}` for every decoder layer and freezes the wrapped weights.
pub fn attach_targets<T: Element>(model: &mut DvLlama<T>, config: LoraConfig) -> Result<()> {
    config.validate()?;
    if model.arch.lora.is_some() {
        return Err(Error::Contract("LoRA adapters are already attached".into()));
    }
    let saved_flags = model.params.trainable_flags();
    let base_len = model.params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(model.arch.config.seed, 0x4c6f5241));
    let mut layers = Vec::new();
    for (l, block) in model.arch.decoder.layers.iter().enumerate() {
        let mut make = |slot: &str, target: ParamId, d_in: usize, d_out: usize| -> Result<LoraAdapter> {
            let prefix = format!("llm.{l}.attn.{slot}.lora");
            let a = model.params.insert(
                format!("{prefix}.A"),
                Tensor::randn(&[config.rank, d_in], INIT_STD, &mut rng),
                true,
            )?;
            let b = model
                .params
                .insert(format!("{prefix}.B"), Tensor::zeros(&[d_out, config.rank]), true)?;
            model.params.get_mut(target).trainable = false;
            Ok(LoraAdapter {
                target,
                a,
                b,
                rank: config.rank,
                alpha: config.alpha,
            })
        };
        let attn = &block.attn;
        let q = make("q", attn.q.weight, attn.q.d_in, attn.q.d_out)?;
        let v = make("v", attn.v.weight, attn.v.d_in, attn.v.d_out)?;
        layers.push(LayerLora { q, v });
    }
    model.arch.lora = Some(LoraSet {
        config,
        base_len,
        saved_flags,
        layers,
    });
    Ok(())
}

/// Removes the adapters and restores the trainability flags seen at attach time.
pub fn detach<T: Element>(model: &mut DvLlama<T>) -> Result<LoraSet> {
    let set = model
        .arch
        .lora
        .take()
        .ok_or_else(|| Error::Contract("no LoRA adapters attached".into()))?;
    model.params.truncate(set.base_len);
    model.params.restore_trainable_flags(&set.saved_flags);
    Ok(set)
}

fn check_shapes<T: Element>(w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if w.rank() != 2 || a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim("lora", w.shape(), a.shape()));
    }
    let (d_out, d_in) = w.dims2();
    let (r, a_in) = a.dims2();
    if a_in != d_in || b.shape() != [d_out, r] {
        return Err(Error::dim("lora", a.shape(), b.shape()));
    }
    Ok((d_out, d_in, r))
}

/// `W x + (alpha/r) · B (A x)` for a single vector `x[d_in]`.
pub fn lora_apply<T: Element>(
    w: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    alpha: f64,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (d_out, d_in, r) = check_shapes(w, a, b)?;
    if x.numel() != d_in {
        return Err(Error::dim("lora_apply", w.shape(), x.shape()));
    }
    let scale = T::of(alpha / r as f64);
    let ax: Vec<T> = (0..r).map(|i| kernels::dot(a.row(i), x.data())).collect();
    let y = (0..d_out)
        .map(|o| kernels::dot(w.row(o), x.data()) + scale * kernels::dot(b.row(o), &ax))
        .collect();
    Tensor::new([d_out], y)
}

/// `W + (alpha/r) · B A`.
pub fn lora_merge<T: Element>(w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    let (d_out, d_in, r) = check_shapes(w, a, b)?;
    let mut delta = vec![T::zero(); d_out * d_in];
    kernels::gemm_nn(d_out, r, d_in, b.data(), a.data(), &mut delta);
    let scale = T::of(alpha / r as f64);
    let data = w.data().iter().zip(&delta).map(|(&wv, &dv)| wv + scale * dv).collect();
    Tensor::new([d_out, d_in], data)
}

/// Folds every adapter into its base weight and removes the adapters.
pub fn merge_all<T: Element>(model: &DvLlama<T>) -> Result<DvLlama<T>> {
    let set = model
        .arch
        .lora
        .as_ref()
        .ok_or_else(|| Error::Contract("no LoRA adapters attached".into()))?;
    let mut merged: Vec<(ParamId, Tensor<T>)> = Vec::new();
    for ad in set.adapters() {
        let p: &ParamStore<T> = &model.params;
        merged.push((
            ad.target,
            lora_merge(p.value(ad.target), p.value(ad.a), p.value(ad.b), ad.alpha)?,
        ));
    }
    let mut out = model.clone();
    detach(&mut out)?;
    for (id, w) in merged {
        out.params.get_mut(id).value = w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{finite_diff_check, Coords, Graph};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_enc: 8,
            d_llm: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_query: 2,
            max_seq: 16,
            seed: 5,
        }
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn zero_b_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_t(&[3, 4], &mut rng);
        let a = rand_t(&[2, 4], &mut rng);
        let b = Tensor::zeros(&[3, 2]);
        let x = rand_t(&[4], &mut rng);
        let y = lora_apply(&w, &a, &b, 8.0, &x).unwrap();
        let base: Vec<f64> = (0..3).map(|o| kernels::dot(w.row(o), x.data())).collect();
        assert_eq!(y.data(), &base[..]);
        assert_eq!(lora_merge(&w, &a, &b, 8.0).unwrap().to_le_bytes(), w.to_le_bytes());
    }

    #[test]
    fn rank_one_hand_case() {
        let w = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 0.0], &[0.0, 1.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[&[1.0, 0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap();
        let x = Tensor::vector(&[3.0, 1.0, 2.0]);
        let y = lora_apply(&w, &a, &b, 1.0, &x).unwrap();
        // Wx = [5, 3]; plus x0 * e1
        assert_eq!(y.data(), &[8.0, 3.0]);
    }

    #[test]
    fn merge_matches_apply_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w32: Tensor<f32> = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let a32: Tensor<f32> = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b32: Tensor<f32> = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let merged = lora_merge(&w32, &a32, &b32, 6.0).unwrap();
        for _ in 0..100 {
            let x: Tensor<f32> = Tensor::randn(&[5], 1.0, &mut rng);
            let y = lora_apply(&w32, &a32, &b32, 6.0, &x).unwrap();
            let ym: Vec<f32> = (0..6).map(|o| kernels::dot(merged.row(o), x.data())).collect();
            let diff = y.data().iter().zip(&ym).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-5, "{diff}");
        }
        let w = w32.cast::<f64>();
        let (a, b) = (a32.cast::<f64>(), b32.cast::<f64>());
        let m = lora_merge(&w, &a, &b, 6.0).unwrap();
        let neg_b = {
            let mut t = b.clone();
            t.scale_in_place(-1.0);
            t
        };
        let back = lora_merge(&m, &a, &neg_b, 6.0).unwrap();
        assert!(back.max_abs_diff(&w) < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let w = Tensor::<f64>::zeros(&[3, 4]);
        let a = Tensor::zeros(&[2, 5]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            lora_apply(&w, &a, &b, 1.0, &Tensor::zeros(&[4])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn attach_counts_names_and_double_attach() {
        let mut m = DvLlama::<f64>::new(tiny()).unwrap();
        let before = m.params.len();
        attach_targets(&mut m, LoraConfig::default()).unwrap();
        assert_eq!(m.params.len(), before + 8);
        assert_eq!(m.arch.lora.as_ref().unwrap().adapters().count(), 4);
        for l in 0..2 {
            for s in ["q", "v"] {
                for ab in ["A", "B"] {
                    assert!(m.params.id(&format!("llm.{l}.attn.{s}.lora.{ab}")).is_some());
                }
                assert!(!m.params.by_name(&format!("llm.{l}.attn.{s}.weight")).unwrap().trainable);
            }
        }
        assert!(matches!(
            attach_targets(&mut m, LoraConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn detach_restores_flags() {
        let mut m = DvLlama::<f64>::new(tiny()).unwrap();
        m.params.get_mut(m.arch.vision.proj.weight).trainable = false;
        let flags = m.params.trainable_flags();
        attach_targets(&mut m, LoraConfig::default()).unwrap();
        detach(&mut m).unwrap();
        assert_eq!(m.params.trainable_flags(), flags);
        assert!(m.arch.lora.is_none());
    }

    fn logits(m: &DvLlama<f64>, tokens: &[usize]) -> Tensor<f64> {
        let mut g = Graph::inference(&m.params);
        let x = m.arch.embed_text(&mut g, tokens).unwrap();
        let y = m.arch.decode(&mut g, x).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn attach_is_exact_identity_and_merge_agrees() {
        let mut m = DvLlama::<f64>::new(tiny()).unwrap();
        let toks = [1, 5, 3, 9, 2];
        let before = logits(&m, &toks);
        attach_targets(&mut m, LoraConfig::default()).unwrap();
        assert_eq!(logits(&m, &toks).to_le_bytes(), before.to_le_bytes());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ids: Vec<ParamId> = m.arch.lora.as_ref().unwrap().adapters().map(|a| a.b).collect();
        for id in ids {
            for v in m.params.get_mut(id).value.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let adapted = logits(&m, &toks);
        assert!(adapted.max_abs_diff(&before) > 1e-6);
        let merged = merge_all(&m).unwrap();
        assert!(merged.arch.lora.is_none());
        assert!(logits(&merged, &toks).max_abs_diff(&adapted) < 1e-9);
    }

    #[test]
    fn gradient_reaches_adapters_not_base() {
        let mut m = DvLlama::<f64>::new(tiny()).unwrap();
        attach_targets(&mut m, LoraConfig::default()).unwrap();
        let set = m.arch.lora.clone().unwrap();
        // At std-0.02 init the query gradients sit near 1e-8, where central
        // differences are mostly rounding noise. Widen the attention weights first.
        for p in m.params.iter_mut() {
            if p.name.contains(".attn.") {
                p.value.scale_in_place(20.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for ad in set.adapters() {
            for id in [ad.a, ad.b] {
                for v in m.params.get_mut(id).value.data_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
        let arch = m.arch.clone();
        let loss = |g: &mut Graph<f64>| {
            let x = arch.embed_text(g, &[1, 4, 7])?;
            let y = arch.decode(g, x)?;
            g.cross_entropy_mean(y, &[4, 7, 2], -1)
        };
        {
            let mut g = Graph::new(&m.params);
            let l = loss(&mut g).unwrap();
            let grads = g.backward(l).unwrap();
            let q0 = set.layers[0].q;
            assert!(grads.get(q0.a).is_some() && grads.get(q0.b).is_some());
            assert!(grads.get(q0.target).is_none());
        }
        for ad in set.adapters() {
            for id in [ad.a, ad.b] {
                let err = finite_diff_check(&mut m.params, id, 1e-5, Coords::All, loss).unwrap();
                assert!(err < 1e-4, "{err}");
            }
        }
    }
}
