//! Parameter bundles and their forward passes.

use rand::Rng;

use super::config::{FFN_MULT, INIT_STD};
use crate::error::Result;
use crate::numerics::{Element, Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) struct Init<'a, T: Element, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Element, R: Rng> Init<'_, T, R> {
    pub fn gaussian(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = Tensor::randn(shape, INIT_STD, self.rng);
        self.store.insert(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, T::of(value)), true)
    }
}

/// Affine map `x Wᵀ + b` with `W[d_out, d_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub(crate) fn init<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: init.gaussian(&format!("{name}.weight"), &[d_out, d_in])?,
            bias: init.constant(&format!("{name}.bias"), &[d_out], 0.0)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul_nt(x, w)?;
        let b = g.param(self.bias);
        g.add_row(y, b)
    }
}

/// Low-rank additive path `scale · (x Aᵀ) Bᵀ` riding on a [`Linear`].
#[derive(Clone, Copy, Debug)]
pub struct LowRank {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl LowRank {
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = g.param(self.a);
        let b = g.param(self.b);
        let down = g.matmul_nt(x, a)?;
        let up = g.matmul_nt(down, b)?;
        g.scale(up, self.scale)
    }
}

fn linear_with<T: Element>(g: &mut Graph<'_, T>, lin: &Linear, lora: Option<&LowRank>, x: Var) -> Result<Var> {
    let base = lin.forward(g, x)?;
    match lora {
        Some(ad) => {
            let delta = ad.forward(g, x)?;
            g.add(base, delta)
        }
        None => Ok(base),
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn init<T: Element, R: Rng>(init: &mut Init<'_, T, R>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: init.constant(&format!("{name}.gain"), &[d], 1.0)?,
            bias: init.constant(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Optional adapters on the query and value projections of one attention layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttnAdapters {
    pub q: Option<LowRank>,
    pub v: Option<LowRank>,
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub(crate) fn init<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::init(init, &format!("{name}.q"), d, d)?,
            k: Linear::init(init, &format!("{name}.k"), d, d)?,
            v: Linear::init(init, &format!("{name}.v"), d, d)?,
            o: Linear::init(init, &format!("{name}.o"), d, d)?,
            n_heads,
        })
    }

    /// Multi-head attention of `xq[n,d]` over `xkv[m,d]`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        xq: Var,
        xkv: Var,
        causal: bool,
        adapters: AttnAdapters,
    ) -> Result<Var> {
        let d = self.q.d_out;
        let dh = d / self.n_heads;
        let q = linear_with(g, &self.q, adapters.q.as_ref(), xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = linear_with(g, &self.v, adapters.v.as_ref(), xkv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let probs = if causal {
                g.causal_softmax_rows(scores)?
            } else {
                g.softmax_rows(scores)?
            };
            heads.push(g.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.o.forward(g, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub(crate) fn init<T: Element, R: Rng>(init: &mut Init<'_, T, R>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::init(init, &format!("{name}.up"), d, d * FFN_MULT)?,
            down: Linear::init(init, &format!("{name}.down"), d * FFN_MULT, d)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln1 x)`, then `+ ffn(ln2 ·)`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub(crate) fn init<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::init(init, &format!("{name}.ln1"), d)?,
            attn: Attention::init(init, &format!("{name}.attn"), d, n_heads)?,
            ln2: LayerNorm::init(init, &format!("{name}.ln2"), d)?,
            ffn: FeedForward::init(init, &format!("{name}.ffn"), d)?,
        })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        causal: bool,
        adapters: AttnAdapters,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, causal, adapters)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}
