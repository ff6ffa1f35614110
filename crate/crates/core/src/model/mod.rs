//! Two modality branches (encoder → Q-Former → projection) feeding a small
//! causal decoder over `[visual | audio | text]` token sequences.

pub mod checkpoint;
mod config;
mod context;
mod generate;
pub mod layers;


use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, FFN_MULT, INIT_STD};
pub use context::{assemble_context, Context, SegmentKind, TextSegment, IGNORE};
pub use generate::{argmax_lowest, greedy_decode};

use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::numerics::{Element, Graph, ParamId, ParamStore, Tensor, Var};
use layers::{AttnAdapters, Block, Init, LayerNorm, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Vision,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Vision, Modality::Audio];

    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Audio => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Token embedding, learned positions and a stack of bidirectional blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<Block>,
    pub ln_f: LayerNorm,
}

/// Learned queries cross-attending to encoder features, followed by a feed-forward.
#[derive(Clone, Debug)]
pub struct QFormer {
    pub query: ParamId,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: layers::Attention,
    pub ln2: LayerNorm,
    pub ffn: layers::FeedForward,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub modality: Modality,
    pub encoder: Encoder,
    pub qformer: QFormer,
    pub proj: Linear,
}

/// Causal decoder; the output head is the transposed token embedding.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<Block>,
    pub ln_f: LayerNorm,
}

/// Structure of the model: configuration plus handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub vision: Branch,
    pub audio: Branch,
    pub decoder: Decoder,
    pub lora: Option<LoraSet>,
}

/// A model instance: architecture plus its parameter values.
#[derive(Clone, Debug)]
pub struct DvLlama<T: Element> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Element> DvLlama<T> {
    /// Seeded Gaussian init (std 0.02) for weights, unit gains, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let vision = Branch::init(&mut init, &config, Modality::Vision)?;
        let audio = Branch::init(&mut init, &config, Modality::Audio)?;
        let decoder = Decoder::init(&mut init, &config)?;
        Ok(Self {
            arch: Architecture {
                config,
                vision,
                audio,
                decoder,
                lora: None,
            },
            params: store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Same architecture with every value converted to another precision.
    pub fn cast<U: Element>(&self) -> DvLlama<U> {
        DvLlama {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }
}

impl Branch {
    fn init<T: Element, R: rand::Rng>(
        init: &mut Init<'_, T, R>,
        cfg: &ModelConfig,
        modality: Modality,
    ) -> Result<Self> {
        let p = modality.prefix();
        let d = cfg.d_enc;
        let encoder = Encoder {
            embed: init.gaussian(&format!("{p}.enc.embed"), &[cfg.vocab_size, d])?,
            pos: init.gaussian(&format!("{p}.enc.pos"), &[cfg.max_seq, d])?,
            layers: (0..cfg.n_enc_layers)
                .map(|l| Block::init(init, &format!("{p}.enc.{l}"), d, cfg.n_heads))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::init(init, &format!("{p}.enc.ln_f"), d)?,
        };
        let qformer = QFormer {
            query: init.gaussian(&format!("{p}.qformer.query"), &[cfg.n_query, d])?,
            ln_q: LayerNorm::init(init, &format!("{p}.qformer.ln_q"), d)?,
            ln_kv: LayerNorm::init(init, &format!("{p}.qformer.ln_kv"), d)?,
            attn: layers::Attention::init(init, &format!("{p}.qformer.attn"), d, cfg.n_heads)?,
            ln2: LayerNorm::init(init, &format!("{p}.qformer.ln2"), d)?,
            ffn: layers::FeedForward::init(init, &format!("{p}.qformer.ffn"), d)?,
        };
        let proj = Linear::init(init, &format!("{p}.proj"), d, cfg.d_llm)?;
        Ok(Self {
            modality,
            encoder,
            qformer,
            proj,
        })
    }
}

impl Decoder {
    fn init<T: Element, R: rand::Rng>(init: &mut Init<'_, T, R>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_llm;
        Ok(Self {
            embed: init.gaussian("llm.embed", &[cfg.vocab_size, d])?,
            pos: init.gaussian("llm.pos", &[cfg.max_seq, d])?,
            layers: (0..cfg.n_dec_layers)
                .map(|l| Block::init(init, &format!("llm.{l}"), d, cfg.n_heads))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::init(init, "llm.ln_f", d)?,
        })
    }
}

impl Architecture {
    pub fn branch(&self, modality: Modality) -> &Branch {
        match modality {
            Modality::Vision => &self.vision,
            Modality::Audio => &self.audio,
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq {
            return Err(Error::Length {
                len,
                max: self.config.max_seq,
            });
        }
        Ok(())
    }

    /// Encoder features, one row per input token.
    pub fn encode<T: Element>(&self, g: &mut Graph<'_, T>, modality: Modality, tokens: &[usize]) -> Result<Var> {
        self.check_len(tokens.len())?;
        let enc = &self.branch(modality).encoder;
        let table = g.param(enc.embed);
        let x = g.embed(table, tokens)?;
        let pos = g.param(enc.pos);
        let pos = g.slice_rows(pos, 0, tokens.len())?;
        let mut h = g.add(x, pos)?;
        for block in &enc.layers {
            h = block.forward(g, h, false, AttnAdapters::default())?;
        }
        enc.ln_f.forward(g, h)
    }

    /// Q-Former output before projection: exactly `n_query` rows of width `d_enc`.
    pub fn qformer<T: Element>(&self, g: &mut Graph<'_, T>, modality: Modality, feats: Var) -> Result<Var> {
        if g.value(feats).rows() == 0 {
            return Err(Error::Degenerate("Q-Former input has no rows".into()));
        }
        let qf = &self.branch(modality).qformer;
        let query = g.param(qf.query);
        let q = qf.ln_q.forward(g, query)?;
        let kv = qf.ln_kv.forward(g, feats)?;
        let a = qf.attn.forward(g, q, kv, false, AttnAdapters::default())?;
        let h = g.add(query, a)?;
        let f = qf.ln2.forward(g, h)?;
        let f = qf.ffn.forward(g, f)?;
        g.add(h, f)
    }

    pub fn project<T: Element>(&self, g: &mut Graph<'_, T>, modality: Modality, x: Var) -> Result<Var> {
        self.branch(modality).proj.forward(g, x)
    }

    /// `projection(cross_attention(queries, feats))`: `[n_query, d_llm]` for any `n >= 1`.
    pub fn qformer_compress<T: Element>(&self, g: &mut Graph<'_, T>, modality: Modality, feats: Var) -> Result<Var> {
        let q = self.qformer(g, modality, feats)?;
        self.project(g, modality, q)
    }

    /// Modality tokens for a raw token stream: encode then compress.
    pub fn modality_tokens<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        modality: Modality,
        tokens: &[usize],
    ) -> Result<Var> {
        let feats = self.encode(g, modality, tokens)?;
        self.qformer_compress(g, modality, feats)
    }

    fn layer_adapters(&self, layer: usize) -> AttnAdapters {
        self.lora
            .as_ref()
            .map(|set| set.layer_adapters(layer))
            .unwrap_or_default()
    }

    /// Final hidden states of the decoder for an assembled input `[len, d_llm]`.
    pub fn decode_hidden<T: Element>(&self, g: &mut Graph<'_, T>, inputs: Var) -> Result<Var> {
        let len = g.value(inputs).rows();
        self.check_len(len)?;
        let pos = g.param(self.decoder.pos);
        let pos = g.slice_rows(pos, 0, len)?;
        let mut h = g.add(inputs, pos)?;
        for (l, block) in self.decoder.layers.iter().enumerate() {
            h = block.forward(g, h, true, self.layer_adapters(l))?;
        }
        self.decoder.ln_f.forward(g, h)
    }

    /// Tied output head: `hidden · embedᵀ`.
    pub fn head<T: Element>(&self, g: &mut Graph<'_, T>, hidden: Var) -> Result<Var> {
        let table = g.param(self.decoder.embed);
        g.matmul_nt(hidden, table)
    }

    /// Logits `[len, V]`; row `t` depends only on input rows `<= t`.
    pub fn decode<T: Element>(&self, g: &mut Graph<'_, T>, inputs: Var) -> Result<Var> {
        let h = self.decode_hidden(g, inputs)?;
        self.head(g, h)
    }

    /// Decoder input embeddings for text token ids.
    pub fn embed_text<T: Element>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.decoder.embed);
        g.embed(table, ids)
    }

    /// Mean next-token cross-entropy over the answer span of `ctx`.
    pub fn answer_loss<T: Element>(&self, g: &mut Graph<'_, T>, ctx: &Context) -> Result<Var> {
        let (start, end) = ctx
            .loss_rows()
            .ok_or_else(|| Error::Degenerate("context has no loss-eligible positions".into()))?;
        let hidden = self.decode_hidden(g, ctx.inputs)?;
        let rows = g.slice_rows(hidden, start, end - start)?;
        let logits = self.head(g, rows)?;
        g.cross_entropy_mean(logits, &ctx.targets[start..end], IGNORE)
    }

    /// Greedy answer for a prompt given precomputed modality tokens.
    pub fn generate<T: Element>(
        &self,
        params: &ParamStore<T>,
        visual: Option<&Tensor<T>>,
        audio: Option<&Tensor<T>>,
        prompt: &[usize],
        max_new: usize,
        eos: usize,
    ) -> Result<Vec<usize>> {
        greedy_decode(prompt, max_new, eos, |text| {
            let mut g = Graph::inference(params);
            let vis = visual.map(|t| g.input(t.clone()));
            let aud = audio.map(|t| g.input(t.clone()));
            let seg = TextSegment::prompt_only(text.to_vec());
            let ctx = assemble_context(self, &mut g, vis, aud, &seg)?;
            let hidden = self.decode_hidden(&mut g, ctx.inputs)?;
            let last = g.value(hidden).rows() - 1;
            let row = g.slice_rows(hidden, last, 1)?;
            let logits = self.head(&mut g, row)?;
            Ok(g.value(logits).clone())
        })
    }
}
