use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mha::{self_attention, MhaParams};
use crate::error::{KktError, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attn: MhaParams,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

/// Token and position embeddings, post-norm transformer blocks and a tanh
/// pooler over the first position.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub pool_w: ParamId,
    pub pool_b: ParamId,
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        if config.vocab_size == 0 || config.max_len == 0 || config.d_ff == 0 || d == 0 {
            return Err(KktError::Config(format!("degenerate encoder config {config:?}")));
        }
        let tok_emb = store.add_uniform(format!("{prefix}.tok_emb"), &[config.vocab_size, d], d, rng);
        let pos_emb = store.add_uniform(format!("{prefix}.pos_emb"), &[config.max_len, d], d, rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("{prefix}.block{l}");
            blocks.push(BlockParams {
                attn: MhaParams::new(store, &format!("{p}.attn"), d, config.heads, rng)?,
                ff1_w: store.add_uniform(format!("{p}.ff1.w"), &[d, config.d_ff], d, rng),
                ff1_b: store.add_uniform(format!("{p}.ff1.b"), &[config.d_ff], d, rng),
                ff2_w: store.add_uniform(format!("{p}.ff2.w"), &[config.d_ff, d], config.d_ff, rng),
                ff2_b: store.add_uniform(format!("{p}.ff2.b"), &[d], config.d_ff, rng),
                ln1_g: store.add_constant(format!("{p}.ln1.g"), &[d], 1.0),
                ln1_b: store.add_constant(format!("{p}.ln1.b"), &[d], 0.0),
                ln2_g: store.add_constant(format!("{p}.ln2.g"), &[d], 1.0),
                ln2_b: store.add_constant(format!("{p}.ln2.b"), &[d], 0.0),
            });
        }
        let pool_w = store.add_uniform(format!("{prefix}.pool.w"), &[d, d], d, rng);
        let pool_b = store.add_uniform(format!("{prefix}.pool.b"), &[d], d, rng);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            pool_w,
            pool_b,
        })
    }

    /// Rebinds to tensors already present in `store`, recovering the
    /// configuration from their shapes.
    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| KktError::Checkpoint(format!("missing tensor {name}")))
        };
        let tok_emb = find(format!("{prefix}.tok_emb"))?;
        let pos_emb = find(format!("{prefix}.pos_emb"))?;
        let (vocab_size, d_model) = {
            let s = store.get(tok_emb).shape();
            (s[0], s[1])
        };
        let max_len = store.get(pos_emb).shape()[0];
        let mut blocks = Vec::new();
        while store.find(&format!("{prefix}.block{}.ff1.w", blocks.len())).is_some() {
            let p = format!("{prefix}.block{}", blocks.len());
            blocks.push(BlockParams {
                attn: MhaParams::lookup(store, &format!("{p}.attn"))?,
                ff1_w: find(format!("{p}.ff1.w"))?,
                ff1_b: find(format!("{p}.ff1.b"))?,
                ff2_w: find(format!("{p}.ff2.w"))?,
                ff2_b: find(format!("{p}.ff2.b"))?,
                ln1_g: find(format!("{p}.ln1.g"))?,
                ln1_b: find(format!("{p}.ln1.b"))?,
                ln2_g: find(format!("{p}.ln2.g"))?,
                ln2_b: find(format!("{p}.ln2.b"))?,
            });
        }
        let heads = blocks.first().map_or(1, |b| b.attn.heads().len());
        let d_ff = blocks.first().map_or(1, |b| store.get(b.ff1_w).shape()[1]);
        Ok(Self {
            config: EncoderConfig {
                vocab_size,
                d_model,
                heads,
                layers: blocks.len(),
                d_ff,
                max_len,
            },
            tok_emb,
            pos_emb,
            blocks,
            pool_w: find(format!("{prefix}.pool.w"))?,
            pool_b: find(format!("{prefix}.pool.b"))?,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }
}

pub struct EncoderOutput {
    /// Final block output, `[n×d_model]`.
    pub last_hidden: Var,
    /// `tanh(affine(last_hidden[0]))`, `[d_model]`.
    pub pooled: Var,
    /// Set when the input exceeded `max_len` and was cut to fit.
    pub truncated: bool,
}

/// Runs the blocks without the pooler.
pub fn encode_hidden(g: &mut Graph, p: &EncoderParams, token_ids: &[usize]) -> Result<(Var, bool)> {
    if token_ids.is_empty() {
        return Err(KktError::EmptySequence("encode"));
    }
    let truncated = token_ids.len() > p.config.max_len;
    let ids = &token_ids[..token_ids.len().min(p.config.max_len)];
    if truncated {
        log::warn!(
            "encoder input of {} tokens truncated to {}",
            token_ids.len(),
            p.config.max_len
        );
    }
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok_table = g.param(p.tok_emb);
    let pos_table = g.param(p.pos_emb);
    let tok = g.embedding(tok_table, ids)?;
    let pos = g.embedding(pos_table, &positions)?;
    let mut x = g.add(tok, pos)?;
    for b in &p.blocks {
        let a = self_attention(g, &b.attn, x)?;
        let r = g.add(x, a)?;
        let (g1, b1) = (g.param(b.ln1_g), g.param(b.ln1_b));
        x = g.layer_norm(r, g1, b1)?;
        let (w1, bias1, w2, bias2) = (g.param(b.ff1_w), g.param(b.ff1_b), g.param(b.ff2_w), g.param(b.ff2_b));
        let h = g.linear(x, w1, Some(bias1))?;
        let h = g.gelu(h);
        let f = g.linear(h, w2, Some(bias2))?;
        let r = g.add(x, f)?;
        let (g2, b2) = (g.param(b.ln2_g), g.param(b.ln2_b));
        x = g.layer_norm(r, g2, b2)?;
    }
    Ok((x, truncated))
}

pub fn encode(g: &mut Graph, p: &EncoderParams, token_ids: &[usize]) -> Result<EncoderOutput> {
    let (last_hidden, truncated) = encode_hidden(g, p, token_ids)?;
    let pooled = pool(g, p, last_hidden)?;
    Ok(EncoderOutput {
        last_hidden,
        pooled,
        truncated,
    })
}

pub fn pool(g: &mut Graph, p: &EncoderParams, last_hidden: Var) -> Result<Var> {
    let first = g.select_rows(last_hidden, &[0])?;
    let first = g.reshape(first, &[p.config.d_model])?;
    let (w, b) = (g.param(p.pool_w), g.param(p.pool_b));
    let z = g.linear(first, w, Some(b))?;
    Ok(g.tanh(z))
}
