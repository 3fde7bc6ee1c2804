use rand::Rng;

use crate::error::{KktError, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Query, key and value projections of one head, each `[d_model×d_head]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
}

/// Per-head projections for multi-head attention. There is no output
/// projection: the heads are concatenated straight back to `d_model`.
#[derive(Clone, Debug)]
pub struct MhaParams {
    heads: Vec<HeadParams>,
    d_model: usize,
    d_head: usize,
}

impl MhaParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(KktError::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_head = d_model / heads;
        let shape = [d_model, d_head];
        let heads = (0..heads)
            .map(|i| HeadParams {
                q: store.add_uniform(format!("{prefix}.head{i}.q"), &shape, d_model, rng),
                k: store.add_uniform(format!("{prefix}.head{i}.k"), &shape, d_model, rng),
                v: store.add_uniform(format!("{prefix}.head{i}.v"), &shape, d_model, rng),
            })
            .collect();
        Ok(Self { heads, d_model, d_head })
    }

    /// Rebinds to tensors already present in `store` under `prefix`.
    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut heads = Vec::new();
        while let Some(q) = store.find(&format!("{prefix}.head{}.q", heads.len())) {
            let i = heads.len();
            let find = |s: &str| {
                store
                    .find(&format!("{prefix}.head{i}.{s}"))
                    .ok_or_else(|| KktError::Checkpoint(format!("missing {prefix}.head{i}.{s}")))
            };
            heads.push(HeadParams {
                q,
                k: find("k")?,
                v: find("v")?,
            });
        }
        let first = heads
            .first()
            .ok_or_else(|| KktError::Checkpoint(format!("no attention heads under {prefix}")))?;
        let shape = store.get(first.q).shape();
        let (d_model, d_head) = (shape[0], shape[1]);
        if d_head * heads.len() != d_model {
            return Err(KktError::Checkpoint(format!(
                "{prefix}: {} heads of width {d_head} do not tile d_model {d_model}",
                heads.len()
            )));
        }
        Ok(Self { heads, d_model, d_head })
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.heads.iter().flat_map(|h| [h.q, h.k, h.v])
    }
}

/// Output of [`mha_with_weights`]: the concatenated heads and each head's
/// attention matrix `[d_q×d_k]`.
pub struct MhaTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention over `q_seq [d_q×d_model]` and
/// equal-length `k_seq`/`v_seq [d_k×d_model]`.
pub fn mha(g: &mut Graph, p: &MhaParams, q_seq: Var, k_seq: Var, v_seq: Var) -> Result<Var> {
    mha_with_weights(g, p, q_seq, k_seq, v_seq).map(|t| t.output)
}

pub fn mha_with_weights(g: &mut Graph, p: &MhaParams, q_seq: Var, k_seq: Var, v_seq: Var) -> Result<MhaTrace> {
    for s in [q_seq, k_seq, v_seq] {
        let shape = g.shape(s);
        if shape.len() != 2 || shape[1] != p.d_model {
            return Err(KktError::dim("mha input", shape, &[p.d_model]));
        }
    }
    if g.shape(k_seq)[0] != g.shape(v_seq)[0] {
        return Err(KktError::dim("mha key/value", g.shape(k_seq), g.shape(v_seq)));
    }
    let scale = 1.0 / (p.d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let (wq, wk, wv) = (g.param(h.q), g.param(h.k), g.param(h.v));
        let q = g.matmul(q_seq, wq)?;
        let k = g.matmul(k_seq, wk)?;
        let v = g.matmul(v_seq, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, v)?);
        weights.push(attn);
    }
    let output = g.concat_last_axis(&outs)?;
    Ok(MhaTrace { output, weights })
}

pub fn self_attention(g: &mut Graph, p: &MhaParams, x: Var) -> Result<Var> {
    mha(g, p, x, x, x)
}
