#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kkt_core::attention::{mha, self_attention, EncoderConfig, MhaParams, Vocab};
use kkt_core::knowledge::{KnowledgeStore, KnowledgeTriple, PosTagger, SurfaceTable};
use kkt_core::model::{
    example_logits, Ablation, DialogueExample, ExamplePipeline, FactSource, KktParams, OptionPipeline,
};
use kkt_core::tensor::{Graph, ParamStore, Tensor, Var};
use kkt_core::Result;

pub mod oracle;

pub type Matrix = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn to_matrix(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-6)`. The floor keeps gradients that are
/// zero in exact arithmetic (a bias shared by every option's logit) from
/// comparing difference noise against itself.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / (norm(analytic) + norm(numeric)).max(1e-6)
}

pub const FD_STEP: f64 = 1e-5;

/// Contracts an arbitrary output with fixed random weights so every output
/// entry contributes to the scalar being differentiated.
fn contract(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let n = g.value(out).numel();
    let flat = g.reshape(out, &[n])?;
    let w = g.constant(weights.clone());
    g.dot(flat, w)
}

/// Worst relative error between backprop and central differences over the
/// inputs of `f`.
pub fn fd_check_op(inputs: &[Tensor], seed: u64, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    fd_check_with(None, inputs, seed, f)
}

pub fn fd_check_with(
    store: Option<&ParamStore>,
    inputs: &[Tensor],
    seed: u64,
    f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let graph = || match store {
        Some(s) => Graph::with_params(s),
        None => Graph::new(),
    };
    let mut r = rng(seed);
    let probe = {
        let mut g = graph();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).numel()
    };
    let weights = rand_tensor(&mut r, &[probe], 1.0);
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = graph();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let s = contract(&mut g, out, &weights).unwrap();
        g.value(s).item()
    };
    let mut g = graph();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let s = contract(&mut g, out, &weights).unwrap();
    g.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Every differentiable graph operation with representative inputs.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut r = rng(11);
    let mut t = |s: &[usize]| rand_tensor(&mut r, s, 1.0);
    let logits = t(&[5]);
    vec![
        (
            "matmul",
            vec![t(&[3, 4]), t(&[4, 2])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        ("transpose", vec![t(&[3, 4])], Box::new(|g, v| g.transpose(v[0]))),
        ("add", vec![t(&[3, 4]), t(&[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", vec![t(&[3, 4]), t(&[3, 4])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![t(&[3, 4])], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        (
            "linear",
            vec![t(&[3, 4]), t(&[4, 5]), t(&[5])],
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "linear_row",
            vec![t(&[4]), t(&[4, 2]), t(&[2])],
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "linear_nobias",
            vec![t(&[2, 4]), t(&[4, 3])],
            Box::new(|g, v| g.linear(v[0], v[1], None)),
        ),
        ("tanh", vec![t(&[3, 4])], Box::new(|g, v| Ok(g.tanh(v[0])))),
        ("gelu", vec![t(&[3, 4])], Box::new(|g, v| Ok(g.gelu(v[0])))),
        (
            "layer_norm",
            vec![t(&[3, 5]), t(&[5]), t(&[5])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "softmax_rows",
            vec![t(&[3, 4])],
            Box::new(|g, v| Ok(g.softmax_rows(v[0]))),
        ),
        (
            "log_softmax",
            vec![t(&[3, 4])],
            Box::new(|g, v| Ok(g.log_softmax(v[0]))),
        ),
        ("mean_rows", vec![t(&[3, 4])], Box::new(|g, v| g.mean_rows(v[0]))),
        (
            "concat_last_axis",
            vec![t(&[3]), t(&[2])],
            Box::new(|g, v| g.concat_last_axis(&[v[0], v[1]])),
        ),
        (
            "concat_rows",
            vec![t(&[2, 3]), t(&[2, 1])],
            Box::new(|g, v| g.concat_last_axis(&[v[0], v[1]])),
        ),
        (
            "select_rows",
            vec![t(&[4, 3])],
            Box::new(|g, v| g.select_rows(v[0], &[2, 0, 2])),
        ),
        (
            "stack_rows",
            vec![t(&[3]), t(&[3])],
            Box::new(|g, v| g.stack_rows(&[v[0], v[1], v[0]])),
        ),
        ("reshape", vec![t(&[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        (
            "embedding",
            vec![t(&[5, 3])],
            Box::new(|g, v| g.embedding(v[0], &[4, 1, 1, 0])),
        ),
        ("dot", vec![t(&[6]), t(&[6])], Box::new(|g, v| g.dot(v[0], v[1]))),
        (
            "cross_entropy",
            vec![logits],
            Box::new(|g, v| g.cross_entropy_from_logits(v[0], 3)),
        ),
        (
            "chain",
            vec![t(&[3, 4]), t(&[4, 4])],
            Box::new(|g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.tanh(h);
                let s = g.softmax_rows(h);
                let m = g.mul(s, v[0])?;
                g.mean_rows(m)
            }),
        ),
    ]
}

/// Attention layers checked through their inputs, weights held in a store.
pub fn attention_fd_cases() -> Vec<(&'static str, f64)> {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let p = MhaParams::new(&mut store, "m", 4, 2, &mut r).unwrap();
    let x = rand_tensor(&mut r, &[3, 4], 1.0);
    let kv = rand_tensor(&mut r, &[5, 4], 1.0);
    let cross = fd_check_with(Some(&store), &[x.clone(), kv], 1, &|g, v| mha(g, &p, v[0], v[1], v[1]));
    let own = fd_check_with(Some(&store), &[x], 2, &|g, v| self_attention(g, &p, v[0]));
    vec![("mha", cross), ("self_attention", own)]
}

/// Weights of one attention layer read out of a store.
pub fn head_weights(store: &ParamStore, p: &MhaParams) -> Vec<(Matrix, Matrix, Matrix)> {
    p.heads()
        .iter()
        .map(|h| {
            (
                to_matrix(store.get(h.q)),
                to_matrix(store.get(h.k)),
                to_matrix(store.get(h.v)),
            )
        })
        .collect()
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            c[i][j] = s;
        }
    }
    c
}

/// Loop-by-loop multi-head scaled dot-product attention.
#[allow(clippy::needless_range_loop)]
pub fn naive_mha(heads: &[(Matrix, Matrix, Matrix)], q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let mut out = vec![Vec::new(); q.len()];
    for (wq, wk, wv) in heads {
        let dh = wq[0].len();
        let (qq, kk, vv) = (naive_matmul(q, wq), naive_matmul(k, wk), naive_matmul(v, wv));
        for i in 0..q.len() {
            let mut scores: Vec<f64> = (0..k.len())
                .map(|j| (0..dh).map(|c| qq[i][c] * kk[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..k.len() {
                    acc += scores[j] / z * vv[j][c];
                }
                out[i].push(acc);
            }
        }
    }
    out
}

pub fn naive_mean_rows(x: &Matrix) -> Vec<f64> {
    let mut m = vec![0.0; x[0].len()];
    for row in x {
        for (a, b) in m.iter_mut().zip(row) {
            *a += b;
        }
    }
    m.iter().map(|v| v / x.len() as f64).collect()
}

pub fn naive_duma(
    c: &[(Matrix, Matrix, Matrix)],
    qa: &[(Matrix, Matrix, Matrix)],
    h_c: &Matrix,
    h_qa: &Matrix,
) -> Vec<f64> {
    let mut a = naive_mean_rows(&naive_mha(c, h_c, h_qa, h_qa));
    a.extend(naive_mean_rows(&naive_mha(qa, h_qa, h_c, h_c)));
    a
}

/// A handful of turns, a tiny graph and a fixed pipeline for whole-model checks.
pub struct Fixture {
    pub store: ParamStore,
    pub params: KktParams,
    pub vocab: Vocab,
    pub kg: KnowledgeStore,
    pub ex: DialogueExample,
    pub pipe: ExamplePipeline,
}

pub fn fixture_example() -> DialogueExample {
    DialogueExample {
        id: "fixture#0".into(),
        turns: vec![
            "M: i left my bike on the street .".into(),
            "W: the weather is lovely today .".into(),
            "M: my hat is red .".into(),
        ],
        question: "where can the bike usually be found ?".into(),
        options: vec!["street".into(), "kitchen".into(), "beach".into()],
        gold: 0,
    }
}

pub fn fixture_triples() -> Vec<KnowledgeTriple> {
    let t = |r: &str, h: &str, tl: &str, w: f64| KnowledgeTriple {
        relation: r.into(),
        head: h.into(),
        tail: tl.into(),
        weight: w,
    };
    vec![
        t("atlocation", "bike", "street", 2.0),
        t("atlocation", "spoon", "kitchen", 2.0),
        t("atlocation", "towel", "beach", 1.5),
        t("relatedto", "weather", "holiday", 1.2),
    ]
}

pub fn fixture(ablation: Ablation, seed: u64) -> Fixture {
    let ex = fixture_example();
    let surface = SurfaceTable::builtin();
    let mut texts: Vec<String> = ex.turns.clone();
    texts.push(ex.question.clone());
    texts.extend(ex.options.iter().cloned());
    let probe = KnowledgeStore::from_triples(fixture_triples(), 0.0, None, &surface);
    texts.extend(probe.ids().map(|id| probe.fact(id).text.clone()));
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let kg = KnowledgeStore::from_triples(fixture_triples(), 0.0, Some(&vocab), &surface);
    let tagger = PosTagger::builtin();
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        heads: 2,
        layers: 1,
        d_ff: 16,
        max_len: 64,
    };
    let params = KktParams::new(&mut store, cfg, ablation, &mut rng(seed)).unwrap();
    let knowledge = ablation.uses_knowledge();
    let ids = |texts: &[&str]| -> Vec<_> {
        if knowledge {
            kg.retrieve(texts, 3, &tagger).into_iter().map(|r| r.id).collect()
        } else {
            Vec::new()
        }
    };
    let turn_refs: Vec<&str> = ex.turns.iter().map(String::as_str).collect();
    let ck = ids(&turn_refs);
    let kt = if ablation.uses_key_turns() {
        vec![0, 2]
    } else {
        Vec::new()
    };
    let options = (0..ex.options.len())
        .map(|j| OptionPipeline {
            key_turns: kt.clone(),
            qak: ids(&[ex.qa_text(j).as_str()]),
        })
        .collect();
    Fixture {
        store,
        params,
        vocab,
        kg,
        ex,
        pipe: ExamplePipeline { ck, options },
    }
}

impl Fixture {
    pub fn loss(&self, store: &ParamStore) -> f64 {
        let mut g = Graph::with_params(store);
        let mut facts = FactSource::live(&self.kg);
        let logits = example_logits(&mut g, &self.params, &self.vocab, &self.ex, &self.pipe, &mut facts).unwrap();
        let loss = g.cross_entropy_from_logits(logits, self.ex.gold).unwrap();
        g.value(loss).item()
    }

    pub fn analytic_grads(&self) -> HashMap<usize, Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let mut facts = FactSource::live(&self.kg);
        let logits = example_logits(&mut g, &self.params, &self.vocab, &self.ex, &self.pipe, &mut facts).unwrap();
        let loss = g.cross_entropy_from_logits(logits, self.ex.gold).unwrap();
        g.backward(loss).unwrap();
        g.param_grads().map(|(id, gr)| (id.index(), gr.to_vec())).collect()
    }

    /// Relative error per parameter tensor; `sample` limits how many
    /// entries of each tensor are perturbed (all when `None`).
    pub fn fd_check(&self, sample: Option<usize>, seed: u64) -> Vec<(String, f64)> {
        let analytic = self.analytic_grads();
        let mut r = rng(seed);
        let ids: Vec<_> = self.store.ids().collect();
        let mut out = Vec::new();
        for id in ids {
            let n = self.store.get(id).numel();
            let grad = analytic.get(&id.index()).cloned().unwrap_or_else(|| vec![0.0; n]);
            let entries: Vec<usize> = match sample {
                Some(s) if s < n => (0..s).map(|_| r.gen_range(0..n)).collect(),
                _ => (0..n).collect(),
            };
            let mut a = Vec::with_capacity(entries.len());
            let mut num = Vec::with_capacity(entries.len());
            for &e in &entries {
                let mut plus = self.store.clone();
                plus.data_mut(id)[e] += FD_STEP;
                let mut minus = self.store.clone();
                minus.data_mut(id)[e] -= FD_STEP;
                num.push((self.loss(&plus) - self.loss(&minus)) / (2.0 * FD_STEP));
                a.push(grad[e]);
            }
            out.push((self.store.name(id).to_string(), rel_err(&a, &num)));
        }
        out
    }
}

fn vector(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn naive_layer_norm(x: &Matrix, g: &[f64], b: &[f64]) -> Matrix {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn naive_affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    naive_matmul(x, w)
        .into_iter()
        .map(|row| row.iter().zip(b).map(|(v, c)| v + c).collect())
        .collect()
}

fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add_rows(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Token plus position embeddings through post-norm blocks, written out
/// with plain loops.
pub fn naive_encode(store: &ParamStore, p: &kkt_core::attention::EncoderParams, ids: &[usize]) -> Matrix {
    let tok = to_matrix(store.get(p.tok_emb));
    let pos = to_matrix(store.get(p.pos_emb));
    let mut x: Matrix = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| tok[id].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    for b in &p.blocks {
        let a = naive_mha(&head_weights(store, &b.attn), &x, &x, &x);
        x = naive_layer_norm(
            &add_rows(&x, &a),
            &vector(store.get(b.ln1_g)),
            &vector(store.get(b.ln1_b)),
        );
        let h = naive_affine(&x, &to_matrix(store.get(b.ff1_w)), &vector(store.get(b.ff1_b)));
        let h: Matrix = h.into_iter().map(|r| r.into_iter().map(naive_gelu).collect()).collect();
        let f = naive_affine(&h, &to_matrix(store.get(b.ff2_w)), &vector(store.get(b.ff2_b)));
        x = naive_layer_norm(
            &add_rows(&x, &f),
            &vector(store.get(b.ln2_g)),
            &vector(store.get(b.ln2_b)),
        );
    }
    x
}

pub fn tiny_config(ablation: Ablation, seed: u64) -> kkt_core::harness::RunConfig {
    kkt_core::harness::RunConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        d_ff: 16,
        max_len: 96,
        k: 2,
        p: 8,
        batch: 8,
        warmup: 10,
        epochs: 1,
        nli_epochs: 1,
        nli_lr: 3e-3,
        seed,
        ablation,
        ..Default::default()
    }
}

pub fn synth(
    seed: u64,
    n: usize,
    mode: kkt_core::harness::SynthMode,
    split: kkt_core::harness::Split,
) -> Vec<DialogueExample> {
    kkt_core::harness::gen_synthetic(seed, n, mode, split)
        .unwrap()
        .dataset
        .examples()
        .unwrap()
}

pub fn world() -> kkt_core::harness::KgInput {
    kkt_core::harness::KgInput {
        triples: kkt_core::harness::world_kg(),
        surface: SurfaceTable::builtin(),
    }
}

/// An untrained model whose vocabulary covers `examples` and the world graph.
pub fn untrained(cfg: &kkt_core::harness::RunConfig, examples: &[DialogueExample]) -> kkt_core::harness::Model {
    let kg = world();
    let vocab = kkt_core::harness::build_vocab(examples, &[], &kg.surface);
    kkt_core::harness::Model::init(cfg, vocab).unwrap()
}

pub fn pipelines(
    model: &kkt_core::harness::Model,
    examples: &[DialogueExample],
    kg: Option<&KnowledgeStore>,
) -> Vec<ExamplePipeline> {
    let tagger = PosTagger::builtin();
    kkt_core::harness::PipelineContext {
        store: &model.store,
        nli: model.nli.as_ref(),
        vocab: &model.vocab,
        kg,
        tagger: &tagger,
        k: model.config.k,
        p: model.config.p,
        ablation: model.params.ablation,
    }
    .build_all(examples)
    .unwrap()
}

/// Reorders the options (and their pipeline entries) by `perm`: new option
/// `i` is old option `perm[i]`.
pub fn permute(ex: &DialogueExample, pipe: &ExamplePipeline, perm: &[usize]) -> (DialogueExample, ExamplePipeline) {
    let mut e = ex.clone();
    e.options = perm.iter().map(|&i| ex.options[i].clone()).collect();
    e.gold = perm.iter().position(|&i| i == ex.gold).unwrap();
    let mut p = pipe.clone();
    p.options = perm.iter().map(|&i| pipe.options[i].clone()).collect();
    (e, p)
}
