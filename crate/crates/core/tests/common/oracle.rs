//! Random instances compared against the loop oracles, plus a scan-and-sort
//! retrieval reference.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;
use kkt_core::knowledge::TripleId;
use kkt_core::model::{duma, refine, EncodedPair};

pub fn random_dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    let heads = r.gen_range(1..=3);
    (heads * r.gen_range(1..=3), heads)
}

pub fn rand_rows(r: &mut ChaCha8Rng, d: usize) -> Tensor {
    let n = r.gen_range(1..=8);
    rand_tensor(r, &[n, d], 2.0)
}

pub fn small_params(r: &mut ChaCha8Rng, d: usize, heads: usize) -> (ParamStore, KktParams) {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        vocab_size: 6,
        d_model: d,
        heads,
        layers: 1,
        d_ff: 2,
        max_len: 8,
    };
    let params = KktParams::new(&mut store, cfg, Ablation::Full, r).unwrap();
    (store, params)
}

fn random_spans(r: &mut ChaCha8Rng, rows: usize) -> Vec<Range<usize>> {
    let turns = r.gen_range(1..=rows.min(4));
    let mut cuts: Vec<usize> = (1..rows).collect();
    cuts.sort_by_key(|_| r.gen::<u32>());
    let mut cuts: Vec<usize> = cuts.into_iter().take(turns - 1).collect();
    cuts.sort_unstable();
    let mut spans = Vec::new();
    let mut start = 0;
    for c in cuts.into_iter().chain([rows]) {
        spans.push(start..c);
        start = c;
    }
    spans
}

fn row_gap(got: &Tensor, want: Vec<f64>) -> f64 {
    max_abs_diff(&vec![got.data().to_vec()], &vec![want])
}

/// Largest deviation of `mha` from the loops over `n` random instances.
pub fn mha_gap(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (d, heads) = random_dims(&mut r);
        let mut store = ParamStore::new();
        let p = MhaParams::new(&mut store, "a", d, heads, &mut r).unwrap();
        let (nq, nk) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let q = rand_tensor(&mut r, &[nq, d], 2.0);
        let k = rand_tensor(&mut r, &[nk, d], 2.0);
        let v = rand_tensor(&mut r, &[nk, d], 2.0);
        let mut g = Graph::with_params(&store);
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = mha(&mut g, &p, qv, kv, vv).unwrap();
        let want = naive_mha(
            &head_weights(&store, &p),
            &to_matrix(&q),
            &to_matrix(&k),
            &to_matrix(&v),
        );
        worst = worst.max(max_abs_diff(&to_matrix(g.value(out)), &want));
    }
    worst
}

pub fn self_attention_gap(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (d, heads) = random_dims(&mut r);
        let mut store = ParamStore::new();
        let p = MhaParams::new(&mut store, "s", d, heads, &mut r).unwrap();
        let x = rand_rows(&mut r, d);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let out = self_attention(&mut g, &p, xv).unwrap();
        let m = to_matrix(&x);
        let want = naive_mha(&head_weights(&store, &p), &m, &m, &m);
        worst = worst.max(max_abs_diff(&to_matrix(g.value(out)), &want));
    }
    worst
}

pub fn duma_gap(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (d, heads) = random_dims(&mut r);
        let (store, params) = small_params(&mut r, d, heads);
        let hc = rand_rows(&mut r, d);
        let hqa = rand_rows(&mut r, d);
        let mut g = Graph::with_params(&store);
        let (c, qa) = (g.constant(hc.clone()), g.constant(hqa.clone()));
        let out = duma(&mut g, &params, c, qa).unwrap();
        assert_eq!(g.shape(out), &[2 * d]);
        let want = naive_duma(
            &head_weights(&store, &params.duma_c),
            &head_weights(&store, &params.duma_qa),
            &to_matrix(&hc),
            &to_matrix(&hqa),
        );
        worst = worst.max(row_gap(g.value(out), want));
    }
    worst
}

/// Covers empty key-turn sets and missing knowledge on either side.
pub fn refine_gap(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..n {
        let (d, heads) = random_dims(&mut r);
        let (store, params) = small_params(&mut r, d, heads);
        let lc = r.gen_range(1..=8);
        let hc = rand_tensor(&mut r, &[lc, d], 2.0);
        let hqa = rand_rows(&mut r, d);
        let spans = random_spans(&mut r, lc);
        let key_turns: Vec<usize> = (0..spans.len()).filter(|_| r.gen_bool(0.5)).collect();
        let ck = (case % 4 != 0).then(|| rand_rows(&mut r, d));
        let qak = (case % 5 != 0).then(|| rand_rows(&mut r, d));

        let mut g = Graph::with_params(&store);
        let enc = EncodedPair {
            h_c: g.constant(hc.clone()),
            h_qa: g.constant(hqa.clone()),
            turn_spans: spans.clone(),
            input_ids: Vec::new(),
            truncated: false,
        };
        let ckv = ck.clone().map(|t| g.constant(t));
        let qakv = qak.clone().map(|t| g.constant(t));
        let out = refine(&mut g, &params, &enc, &key_turns, ckv, qakv).unwrap();

        let (mc, mqa) = (to_matrix(&hc), to_matrix(&hqa));
        let rows: Vec<usize> = key_turns.iter().flat_map(|&t| spans[t].clone()).collect();
        let want_kt = if rows.is_empty() {
            mc.clone()
        } else {
            let hkt: Matrix = rows.iter().map(|&i| mc[i].clone()).collect();
            naive_mha(&head_weights(&store, &params.refine_kt), &mc, &hkt, &hkt)
        };
        let attend = |p: &MhaParams, x: &Matrix, kv: &Option<Tensor>| match kv {
            Some(t) => {
                let m = to_matrix(t);
                naive_mha(&head_weights(&store, p), x, &m, &m)
            }
            None => x.clone(),
        };
        let want_ck = attend(&params.refine_ck, &mc, &ck);
        let want_qak = attend(&params.refine_qak, &mqa, &qak);
        assert_eq!(out.kt_identity, rows.is_empty());
        worst = worst
            .max(max_abs_diff(&to_matrix(g.value(out.h_c_kt)), &want_kt))
            .max(max_abs_diff(&to_matrix(g.value(out.h_c_k)), &want_ck))
            .max(max_abs_diff(&to_matrix(g.value(out.h_qa_k)), &want_qak));
    }
    worst
}

/// Scans every stored triple, counts matched query words and sorts the hits.
pub fn brute_force_retrieve(store: &KnowledgeStore, texts: &[String], p: usize, tagger: &PosTagger) -> Vec<TripleId> {
    let query: BTreeSet<String> = texts.iter().flat_map(|t| tagger.content_words(t)).collect();
    let mut hits: Vec<(TripleId, f64, usize, String)> = Vec::new();
    for id in store.ids() {
        let m = store.words(id).iter().filter(|w| query.contains(*w)).count();
        if m > 0 {
            hits.push((id, store.triple(id).weight, m, store.fact(id).text.clone()));
        }
    }
    hits.sort_by(|a, b| {
        if a.1 != b.1 {
            return if a.1 > b.1 { Ordering::Less } else { Ordering::Greater };
        }
        if a.2 != b.2 {
            return b.2.cmp(&a.2);
        }
        if a.3 != b.3 {
            return a.3.cmp(&b.3);
        }
        a.0 .0.cmp(&b.0 .0)
    });
    hits.into_iter().take(p).map(|h| h.0).collect()
}

pub const KG_WORDS: [&str; 10] = [
    "bike", "street", "kitchen", "spoon", "beach", "towel", "garden", "music", "holiday", "weather",
];
pub const KG_RELATIONS: [&str; 4] = ["atlocation", "relatedto", "usedfor", "isa"];
pub const FILLER: [&str; 6] = ["the", "is", "on", "a", "my", "and"];

/// A random store over a small word pool and a query against it.
pub fn random_retrieval_case(r: &mut ChaCha8Rng) -> (KnowledgeStore, Vec<String>, usize) {
    let triples: Vec<KnowledgeTriple> = (0..r.gen_range(0..40))
        .map(|_| KnowledgeTriple {
            relation: KG_RELATIONS[r.gen_range(0..4)].into(),
            head: KG_WORDS[r.gen_range(0..10)].into(),
            tail: KG_WORDS[r.gen_range(0..10)].into(),
            weight: f64::from(r.gen_range(1u8..=4)) * 0.5,
        })
        .collect();
    let texts: Vec<String> = (0..r.gen_range(1..4))
        .map(|_| {
            (0..r.gen_range(1..6))
                .map(|_| {
                    if r.gen_bool(0.5) {
                        KG_WORDS[r.gen_range(0..10)]
                    } else {
                        FILLER[r.gen_range(0..6)]
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let store = KnowledgeStore::from_triples(triples, 0.0, None, &SurfaceTable::builtin());
    (store, texts, r.gen_range(0..12))
}
