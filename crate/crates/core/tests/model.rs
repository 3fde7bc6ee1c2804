mod common;

use rand::seq::SliceRandom;

use common::*;
use kkt_core::harness::{build_vocab, KgInput, Model, Split, SynthMode};
use kkt_core::model::{checkpoint, predict, Ablation, FactSource};
use kkt_core::KktError;

fn equivariance(ablation: Ablation, n: usize, seed: u64) {
    let examples = synth(seed, n, SynthMode::Mixed, Split::Dev);
    let model = untrained(&tiny_config(ablation, seed), &examples);
    let kg = world().store(model.config.threshold, &model.vocab);
    let pipes = pipelines(&model, &examples, Some(&kg));
    let mut r = rng(seed);
    for (ex, pipe) in examples.iter().zip(&pipes) {
        let mut perm: Vec<usize> = (0..ex.options.len()).collect();
        perm.shuffle(&mut r);
        let (pe, pp) = permute(ex, pipe, &perm);
        let a = predict(
            &model.store,
            &model.params,
            &model.vocab,
            ex,
            pipe,
            &mut FactSource::live(&kg),
        )
        .unwrap();
        let b = predict(
            &model.store,
            &model.params,
            &model.vocab,
            &pe,
            &pp,
            &mut FactSource::live(&kg),
        )
        .unwrap();
        for (i, &old) in perm.iter().enumerate() {
            assert_eq!(
                b.logits[i].to_bits(),
                a.logits[old].to_bits(),
                "{} under {perm:?}",
                ex.id
            );
        }
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert_eq!(perm[b.index], a.index);
    }
}

#[test]
fn option_permutation_is_equivariant() {
    equivariance(Ablation::Full, 200, 1);
}

#[test]
fn every_ablation_is_equivariant() {
    for (i, a) in [Ablation::Kt, Ablation::K, Ablation::Base, Ablation::KeyturnsOnly]
        .into_iter()
        .enumerate()
    {
        equivariance(a, 20, 10 + i as u64);
    }
}

#[test]
fn identical_options_score_identically() {
    let mut examples = synth(4, 5, SynthMode::KnowledgeSignal, Split::Train);
    for ex in &mut examples {
        let o = ex.options[ex.gold].clone();
        ex.options = vec![o.clone(), o.clone(), o];
        ex.gold = 0;
    }
    let model = untrained(&tiny_config(Ablation::Full, 4), &examples);
    let kg = world().store(1.0, &model.vocab);
    for (ex, pipe) in examples.iter().zip(pipelines(&model, &examples, Some(&kg))) {
        let p = predict(
            &model.store,
            &model.params,
            &model.vocab,
            ex,
            &pipe,
            &mut FactSource::live(&kg),
        )
        .unwrap();
        assert!(p.logits.iter().all(|l| l.to_bits() == p.logits[0].to_bits()));
        assert_eq!(p.index, 0);
        assert!((p.loss - 3f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let examples = synth(2, 12, SynthMode::Mixed, Split::Train);
    let model = untrained(&tiny_config(Ablation::Full, 2), &examples);
    let bytes = model.checkpoint_bytes().unwrap();
    let (tag, store) = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(tag, Ablation::Full);
    assert_eq!(checkpoint::to_bytes(tag, &store).unwrap(), bytes);
    for ((na, ta), (nb, tb)) in model.store.iter().zip(store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = model.save(dir.path(), "init").unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.hash().unwrap(), model.hash().unwrap());
    assert_eq!(back.vocab, model.vocab);
    assert_eq!(back.config, model.config);
    assert!(back.nli.is_some());
    let kg = world().store(1.0, &model.vocab);
    let pipes = pipelines(&model, &examples, Some(&kg));
    for (ex, pipe) in examples.iter().zip(&pipes) {
        let a = predict(
            &model.store,
            &model.params,
            &model.vocab,
            ex,
            pipe,
            &mut FactSource::live(&kg),
        )
        .unwrap();
        let b = predict(
            &back.store,
            &back.params,
            &back.vocab,
            ex,
            pipe,
            &mut FactSource::live(&kg),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let examples = synth(2, 3, SynthMode::Mixed, Split::Train);
    let bytes = untrained(&tiny_config(Ablation::Base, 2), &examples)
        .checkpoint_bytes()
        .unwrap();
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert!(matches!(checkpoint::from_bytes(&magic), Err(KktError::Checkpoint(_))));
}

#[test]
fn ablation_tags_gate_rewiring() {
    let examples = synth(2, 3, SynthMode::Mixed, Split::Train);
    let full = untrained(&tiny_config(Ablation::Full, 2), &examples);
    assert!(full.with_ablation(Ablation::KeyturnsOnly).is_ok());
    for a in [Ablation::Kt, Ablation::K, Ablation::Base] {
        assert!(matches!(full.with_ablation(a), Err(KktError::Config(_))), "{a}");
    }
    let kt = untrained(&tiny_config(Ablation::Kt, 2), &examples);
    assert!(kt.with_ablation(Ablation::Full).is_err());
}

#[test]
fn every_ablation_starts_from_the_same_shared_weights() {
    let examples = synth(6, 4, SynthMode::Mixed, Split::Train);
    let kg = KgInput { ..world() };
    let vocab = build_vocab(&examples, &[], &kg.surface);
    let models: Vec<Model> = Ablation::ALL
        .iter()
        .map(|&a| Model::init(&tiny_config(a, 6), vocab.clone()).unwrap())
        .collect();
    let enc = |m: &Model| m.store.get(m.store.find("enc.tok_emb").unwrap()).clone();
    for m in &models[1..] {
        assert_eq!(enc(m), enc(&models[0]));
    }
}
