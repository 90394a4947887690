mod common;

use std::path::Path;

use metalink::error::Error;
use metalink::fixture::{toy_train_config, toy_world, FixtureConfig};
use metalink::kb::{load_documents, load_entities, load_mentions, Document, Provenance};
use metalink::meta::{train_model, train_pipeline, PipelineInputs, TrainConfig};

fn quick_config() -> TrainConfig {
    let mut c = toy_train_config(4);
    c.meta.steps = 40;
    c
}

#[test]
fn pipeline_manifest_counts_on_the_fixture() {
    let f = toy_world(&FixtureConfig::default());
    let inputs = PipelineInputs {
        kb: &f.kb,
        target_documents: &f.documents,
        seeds: &f.seeds,
        source_pairs: &[],
        dev: Some(&f.test),
    };
    let (pairs, out) = train_pipeline(inputs, &quick_config(), None).unwrap();
    assert_eq!(pairs.len(), 800);
    let m = &out.manifest;
    assert_eq!(m.get("count.synthetic"), Some("800"));
    assert_eq!(m.get("count.seed_set"), Some("50"));
    assert_eq!(m.get("count.source"), Some("0"));
    assert_eq!(m.get("count.provenance.bad"), Some("0"));
    let rewritten: usize = m.get("count.provenance.rewritten").unwrap().parse().unwrap();
    let exact: usize = m.get("count.provenance.exact").unwrap().parse().unwrap();
    assert_eq!(rewritten + exact, 800);
    assert_eq!(rewritten, pairs.iter().filter(|p| p.example.provenance == Provenance::Rewritten).count());
    assert_eq!(m.get("steps"), Some("40"));
    assert_eq!(m.get("rng_seed"), Some("4"));
    assert!(m.get("dev.u_acc").is_some());
    assert_eq!(out.weights.len(), 800);
    assert_eq!(out.biencoder_weights.len(), 800);
    for (w, p) in out.weights.iter().zip(&pairs) {
        assert_eq!(w.pair_id, p.example.id);
        assert!(w.cumulative_weight >= 0.0);
    }
}

#[test]
fn source_pairs_join_the_synthetic_pool() {
    let f = toy_world(&FixtureConfig::default());
    let source: Vec<_> = f
        .seeds
        .iter()
        .take(10)
        .cloned()
        .map(|mut s| {
            s.id = format!("src{}", s.id);
            s
        })
        .collect();
    let inputs = PipelineInputs {
        kb: &f.kb,
        target_documents: &f.documents,
        seeds: &f.seeds,
        source_pairs: &source,
        dev: None,
    };
    let (_, out) = train_pipeline(inputs, &quick_config(), None).unwrap();
    assert_eq!(out.manifest.get("count.synthetic"), Some("810"));
    assert_eq!(out.manifest.get("count.provenance.seed"), Some("10"));
    assert_eq!(out.weights.len(), 810);
}

#[test]
fn no_exact_match_means_no_synthetic_pairs() {
    let f = toy_world(&FixtureConfig::default());
    let docs = vec![Document {
        id: "x".into(),
        text: "nothing here names an entity".into(),
        domain: "toy".into(),
    }];
    let inputs = PipelineInputs {
        kb: &f.kb,
        target_documents: &docs,
        seeds: &f.seeds,
        source_pairs: &[],
        dev: None,
    };
    let err = train_pipeline(inputs, &quick_config(), None).unwrap_err();
    assert!(matches!(err, Error::NoSyntheticPairs));
    assert_eq!(err.to_string(), "no synthetic pairs generated");
    assert!(matches!(train_model(&[], &f.seeds, &f.kb, &quick_config()), Err(Error::NoSyntheticPairs)));
}

#[test]
fn disabling_rewrite_keeps_every_pair_exact() {
    let f = toy_world(&FixtureConfig::default());
    let mut config = quick_config();
    config.disable_rewrite = true;
    let inputs = PipelineInputs {
        kb: &f.kb,
        target_documents: &f.documents,
        seeds: &f.seeds,
        source_pairs: &[],
        dev: None,
    };
    let (pairs, out) = train_pipeline(inputs, &config, None).unwrap();
    assert!(pairs.iter().all(|p| p.example.provenance == Provenance::Exact));
    assert_eq!(out.manifest.get("count.provenance.exact"), Some("800"));
}

#[test]
fn packaged_fixture_matches_the_generator() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy");
    let f = toy_world(&FixtureConfig::default());
    let kb = load_entities(&dir.join("entities.jsonl")).unwrap();
    assert_eq!(kb.entities(), f.kb.entities());
    assert_eq!(load_documents(&dir.join("documents.jsonl")).unwrap(), f.documents);
    assert_eq!(load_mentions(&dir.join("seed.jsonl"), &kb).unwrap(), f.seeds);
    assert_eq!(load_mentions(&dir.join("test.jsonl"), &kb).unwrap(), f.test);
}
