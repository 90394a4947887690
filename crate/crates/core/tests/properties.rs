mod common;

use metalink::encoder::{batch_loss_grad, Batch, EncoderFlags, EntityIndex, PairFeatures};
use metalink::eval::{evaluate, recall_at_k, rouge1_f1};
use metalink::fixture::{toy_train_config, toy_world, FixtureConfig};
use metalink::kb::{categorize_overlap, load_entities, save_entities, tokenize, Entity, OverlapCategory};
use metalink::meta::{clamp_normalize, train_model};
use metalink::selftest::random_instance;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn word() -> impl Strategy<Value = String> {
    "[a-z0-9]{1,6}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tokenize_is_idempotent(text in "\\PC{0,60}") {
        let toks = tokenize(&text);
        prop_assert_eq!(tokenize(&toks.join(" ")), toks.clone());
        for t in &toks {
            prop_assert!(!t.is_empty());
            prop_assert_eq!(t.to_lowercase(), t.clone());
            prop_assert!(t.chars().all(char::is_alphanumeric));
        }
    }

    #[test]
    fn identical_text_is_high_overlap(words in prop::collection::vec(word(), 1..5)) {
        let s = words.join(" ");
        prop_assert_eq!(categorize_overlap(&s, &s.to_uppercase()).unwrap(), OverlapCategory::HighOverlap);
    }

    #[test]
    fn strict_title_windows_are_ambiguous(words in prop::collection::vec(word(), 2..6), a in 0usize..6, len in 1usize..6) {
        let a = a % words.len();
        let len = len.min(words.len() - a);
        prop_assume!(len < words.len());
        let mention = words[a..a + len].join(" ");
        let title = words.join(" ");
        let cat = categorize_overlap(&mention, &title).unwrap();
        prop_assert_eq!(cat, OverlapCategory::AmbiguousSubstring);
    }

    #[test]
    fn disjoint_mentions_are_low_overlap(m in prop::collection::vec("[a-m]{2,5}", 1..4), t in prop::collection::vec("[n-z]{2,5}", 1..4)) {
        prop_assert_eq!(categorize_overlap(&m.join(" "), &t.join(" ")).unwrap(), OverlapCategory::LowOverlap);
    }

    #[test]
    fn entity_files_round_trip(titles in prop::collection::vec("[A-Za-z ]{1,12}", 1..8)) {
        let entities: Vec<Entity> = titles
            .iter()
            .enumerate()
            .filter(|(_, t)| !tokenize(t).is_empty())
            .map(|(i, t)| Entity { id: format!("e{i}"), title: t.clone(), description: format!("about {t}"), domain: "d".into() })
            .collect();
        prop_assume!(!entities.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_entities(&a, &entities).unwrap();
        let kb = load_entities(&a).unwrap();
        save_entities(&b, kb.entities()).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        prop_assert_eq!(kb.entities(), &entities[..]);
    }

    #[test]
    fn clamp_normalize_laws(raw in prop::collection::vec(-10.0f64..10.0, 0..16), c in 0.001f64..1000.0) {
        let w = clamp_normalize(&raw);
        prop_assert_eq!(w.len(), raw.len());
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let sum: f64 = w.iter().sum();
        if raw.iter().any(|&x| x > 0.0) {
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            let scaled: Vec<f64> = raw.iter().map(|x| c * x).collect();
            for (a, b) in clamp_normalize(&scaled).iter().zip(&w) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        } else {
            prop_assert_eq!(sum, 0.0);
        }
    }

    #[test]
    fn rouge_is_symmetric_and_bounded(a in "[a-e ]{0,20}", b in "[a-e ]{0,20}") {
        let (x, y) = (rouge1_f1(&a, &b), rouge1_f1(&b, &a));
        prop_assert!((x - y).abs() <= 1e-15);
        prop_assert!((0.0..=1.0).contains(&x));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_is_linear_in_weights(seed in 0u64..1000, w1 in prop::collection::vec(0.0f64..2.0, 5), w2 in prop::collection::vec(0.0f64..2.0, 5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 5, 3, 0.5).unwrap();
        let items: Vec<&PairFeatures> = inst.features.iter().collect();
        let flags = EncoderFlags::default();
        let g = |w: Vec<f64>| batch_loss_grad(&inst.params, flags, &Batch::new(items.clone(), w).unwrap()).unwrap();
        let both: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let mut diff = g(both);
        diff.add_scaled(&g(w1), -1.0);
        diff.add_scaled(&g(w2), -1.0);
        prop_assert!(diff.norm_sq().sqrt() <= 1e-12);
    }

    #[test]
    fn topk_is_a_prefix_of_the_full_ranking(seed in 0u64..1000, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 8, 3, 0.5).unwrap();
        let all: Vec<usize> = (0..inst.kb.len()).collect();
        let index = EntityIndex::build(&inst.params, EncoderFlags::default(), &inst.kb, &all);
        let q = metalink::encoder::encode_mention(&inst.params, &inst.examples[0]);
        let full = index.retrieve_topk(&q, all.len());
        let top = index.retrieve_topk(&q, k);
        prop_assert_eq!(&full[..k], &top[..]);
        for w in full.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].entity_id < w[1].entity_id));
        }
    }
}

#[test]
fn recall_is_monotone_in_k_and_reports_keep_the_identity() {
    let f = toy_world(&FixtureConfig::default());
    let mut cfg = toy_train_config(3);
    cfg.meta.steps = 60;
    let out = train_model(&f.seeds, &f.seeds, &f.kb, &cfg).unwrap();
    let mut last = 0.0;
    for k in [1, 2, 4, 8, 16, 64, 200] {
        let r = recall_at_k(&out.model, &f.test, &f.kb, k).unwrap();
        assert!(r >= last, "recall fell from {last} to {r} at k={k}");
        last = r;
        if let Ok(report) = evaluate(&out.model, &f.test, &f.kb, k) {
            assert!((report.u_acc - report.recall_at_k * report.n_acc).abs() <= 1e-12);
        }
    }
    assert_eq!(last, 1.0);
}
