//! The acceptance suite: one PASS/FAIL line per criterion, nonzero exit if
//! any fails. Runs without the libtest harness so the lines always print.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{fd_floor, reference_loss, rel_err, NoisyWorld};
use metalink::encoder::{batch_loss_grad, Batch, EncoderFlags, PairFeatures, Side};
use metalink::eval::{evaluate, name_matching_baseline, rouge1_f1, selection_ratio_experiment, unnormalized_accuracy, EvalReport};
use metalink::fixture::toy_train_config;
use metalink::io::to_jsonl;
use metalink::kb::{tokenize, Document, Provenance};
use metalink::meta::{clamp_normalize, meta_backward, meta_forward, seed_grad, train_model, train_pipeline, BiEncoderObjective, Objective, PipelineInputs, Reweighting};
use metalink::selftest::random_instance;
use metalink::weaksup::{build_denoising_corpus, demask, exact_match, filter_seed};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    check(t < limit, || format!("took {t:.2?}, limit {limit:?}"))?;
    Ok(t)
}

fn meta_gradient_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let flags = EncoderFlags::default();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let instances = 25;
    for _ in 0..instances {
        let dim = rng.gen_range(2..=8);
        let n = rng.gen_range(4..=8);
        let inst = random_instance(&mut rng, n, dim, 1.0).map_err(|e| e.to_string())?;
        let (syn, seed) = inst.features.split_at(rng.gen_range(2..n - 1));
        let syn_obj = BiEncoderObjective { data: syn, flags };
        let seed_obj = BiEncoderObjective { data: seed, flags };
        let syn_idx: Vec<usize> = (0..syn.len()).collect();
        let seed_idx: Vec<usize> = (0..seed.len()).collect();
        let (alpha, eta) = (rng.gen_range(0.2..1.0), rng.gen_range(0.5..2.0));
        let (look, grads) = meta_forward(&syn_obj, &inst.params, &syn_idx, alpha).map_err(|e| e.to_string())?;
        let g_seed = seed_grad(&seed_obj, &look, &seed_idx).map_err(|e| e.to_string())?;
        let raw = meta_backward(&grads, &g_seed, alpha, eta, BiEncoderObjective::grad_dot);
        let seed_refs: Vec<&PairFeatures> = seed.iter().collect();
        let seed_w = vec![1.0 / seed.len() as f64; seed.len()];
        for (j, g) in grads.iter().enumerate() {
            // Explicit one-step update, seed loss from the independent oracle.
            let at = |wj: f64| {
                let mut p = inst.params.clone();
                g.apply(&mut p, -alpha * wj);
                reference_loss(&p, flags, &seed_refs, &seed_w)
            };
            let fd = -eta * (at(h) - at(-h)) / (2.0 * h);
            let floor = eta * fd_floor(at(0.0), h, 1e-5);
            worst = worst.max(rel_err(fd, raw[j], floor));
        }
    }
    check(worst <= 1e-5, || format!("max relative error {worst:.3e} > 1e-5"))?;
    let t = within(Duration::from_secs(5), start)?;
    Ok(format!("{instances} instances, max relative error {worst:.2e}, {t:.2?}"))
}

fn loss_gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-4;
    let mut summary = Vec::new();
    for paper_exact_loss in [false, true] {
        let flags = EncoderFlags {
            paper_exact_loss,
            ..EncoderFlags::default()
        };
        let inst = random_instance(&mut rng, 6, 5, 0.5).map_err(|e| e.to_string())?;
        let items: Vec<&PairFeatures> = inst.features.iter().collect();
        let weights: Vec<f64> = (0..items.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
        let batch = Batch::new(items.clone(), weights.clone()).map_err(|e| e.to_string())?;
        let grad = batch_loss_grad(&inst.params, flags, &batch).map_err(|e| e.to_string())?;
        let rows: Vec<(Side, u32)> = [Side::Mention, Side::Entity]
            .into_iter()
            .flat_map(|s| grad.rows(s).map(move |(b, _)| (s, b)).collect::<Vec<_>>())
            .collect();
        let mut worst = 0.0f64;
        let coords = 30;
        for _ in 0..coords {
            let (side, b) = rows[rng.gen_range(0..rows.len())];
            let d = rng.gen_range(0..inst.params.dim());
            let mut p = inst.params.clone();
            p.row_mut(side, b)[d] += h;
            let up = reference_loss(&p, flags, &items, &weights);
            p.row_mut(side, b)[d] -= 2.0 * h;
            let down = reference_loss(&p, flags, &items, &weights);
            let fd = (up - down) / (2.0 * h);
            let an = grad.row(side, b).map_or(0.0, |r| r[d]);
            worst = worst.max(rel_err(fd, an, fd_floor(up.abs().max(down.abs()), h, 1e-4)));
        }
        check(worst <= 1e-4, || format!("paper_exact_loss={paper_exact_loss}: max relative error {worst:.3e}"))?;
        summary.push(format!("paper_exact_loss={paper_exact_loss}: {coords} coords, max {worst:.2e}"));
    }
    Ok(summary.join("; "))
}

fn weight_algebra() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 2000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (prop::collection::vec(-5.0f64..5.0, 1..20), 1e-3f64..1e3);
    runner
        .run(&strategy, |(raw, c)| {
            let w = clamp_normalize(&raw);
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
            let negative: Vec<f64> = raw.iter().map(|x| -x.abs() - 1e-9).collect();
            prop_assert!(clamp_normalize(&negative).iter().all(|&x| x == 0.0));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    check(clamp_normalize(&[-1.0, -2.0, 0.0]) == [0.0; 3], || "all-nonpositive input must give zeros".into())?;
    Ok("2000 random vectors: nonnegative, sum in {0,1}, zero branch, scale invariant".into())
}

fn metric_identity(reports: &[EvalReport]) -> Outcome {
    let u = unnormalized_accuracy(0.3527, 0.5902).map_err(|e| e.to_string())?;
    check((u - 0.2082).abs() <= 0.005, || format!("0.3527 x 0.5902 = {u}"))?;
    check(!reports.is_empty(), || "no reports were produced".into())?;
    for r in reports {
        let gap = (r.u_acc - r.recall_at_k * r.n_acc).abs();
        check(gap <= 1e-12, || format!("u_acc {} vs recall x n_acc {}", r.u_acc, r.recall_at_k * r.n_acc))?;
        let parsed = EvalReport::parse(&r.render()).map_err(|e| e.to_string())?;
        check((parsed.u_acc - parsed.recall_at_k * parsed.n_acc).abs() <= 1e-12, || "parsed report breaks the identity".into())?;
    }
    Ok(format!("{} reports hold u_acc = recall x n_acc; table triple gives {u:.4}", reports.len()))
}

fn clean_ratio(report: &metalink::eval::SelectionReport) -> f64 {
    let (mut sel, mut n) = (0.0, 0usize);
    for p in [Provenance::Exact, Provenance::Rewritten] {
        if let Some(&c) = report.counts.get(&p) {
            sel += report.ratio_by_provenance[&p] * c as f64;
            n += c;
        }
    }
    sel / n as f64
}

fn denoising_mirror(world: &NoisyWorld, reports: &mut Vec<EvalReport>) -> Outcome {
    let start = Instant::now();
    let f = &world.fixture;
    let syn = world.synthetic();
    check(syn.len() == 1600 && f.seeds.len() == 50 && f.kb.len() == 200, || "fixture shape changed".into())?;
    let out = train_model(&syn, &f.seeds, &f.kb, &toy_train_config(0)).map_err(|e| e.to_string())?;
    let sel = selection_ratio_experiment(&out.weights, &syn).map_err(|e| e.to_string())?;
    let (clean, bad) = (clean_ratio(&sel), sel.ratio_by_provenance[&Provenance::Bad]);
    reports.push(evaluate(&out.model, &f.test, &f.kb, 64).map_err(|e| e.to_string())?);
    check(clean - bad >= 0.2, || format!("clean {clean:.3} vs bad {bad:.3}"))?;
    let t = within(Duration::from_secs(60), start)?;
    Ok(format!("clean {clean:.3} vs bad {bad:.3}, gap {:.3}, {t:.2?}", clean - bad))
}

fn reweighting_beats_uniform(world: &NoisyWorld, reports: &mut Vec<EvalReport>) -> Outcome {
    let f = &world.fixture;
    let syn = world.synthetic();
    let mut gaps = Vec::new();
    for seed in 1..=5u64 {
        let mut u = [0.0; 2];
        for (i, rw) in [Reweighting::Meta, Reweighting::Uniform].into_iter().enumerate() {
            let mut config = toy_train_config(seed);
            config.reweighting = rw;
            let out = train_model(&syn, &f.seeds, &f.kb, &config).map_err(|e| e.to_string())?;
            let report = evaluate(&out.model, &f.test, &f.kb, 64).map_err(|e| e.to_string())?;
            u[i] = report.u_acc;
            reports.push(report);
        }
        gaps.push((u[0], u[1]));
    }
    let n = gaps.len() as f64;
    let meta = gaps.iter().map(|g| g.0).sum::<f64>() / n;
    let uniform = gaps.iter().map(|g| g.1).sum::<f64>() / n;
    check(meta - uniform > 0.0, || format!("meta {meta:.4} vs uniform {uniform:.4}"))?;
    Ok(format!("mean u_acc meta {meta:.4} vs uniform {uniform:.4}, mean gap {:.4}", meta - uniform))
}

fn generation_contracts(world: &NoisyWorld) -> Outcome {
    let f = &world.fixture;
    let exact = exact_match(&f.documents, &f.kb);
    for p in &exact {
        let title = &f.kb.get(&p.example.domain, &p.example.entity_id).ok_or("unknown gold")?.title;
        check(tokenize(&p.example.mention) == tokenize(title), || format!("{:?} vs {title:?}", p.example.mention))?;
    }
    let seeds = filter_seed(&world.clean, &f.kb, &f.documents);
    check(!seeds.is_empty(), || "filter_seed kept nothing".into())?;
    for s in &seeds {
        let title = tokenize(&f.kb.get(&s.domain, &s.entity_id).ok_or("unknown gold")?.title);
        check(tokenize(&s.mention).iter().all(|t| !title.contains(t)), || format!("{:?} overlaps its title", s.mention))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let docs: Vec<Document> = (0..100)
        .map(|i| {
            let n = rng.gen_range(1..80);
            let words: Vec<String> = (0..n).map(|_| format!("t{}", rng.gen_range(0..50))).collect();
            Document {
                id: format!("r{i}"),
                text: words.join(" "),
                domain: "r".into(),
            }
        })
        .collect();
    let corpus = build_denoising_corpus(&docs, 0.15, 4).map_err(|e| e.to_string())?;
    for (d, ex) in docs.iter().zip(&corpus) {
        let back = demask(ex).map_err(|e| e.to_string())?;
        check(back == d.text.split_whitespace().collect::<Vec<_>>(), || format!("{} does not round-trip", d.id))?;
    }
    Ok(format!("{} exact pairs, {} filtered seeds, 100 documents round-trip", exact.len(), seeds.len()))
}

fn determinism(world: &NoisyWorld, reports: &mut Vec<EvalReport>) -> Outcome {
    let f = &world.fixture;
    let run = || -> Result<(Vec<u8>, String, String, String), String> {
        let inputs = PipelineInputs {
            kb: &f.kb,
            target_documents: &f.documents,
            seeds: &f.seeds,
            source_pairs: &[],
            dev: Some(&f.test),
        };
        let (_, out) = train_pipeline(inputs, &toy_train_config(42), None).map_err(|e| e.to_string())?;
        let report = evaluate(&out.model, &f.test, &f.kb, 64).map_err(|e| e.to_string())?;
        let text = report.render();
        Ok((out.model.to_bytes(), to_jsonl(&out.weights).map_err(|e| e.to_string())?, text, out.manifest.render()))
    };
    let a = run()?;
    let b = run()?;
    reports.push(EvalReport::parse(&a.2).map_err(|e| e.to_string())?);
    check(a.0 == b.0, || "checkpoints differ".into())?;
    check(a.1 == b.1, || "weights files differ".into())?;
    check(a.2 == b.2, || "reports differ".into())?;
    check(a.3 == b.3, || "manifests differ".into())?;
    Ok(format!("checkpoint {} bytes, weights, report and manifest identical", a.0.len()))
}

fn rouge_golden() -> Outcome {
    check(rouge1_f1("the fourth episode", "the fourth episode") == 1.0, || "identical strings".into())?;
    check(rouge1_f1("alpha beta", "gamma delta") == 0.0, || "disjoint strings".into())?;
    let f = rouge1_f1("a b c", "a b d");
    check((f - 2.0 / 3.0).abs() < 1e-15, || format!("a b c / a b d gave {f}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let phrase = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(0..8);
        (0..n).map(|_| ["a", "b", "c", "d", "e", "f"][rng.gen_range(0..6)]).collect::<Vec<_>>().join(" ")
    };
    for _ in 0..100 {
        let (x, y) = (phrase(&mut rng), phrase(&mut rng));
        check(rouge1_f1(&x, &y) == rouge1_f1(&y, &x), || format!("asymmetric on {x:?} / {y:?}"))?;
    }
    Ok("1.0 / 0.0 / 2/3 golden values, symmetric on 100 random pairs".into())
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let world = NoisyWorld::build();
    let mut reports = Vec::new();
    reports.push(name_matching_baseline(&world.fixture.test, &world.fixture.kb).expect("baseline report"));

    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 meta-gradient exactness", guarded(meta_gradient_exactness)),
        ("2 loss-gradient correctness", guarded(loss_gradient_correctness)),
        ("3 weight algebra", guarded(weight_algebra)),
    ];
    let r5 = guarded(|| denoising_mirror(&world, &mut reports));
    let r6 = guarded(|| reweighting_beats_uniform(&world, &mut reports));
    let r7 = guarded(|| generation_contracts(&world));
    let r8 = guarded(|| determinism(&world, &mut reports));
    let r9 = guarded(rouge_golden);
    results.push(("4 metric identity", guarded(|| metric_identity(&reports))));
    results.extend([
        ("5 denoising selection gap", r5),
        ("6 reweighting beats uniform", r6),
        ("7 generation contracts", r7),
        ("8 determinism", r8),
        ("9 rouge-1 golden values", r9),
    ]);

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
