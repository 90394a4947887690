//! Numerical self-checks shipped with the binary: loss gradients and meta
//! weights against central finite differences, and the weight-normalization
//! algebra on random vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{
    batch_loss, batch_loss_grad, featurize_all, Batch, BiEncoderParams, EncoderFlags, PairFeatures, Side,
};
use crate::error::Result;
use crate::kb::{Buckets, Entity, Kb, MentionExample, Provenance};
use crate::meta::{clamp_normalize, meta_backward, meta_forward, seed_grad, BiEncoderObjective, Objective};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// A random toy problem: `num_entities` entities, one example per entity.
pub struct Instance {
    pub kb: Kb,
    pub examples: Vec<MentionExample>,
    pub features: Vec<PairFeatures>,
    pub params: BiEncoderParams,
}

const VOCAB: [&str; 12] = [
    "amber", "basin", "cinder", "delta", "ember", "fjord", "grove", "harbor", "islet", "jetty", "knoll", "lagoon",
];

fn phrase(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

/// Parameters are drawn from `[-scale, scale]` so gradients are far from zero.
pub fn random_instance(rng: &mut ChaCha8Rng, num_entities: usize, dim: usize, scale: f64) -> Result<Instance> {
    let buckets = Buckets::new(64)?;
    let entities: Vec<Entity> = (0..num_entities)
        .map(|i| Entity {
            id: format!("e{i}"),
            title: phrase(rng, 2),
            description: phrase(rng, 6),
            domain: "d".into(),
        })
        .collect();
    let examples: Vec<MentionExample> = (0..num_entities)
        .map(|i| MentionExample {
            id: format!("m{i}"),
            context_left: phrase(rng, 4),
            mention: phrase(rng, 2),
            context_right: phrase(rng, 4),
            entity_id: format!("e{i}"),
            domain: "d".into(),
            provenance: Provenance::Seed,
            overlap_category: None,
        })
        .collect();
    let kb = Kb::from_entities(entities)?;
    let features = featurize_all(&examples, &kb, buckets)?;
    let mut params = BiEncoderParams::zeros(dim, buckets)?;
    for b in 0..buckets.get() as u32 {
        for side in [Side::Mention, Side::Entity] {
            for x in params.row_mut(side, b) {
                *x = rng.gen_range(-scale..=scale);
            }
        }
    }
    Ok(Instance {
        kb,
        examples,
        features,
        params,
    })
}

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps values at the round-off
/// level of a central difference from counting as large relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Smallest magnitude a central difference of `scale * L` with step `h` can
/// resolve to relative accuracy `tol`: a few ulps of the loss over `2h`,
/// divided by `tol`.
pub fn resolvable_floor(scale: f64, loss: f64, h: f64, tol: f64) -> f64 {
    scale * 4.0 * f64::EPSILON * loss.abs().max(1.0) / (2.0 * h) / tol
}

fn loss_at(params: &BiEncoderParams, flags: EncoderFlags, batch: &Batch<'_>) -> Result<f64> {
    Ok(batch_loss(params, flags, batch)?.0)
}

/// Worst relative error of `batch_loss_grad` over `coords` random touched coordinates.
pub fn gradient_check(flags: EncoderFlags, rng: &mut ChaCha8Rng, coords: usize, h: f64) -> Result<f64> {
    let inst = random_instance(rng, 5, 4, 0.5)?;
    let weights: Vec<f64> = (0..inst.features.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
    let batch = Batch::new(inst.features.iter().collect(), weights)?;
    let grad = batch_loss_grad(&inst.params, flags, &batch)?;
    let touched: Vec<(Side, u32)> = [Side::Mention, Side::Entity]
        .into_iter()
        .flat_map(|s| grad.rows(s).map(move |(b, _)| (s, b)).collect::<Vec<_>>())
        .collect();
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let (side, b) = touched[rng.gen_range(0..touched.len())];
        let d = rng.gen_range(0..inst.params.dim());
        let mut p = inst.params.clone();
        p.row_mut(side, b)[d] += h;
        let up = loss_at(&p, flags, &batch)?;
        p.row_mut(side, b)[d] -= 2.0 * h;
        let down = loss_at(&p, flags, &batch)?;
        let fd = (up - down) / (2.0 * h);
        let an = grad.row(side, b).map_or(0.0, |r| r[d]);
        let floor = resolvable_floor(1.0, up.abs().max(down.abs()), h, 1e-4);
        worst = worst.max(relative_error(fd, an, floor));
    }
    Ok(worst)
}

/// Worst relative error of the closed-form meta weights against differences
/// of the seed loss through an explicit one-step update.
pub fn meta_weight_check(rng: &mut ChaCha8Rng, h: f64) -> Result<f64> {
    let flags = EncoderFlags::default();
    let inst = random_instance(rng, 8, 6, 1.0)?;
    let (syn, seed) = inst.features.split_at(5);
    let syn_obj = BiEncoderObjective { data: syn, flags };
    let seed_obj = BiEncoderObjective { data: seed, flags };
    let syn_idx: Vec<usize> = (0..syn.len()).collect();
    let seed_idx: Vec<usize> = (0..seed.len()).collect();
    let (alpha, eta) = (1.0, 1.5);
    let (lookahead, grads) = meta_forward(&syn_obj, &inst.params, &syn_idx, alpha)?;
    let g_seed = seed_grad(&seed_obj, &lookahead, &seed_idx)?;
    let raw = meta_backward(&grads, &g_seed, alpha, eta, BiEncoderObjective::grad_dot);
    let seed_w = vec![1.0 / seed.len() as f64; seed.len()];
    let mut worst = 0.0f64;
    for (j, g) in grads.iter().enumerate() {
        let at = |wj: f64| -> Result<f64> {
            let mut p = inst.params.clone();
            g.apply(&mut p, -alpha * wj);
            seed_obj.loss(&p, &seed_idx, &seed_w)
        };
        let fd = -eta * (at(h)? - at(-h)?) / (2.0 * h);
        let floor = resolvable_floor(eta, at(0.0)?, h, 1e-5);
        worst = worst.max(relative_error(fd, raw[j], floor));
    }
    Ok(worst)
}

/// Counts violations of the normalization laws over `trials` random vectors.
pub fn normalization_check(rng: &mut ChaCha8Rng, trials: usize) -> usize {
    let mut bad = 0;
    for _ in 0..trials {
        let n = rng.gen_range(1..12);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w = clamp_normalize(&raw);
        let sum: f64 = w.iter().sum();
        let any_pos = raw.iter().any(|&x| x > 0.0);
        let expected = if any_pos { 1.0 } else { 0.0 };
        if w.iter().any(|&x| x < 0.0) || (sum - expected).abs() > 1e-12 {
            bad += 1;
        }
        let c = rng.gen_range(0.01..100.0);
        let scaled: Vec<f64> = raw.iter().map(|x| c * x).collect();
        let ws = clamp_normalize(&scaled);
        if any_pos && w.iter().zip(&ws).any(|(a, b)| (a - b).abs() > 1e-12) {
            bad += 1;
        }
    }
    bad
}

pub fn run(rng_seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut checks = Vec::new();
    let mut push = |name: &str, outcome: Result<(bool, String)>| {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, e.to_string()));
        checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    };
    for (name, flags) in [
        ("loss_gradient.default", EncoderFlags::default()),
        (
            "loss_gradient.paper_exact_loss",
            EncoderFlags {
                paper_exact_loss: true,
                ..EncoderFlags::default()
            },
        ),
        (
            "loss_gradient.normalize_embeddings",
            EncoderFlags {
                normalize_embeddings: true,
                ..EncoderFlags::default()
            },
        ),
    ] {
        let r = gradient_check(flags, &mut rng, 20, 1e-4).map(|e| (e <= 1e-4, format!("max_rel_err={e:.3e}")));
        push(name, r);
    }
    let r = (0..20)
        .map(|_| meta_weight_check(&mut rng, 1e-5))
        .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))
        .map(|e| (e <= 1e-5, format!("max_rel_err={e:.3e}")));
    push("meta_weights", r);
    let v = normalization_check(&mut rng, 1000);
    push("clamp_normalize", Ok((v == 0, format!("violations={v}"))));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        for c in run(3) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
