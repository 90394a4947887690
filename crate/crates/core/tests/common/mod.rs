//! Oracles shared by the integration tests. Everything here is written
//! independently of the library's loss and metric code.

#![allow(dead_code, clippy::needless_range_loop)]

use metalink::encoder::{BiEncoderParams, EncoderFlags, FeatureBag, PairFeatures, Side};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn naive_encode(params: &BiEncoderParams, side: Side, bag: &FeatureBag) -> Vec<f64> {
    let mut v = vec![0.0; params.dim()];
    for &(b, c) in bag.rows() {
        let row = params.row(side, b);
        for k in 0..v.len() {
            v[k] += c * row[k];
        }
    }
    v
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

/// Direct transcription of the in-batch softmax loss, no max shift.
pub fn reference_loss(params: &BiEncoderParams, flags: EncoderFlags, items: &[&PairFeatures], weights: &[f64]) -> f64 {
    let prep = |v: Vec<f64>| if flags.normalize_embeddings { unit(v) } else { v };
    let m: Vec<Vec<f64>> = items.iter().map(|p| prep(naive_encode(params, Side::Mention, &p.mention))).collect();
    let e: Vec<Vec<f64>> = items.iter().map(|p| prep(naive_encode(params, Side::Entity, &p.entity))).collect();
    let s = |i: usize, j: usize| m[i].iter().zip(&e[j]).map(|(a, b)| a * b).sum::<f64>();
    let n = items.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut z = 0.0;
        for j in 0..n {
            if flags.paper_exact_loss && j == i {
                continue;
            }
            z += s(i, j).exp();
        }
        total += weights[i] * (-s(i, i) + z.ln());
    }
    total
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Rounding floor of a central difference of values near `loss` at step `h`,
/// scaled to the target relative tolerance.
pub fn fd_floor(loss: f64, h: f64, tol: f64) -> f64 {
    4.0 * f64::EPSILON * loss.abs().max(1.0) / (2.0 * h) / tol
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// The toy world with its clean synthetic pairs (exact matches rewritten by
/// the built-in rewriter) and an equal number of randomly relinked bad pairs.
pub struct NoisyWorld {
    pub fixture: metalink::fixture::Fixture,
    pub clean: Vec<metalink::weaksup::SyntheticPair>,
    pub bad: Vec<metalink::weaksup::SyntheticPair>,
}

impl NoisyWorld {
    pub fn build() -> Self {
        use metalink::weaksup::{exact_match, generate_bad_pairs, rewrite_mentions, BaselineRewriter, DEFAULT_PREFIX};
        let fixture = metalink::fixture::toy_world(&metalink::fixture::FixtureConfig::default());
        let exact = exact_match(&fixture.documents, &fixture.kb);
        let mut rw = BaselineRewriter::new(&fixture.kb, &fixture.documents, DEFAULT_PREFIX);
        let clean = rewrite_mentions(&exact, &mut rw, &fixture.kb, DEFAULT_PREFIX).unwrap();
        let bad = generate_bad_pairs(&clean, &fixture.kb, 11).unwrap();
        NoisyWorld { fixture, clean, bad }
    }

    pub fn synthetic(&self) -> Vec<metalink::kb::MentionExample> {
        self.clean.iter().chain(&self.bad).map(|p| p.example.clone()).collect()
    }
}
