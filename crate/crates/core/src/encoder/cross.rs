//! Second-stage ranker: a linear model over joint mention/entity features,
//! trained with softmax cross-entropy over each candidate set.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{dot, encode_entity, encode_mention, norm, rank_order, BiEncoderParams};
use crate::kb::{tokenize, Entity, MentionExample};

pub const NUM_CROSS_FEATURES: usize = 4;

/// `[dot, cosine, mention/title Jaccard, ln(1 + shared context/description tokens)]`
pub type CrossFeatures = [f64; NUM_CROSS_FEATURES];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossRankerParams {
    pub weights: [f64; NUM_CROSS_FEATURES],
    pub bias: f64,
}

impl CrossRankerParams {
    pub fn score(&self, f: &CrossFeatures) -> f64 {
        self.weights.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CrossGradient {
    pub weights: [f64; NUM_CROSS_FEATURES],
    pub bias: f64,
}

impl CrossGradient {
    pub fn dot(&self, other: &CrossGradient) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.bias * other.bias
    }

    pub fn add_scaled(&mut self, other: &CrossGradient, c: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += c * b;
        }
        self.bias += c * other.bias;
    }

    pub fn apply(&self, params: &mut CrossRankerParams, c: f64) {
        for (p, g) in params.weights.iter_mut().zip(&self.weights) {
            *p += c * g;
        }
        params.bias += c * self.bias;
    }
}

fn token_set(text: &str) -> HashSet<String> {
    tokenize(text).into_iter().collect()
}

fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Joint features from precomputed bi-encoder vectors.
pub fn cross_features_from_vectors(
    mention_vec: &[f64],
    entity_vec: &[f64],
    example: &MentionExample,
    entity: &Entity,
) -> CrossFeatures {
    let d = dot(mention_vec, entity_vec);
    let (nm, ne) = (norm(mention_vec), norm(entity_vec));
    let cosine = if nm == 0.0 || ne == 0.0 { 0.0 } else { d / (nm * ne) };
    let jac = jaccard(&token_set(&example.mention), &token_set(&entity.title));
    let mut context = token_set(&example.context_left);
    context.extend(token_set(&example.context_right));
    let shared = token_set(&entity.description).intersection(&context).count();
    [d, cosine, jac, (1.0 + shared as f64).ln()]
}

pub fn cross_features(params: &BiEncoderParams, example: &MentionExample, entity: &Entity) -> CrossFeatures {
    cross_features_from_vectors(
        &encode_mention(params, example),
        &encode_entity(params, entity),
        example,
        entity,
    )
}

/// Scores and sorts candidates: descending score, ascending id on ties.
pub fn rank_candidates(cross: &CrossRankerParams, candidates: &[(String, CrossFeatures)]) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = candidates
        .iter()
        .map(|(id, f)| (id.clone(), cross.score(f)))
        .collect();
    ranked.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
    ranked
}

/// One mention's candidate list for ranker training, gold included.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub ids: Vec<String>,
    pub features: Vec<CrossFeatures>,
    pub gold: usize,
}

fn softmax(cross: &CrossRankerParams, set: &CandidateSet) -> (Vec<f64>, f64) {
    let scores: Vec<f64> = set.features.iter().map(|f| cross.score(f)).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let probs = scores.iter().map(|s| (s - lse).exp()).collect();
    (probs, lse - scores[set.gold])
}

pub fn candidate_loss(cross: &CrossRankerParams, set: &CandidateSet) -> f64 {
    softmax(cross, set).1
}

/// Accumulates `weight * d loss / d params` into `grad`.
pub fn candidate_grad(cross: &CrossRankerParams, set: &CandidateSet, weight: f64, grad: &mut CrossGradient) {
    if weight == 0.0 {
        return;
    }
    let (probs, _) = softmax(cross, set);
    for (c, (p, f)) in probs.iter().zip(&set.features).enumerate() {
        let g = weight * (p - if c == set.gold { 1.0 } else { 0.0 });
        for (gw, x) in grad.weights.iter_mut().zip(f) {
            *gw += g * x;
        }
        grad.bias += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{Buckets, Provenance};

    fn ex(mention: &str, left: &str, right: &str) -> MentionExample {
        MentionExample {
            id: "q".into(),
            context_left: left.into(),
            mention: mention.into(),
            context_right: right.into(),
            entity_id: "e".into(),
            domain: "d".into(),
            provenance: Provenance::Seed,
            overlap_category: None,
        }
    }

    fn ent(title: &str, description: &str) -> Entity {
        Entity {
            id: "e".into(),
            title: title.into(),
            description: description.into(),
            domain: "d".into(),
        }
    }

    #[test]
    fn zero_vectors_guard_cosine() {
        let params = BiEncoderParams::zeros(3, Buckets::new(16).unwrap()).unwrap();
        let f = cross_features(&params, &ex("golden master", "the", "aired"), &ent("Golden Master", "It aired in April"));
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2], 1.0);
        // context {the, aired} vs description {it, aired, in, april}
        assert!((f[3] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pinned_toy_features() {
        // Hand computation: m = (1,2), e = (3,-1) gives dot 1, cosine
        // 1/(sqrt5*sqrt10); mention {a,b} vs title {b,c}: 1/3;
        // context {x,y,z} vs description {y,z,w}: 2 shared.
        let f = cross_features_from_vectors(&[1.0, 2.0], &[3.0, -1.0], &ex("a b", "x y", "z"), &ent("B C", "y z w"));
        let want = [1.0, 1.0 / 50f64.sqrt(), 1.0 / 3.0, 3f64.ln()];
        for (g, w) in f.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15, "{f:?}");
        }
    }

    #[test]
    fn ranking_ties_and_singletons() {
        let zero = CrossRankerParams::default();
        let c = vec![("b".to_string(), [1.0; 4]), ("a".to_string(), [2.0; 4])];
        let r = rank_candidates(&zero, &c);
        assert_eq!(r[0].0, "a");
        let w = CrossRankerParams {
            weights: [-5.0, 1.0, 0.0, 0.0],
            bias: 3.0,
        };
        assert_eq!(rank_candidates(&w, &c[..1])[0].0, "b");
    }

    #[test]
    fn candidate_grad_matches_finite_differences() {
        let set = CandidateSet {
            ids: vec!["a".into(), "b".into(), "c".into()],
            features: vec![[0.3, -1.0, 0.5, 0.2], [1.2, 0.4, -0.7, 0.9], [-0.5, 0.1, 0.3, -1.1]],
            gold: 1,
        };
        let params = CrossRankerParams {
            weights: [0.2, -0.3, 0.7, 0.1],
            bias: 0.4,
        };
        let mut g = CrossGradient::default();
        candidate_grad(&params, &set, 1.0, &mut g);
        let h = 1e-6;
        for k in 0..NUM_CROSS_FEATURES {
            let mut p = params;
            p.weights[k] += h;
            let up = candidate_loss(&p, &set);
            p.weights[k] -= 2.0 * h;
            let down = candidate_loss(&p, &set);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g.weights[k]).abs() < 1e-8, "{k}: {fd} vs {}", g.weights[k]);
        }
        // Bias shifts every score equally.
        assert!(g.bias.abs() < 1e-12);
    }
}
