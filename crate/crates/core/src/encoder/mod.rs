//! Bi-encoder over hashed bag-of-token features.
//!
//! Each side is a mean-pooled embedding bag: a text becomes a multiset of
//! hashed features, and its vector is the average of the corresponding table
//! rows. Mentions and entities use separate tables. Training uses in-batch
//! negatives: every row's gold entity acts as a negative for every other row.

mod checkpoint;
mod cross;
mod gradient;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{hash_token, tokenize, Buckets, Entity, Kb, MentionExample};
use crate::par;

pub use checkpoint::LinkingModel;
pub use cross::{
    candidate_grad, candidate_loss, cross_features, cross_features_from_vectors, rank_candidates,
    CandidateSet, CrossFeatures, CrossGradient, CrossRankerParams, NUM_CROSS_FEATURES,
};
pub use gradient::{Gradient, Side};

pub const DEFAULT_DIM: usize = 64;
/// Tokens of context kept on each side of a mention.
pub const CONTEXT_WINDOW: usize = 32;
/// Leading description tokens fed to the entity encoder.
pub const DESCRIPTION_TOKENS: usize = 128;

pub const MENTION_START: &str = "<ms>";
pub const MENTION_END: &str = "<me>";
pub const TITLE_START: &str = "<ti>";
pub const TITLE_END: &str = "<sep>";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderFlags {
    /// Exclude the positive from the log-sum-exp, as the loss is printed.
    pub paper_exact_loss: bool,
    /// Score with cosine similarity instead of the raw dot product.
    pub normalize_embeddings: bool,
}

/// Hashed features with their mean-pooling coefficients, sorted by bucket.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureBag {
    rows: Vec<(u32, f64)>,
}

impl FeatureBag {
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], buckets: Buckets) -> Self {
        if tokens.is_empty() {
            return FeatureBag::default();
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(hash_token(t.as_ref(), buckets).0).or_default() += 1;
        }
        let total = tokens.len() as f64;
        FeatureBag {
            rows: counts
                .into_iter()
                .map(|(b, c)| (b, c as f64 / total))
                .collect(),
        }
    }

    pub fn rows(&self) -> &[(u32, f64)] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn with_markers(start: &str, head: Vec<String>, end: &str, tail: Vec<String>) -> Vec<String> {
    if head.is_empty() && tail.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(head.len() + tail.len() + 2);
    out.push(start.to_string());
    out.extend(head);
    out.push(end.to_string());
    out.extend(tail);
    out
}

/// `<ms> mention <me> left-context right-context`, or nothing when the example
/// has no tokens at all.
pub fn mention_feature_tokens(example: &MentionExample) -> Vec<String> {
    let mention = tokenize(&example.mention);
    let mut left = tokenize(&example.context_left);
    if left.len() > CONTEXT_WINDOW {
        left.drain(..left.len() - CONTEXT_WINDOW);
    }
    let mut right = tokenize(&example.context_right);
    right.truncate(CONTEXT_WINDOW);
    left.extend(right);
    with_markers(MENTION_START, mention, MENTION_END, left)
}

/// `<ti> title <sep> description[..128]`, or nothing for an all-empty entity.
pub fn entity_feature_tokens(entity: &Entity) -> Vec<String> {
    let mut desc = tokenize(&entity.description);
    desc.truncate(DESCRIPTION_TOKENS);
    with_markers(TITLE_START, tokenize(&entity.title), TITLE_END, desc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoderParams {
    dim: usize,
    buckets: Buckets,
    mention_table: Vec<f64>,
    entity_table: Vec<f64>,
}

impl BiEncoderParams {
    pub fn zeros(dim: usize, buckets: Buckets) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        let n = dim * buckets.get() as usize;
        Ok(BiEncoderParams {
            dim,
            buckets,
            mention_table: vec![0.0; n],
            entity_table: vec![0.0; n],
        })
    }

    /// Uniform in `[-0.5/dim, 0.5/dim]`, mention table first.
    pub fn init_uniform(dim: usize, buckets: Buckets, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(dim, buckets)?;
        let bound = 0.5 / dim as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in params
            .mention_table
            .iter_mut()
            .chain(params.entity_table.iter_mut())
        {
            *x = rng.gen_range(-bound..=bound);
        }
        Ok(params)
    }

    pub fn from_tables(
        dim: usize,
        buckets: Buckets,
        mention_table: Vec<f64>,
        entity_table: Vec<f64>,
    ) -> Result<Self> {
        let n = dim * buckets.get() as usize;
        if dim == 0 || mention_table.len() != n || entity_table.len() != n {
            return Err(Error::Config(format!(
                "tables must both hold {} x {dim} weights",
                buckets.get()
            )));
        }
        let params = BiEncoderParams {
            dim,
            buckets,
            mention_table,
            entity_table,
        };
        if !params.is_finite() {
            return Err(Error::invalid("non-finite encoder weight"));
        }
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn buckets(&self) -> Buckets {
        self.buckets
    }

    pub fn mention_table(&self) -> &[f64] {
        &self.mention_table
    }

    pub fn entity_table(&self) -> &[f64] {
        &self.entity_table
    }

    pub fn mention_row(&self, bucket: u32) -> &[f64] {
        let s = bucket as usize * self.dim;
        &self.mention_table[s..s + self.dim]
    }

    pub fn entity_row(&self, bucket: u32) -> &[f64] {
        let s = bucket as usize * self.dim;
        &self.entity_table[s..s + self.dim]
    }

    pub fn mention_row_mut(&mut self, bucket: u32) -> &mut [f64] {
        let s = bucket as usize * self.dim;
        &mut self.mention_table[s..s + self.dim]
    }

    pub fn entity_row_mut(&mut self, bucket: u32) -> &mut [f64] {
        let s = bucket as usize * self.dim;
        &mut self.entity_table[s..s + self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.mention_table
            .iter()
            .chain(&self.entity_table)
            .all(|x| x.is_finite())
    }

    pub fn row(&self, side: Side, bucket: u32) -> &[f64] {
        match side {
            Side::Mention => self.mention_row(bucket),
            Side::Entity => self.entity_row(bucket),
        }
    }

    pub fn row_mut(&mut self, side: Side, bucket: u32) -> &mut [f64] {
        match side {
            Side::Mention => self.mention_row_mut(bucket),
            Side::Entity => self.entity_row_mut(bucket),
        }
    }

    pub fn encode(&self, side: Side, bag: &FeatureBag) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(b, c) in bag.rows() {
            for (o, x) in out.iter_mut().zip(self.row(side, b)) {
                *o += c * x;
            }
        }
        out
    }
}

pub fn encode_mention(params: &BiEncoderParams, example: &MentionExample) -> Vec<f64> {
    let bag = FeatureBag::from_tokens(&mention_feature_tokens(example), params.buckets());
    params.encode(Side::Mention, &bag)
}

pub fn encode_entity(params: &BiEncoderParams, entity: &Entity) -> Vec<f64> {
    let bag = FeatureBag::from_tokens(&entity_feature_tokens(entity), params.buckets());
    params.encode(Side::Entity, &bag)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dot-product match score.
pub fn score(mention: &[f64], entity: &[f64]) -> Result<f64> {
    if mention.len() != entity.len() {
        return Err(Error::DimMismatch {
            left: mention.len(),
            right: entity.len(),
        });
    }
    Ok(dot(mention, entity))
}

/// Unit vector and original norm; the zero vector stays zero.
fn normalized(v: Vec<f64>) -> (Vec<f64>, f64) {
    let n = norm(&v);
    if n > 0.0 {
        (v.into_iter().map(|x| x / n).collect(), n)
    } else {
        (v, 0.0)
    }
}

/// Embedding as used for scoring under `flags`.
pub fn scoring_vector(flags: EncoderFlags, v: Vec<f64>) -> Vec<f64> {
    if flags.normalize_embeddings {
        normalized(v).0
    } else {
        v
    }
}

/// A training example reduced to hashed features on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub mention: FeatureBag,
    pub entity: FeatureBag,
    /// Index of the gold entity in the knowledge base.
    pub gold: usize,
}

pub fn featurize_pair(example: &MentionExample, kb: &Kb, buckets: Buckets) -> Result<PairFeatures> {
    let gold = kb.resolve(example)?;
    Ok(PairFeatures {
        mention: FeatureBag::from_tokens(&mention_feature_tokens(example), buckets),
        entity: FeatureBag::from_tokens(&entity_feature_tokens(kb.entity(gold)), buckets),
        gold,
    })
}

pub fn featurize_all(examples: &[MentionExample], kb: &Kb, buckets: Buckets) -> Result<Vec<PairFeatures>> {
    par::map(examples, |ex| featurize_pair(ex, kb, buckets))
        .into_iter()
        .collect()
}

/// Examples with nonnegative training weights.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    items: Vec<&'a PairFeatures>,
    weights: Vec<f64>,
}

impl<'a> Batch<'a> {
    pub fn new(items: Vec<&'a PairFeatures>, weights: Vec<f64>) -> Result<Self> {
        if items.len() != weights.len() {
            return Err(Error::invalid(format!(
                "batch has {} examples but {} weights",
                items.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::invalid(format!("batch weight {w} is not a finite nonnegative value")));
        }
        Ok(Batch { items, weights })
    }

    pub fn uniform(items: Vec<&'a PairFeatures>, weight: f64) -> Result<Self> {
        let n = items.len();
        Self::new(items, vec![weight; n])
    }

    pub fn items(&self) -> &[&'a PairFeatures] {
        &self.items
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Encodings and softmax state shared by the loss and its gradient.
struct Forward {
    mentions: Vec<Vec<f64>>,
    mention_norms: Vec<f64>,
    entities: Vec<Vec<f64>>,
    entity_norms: Vec<f64>,
    /// `probs[i][j]`: softmax weight of row j in row i's denominator, 0 if excluded.
    probs: Vec<Vec<f64>>,
    losses: Vec<f64>,
}

fn check_batch(flags: EncoderFlags, items: &[&PairFeatures]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if flags.paper_exact_loss {
        if items.len() < 2 {
            return Err(Error::invalid(
                "empty denominator: the positive-excluded loss needs at least 2 batch rows",
            ));
        }
        let mut golds: Vec<usize> = items.iter().map(|p| p.gold).collect();
        golds.sort_unstable();
        if golds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(
                "the positive-excluded loss requires distinct gold entities within a batch",
            ));
        }
    }
    Ok(())
}

fn forward(params: &BiEncoderParams, flags: EncoderFlags, items: &[&PairFeatures]) -> Result<Forward> {
    check_batch(flags, items)?;
    let n = items.len();
    let encode = |side: Side, bag: &FeatureBag| {
        let v = params.encode(side, bag);
        if flags.normalize_embeddings {
            normalized(v)
        } else {
            (v, 1.0)
        }
    };
    let (mentions, mention_norms): (Vec<_>, Vec<_>) = par::map(items, |p| encode(Side::Mention, &p.mention))
        .into_iter()
        .unzip();
    let (entities, entity_norms): (Vec<_>, Vec<_>) = par::map(items, |p| encode(Side::Entity, &p.entity))
        .into_iter()
        .unzip();

    let rows = par::map_range(n, |i| {
        let scores: Vec<f64> = entities.iter().map(|e| dot(&mentions[i], e)).collect();
        let in_denominator = |j: usize| !(flags.paper_exact_loss && j == i);
        let max = (0..n)
            .filter(|&j| in_denominator(j))
            .map(|j| scores[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n)
            .filter(|&j| in_denominator(j))
            .map(|j| (scores[j] - max).exp())
            .sum();
        let lse = max + sum.ln();
        let probs: Vec<f64> = (0..n)
            .map(|j| {
                if in_denominator(j) {
                    (scores[j] - lse).exp()
                } else {
                    0.0
                }
            })
            .collect();
        (probs, lse - scores[i])
    });
    let (probs, losses) = rows.into_iter().unzip();
    Ok(Forward {
        mentions,
        mention_norms,
        entities,
        entity_norms,
        probs,
        losses,
    })
}

/// Pulls a gradient w.r.t. a (possibly normalized) vector back to the raw one.
fn through_norm(flags: EncoderFlags, d: Vec<f64>, unit: &[f64], n: f64) -> Vec<f64> {
    if !flags.normalize_embeddings {
        return d;
    }
    if n == 0.0 {
        return vec![0.0; d.len()];
    }
    let proj = dot(unit, &d);
    d.iter().zip(unit).map(|(g, u)| (g - u * proj) / n).collect()
}

/// Gradient of `sum_i w_i l_i` over the given `(row, weight)` pairs.
fn backward(
    params: &BiEncoderParams,
    flags: EncoderFlags,
    items: &[&PairFeatures],
    fwd: &Forward,
    rows: impl IntoIterator<Item = (usize, f64)>,
) -> Gradient {
    let n = items.len();
    let dim = params.dim();
    let mut grad = Gradient::zeros(dim);
    let mut d_entities: Vec<Option<Vec<f64>>> = vec![None; n];
    for (i, w) in rows {
        if w == 0.0 {
            continue;
        }
        let mut d_mention = vec![0.0; dim];
        for (j, slot) in d_entities.iter_mut().enumerate() {
            let g = w * (fwd.probs[i][j] - if i == j { 1.0 } else { 0.0 });
            if g == 0.0 {
                continue;
            }
            for (d, e) in d_mention.iter_mut().zip(&fwd.entities[j]) {
                *d += g * e;
            }
            let de = slot.get_or_insert_with(|| vec![0.0; dim]);
            for (d, m) in de.iter_mut().zip(&fwd.mentions[i]) {
                *d += g * m;
            }
        }
        let d_mention = through_norm(flags, d_mention, &fwd.mentions[i], fwd.mention_norms[i]);
        for &(b, c) in items[i].mention.rows() {
            grad.add_row(Side::Mention, b, c, &d_mention);
        }
    }
    for (j, de) in d_entities.into_iter().enumerate() {
        if let Some(de) = de {
            let de = through_norm(flags, de, &fwd.entities[j], fwd.entity_norms[j]);
            for &(b, c) in items[j].entity.rows() {
                grad.add_row(Side::Entity, b, c, &de);
            }
        }
    }
    grad
}

/// In-batch softmax loss. Returns the weighted total and the unweighted
/// per-example losses.
pub fn batch_loss(params: &BiEncoderParams, flags: EncoderFlags, batch: &Batch<'_>) -> Result<(f64, Vec<f64>)> {
    let fwd = forward(params, flags, batch.items())?;
    let total = fwd
        .losses
        .iter()
        .zip(batch.weights())
        .map(|(l, w)| l * w)
        .sum();
    Ok((total, fwd.losses))
}

pub fn batch_loss_grad(params: &BiEncoderParams, flags: EncoderFlags, batch: &Batch<'_>) -> Result<Gradient> {
    let fwd = forward(params, flags, batch.items())?;
    Ok(backward(
        params,
        flags,
        batch.items(),
        &fwd,
        batch.weights().iter().copied().enumerate(),
    ))
}

/// Gradient of each example's own loss term, with the rest of the batch still
/// serving as its negatives.
pub fn per_example_grads(
    params: &BiEncoderParams,
    flags: EncoderFlags,
    items: &[&PairFeatures],
) -> Result<Vec<Gradient>> {
    let fwd = forward(params, flags, items)?;
    Ok(par::map_range(items.len(), |j| {
        backward(params, flags, items, &fwd, [(j, 1.0)])
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub entity_id: String,
    /// Index into the knowledge base.
    pub kb_index: usize,
    pub score: f64,
}

/// Orders by descending score, then ascending entity id.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> std::cmp::Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// Precomputed entity vectors for exhaustive top-k retrieval.
#[derive(Debug, Clone)]
pub struct EntityIndex {
    flags: EncoderFlags,
    kb_indices: Vec<usize>,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl EntityIndex {
    pub fn build(params: &BiEncoderParams, flags: EncoderFlags, kb: &Kb, kb_indices: &[usize]) -> Self {
        let vectors = par::map(kb_indices, |&i| {
            scoring_vector(flags, encode_entity(params, kb.entity(i)))
        });
        EntityIndex {
            flags,
            kb_indices: kb_indices.to_vec(),
            ids: kb_indices.iter().map(|&i| kb.entity(i).id.clone()).collect(),
            vectors,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, pos: usize) -> &[f64] {
        &self.vectors[pos]
    }

    /// Top-k entities for a raw (unnormalized) mention vector.
    pub fn retrieve_topk(&self, mention: &[f64], k: usize) -> Vec<Candidate> {
        let query = scoring_vector(self.flags, mention.to_vec());
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(pos, v)| (pos, dot(&query, v)))
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| rank_order(a.1, &self.ids[a.0], b.1, &self.ids[b.0]);
        let k = k.min(scored.len());
        if k == 0 {
            return Vec::new();
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored
            .into_iter()
            .map(|(pos, score)| Candidate {
                entity_id: self.ids[pos].clone(),
                kb_index: self.kb_indices[pos],
                score,
            })
            .collect()
    }
}

/// One-off top-k retrieval over `entities`.
pub fn retrieve_topk(
    params: &BiEncoderParams,
    flags: EncoderFlags,
    example: &MentionExample,
    entities: &[Entity],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k == 0 || entities.is_empty() {
        return Err(Error::invalid("retrieval needs k >= 1 and a nonempty entity set"));
    }
    let kb = Kb::from_entities(entities.to_vec())?;
    let all: Vec<usize> = (0..kb.len()).collect();
    let index = EntityIndex::build(params, flags, &kb, &all);
    Ok(index
        .retrieve_topk(&encode_mention(params, example), k)
        .into_iter()
        .map(|c| (c.entity_id, c.score))
        .collect())
}
