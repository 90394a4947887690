//! Learning-to-reweight trainer.
//!
//! Each step draws a synthetic batch and a seed batch. Every synthetic example
//! gets a raw weight equal to how much one small step on it alone would lower
//! the seed loss: with all tentative weights at zero, that derivative is the
//! inner product of the example's loss gradient with the seed-loss gradient,
//! scaled by `eta * alpha`. Negative weights are dropped, the rest normalized
//! to sum to one, and the model takes a plain SGD step on the reweighted loss.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    batch_loss, batch_loss_grad, candidate_grad, candidate_loss, per_example_grads, Batch, BiEncoderParams,
    CandidateSet, CrossGradient, CrossRankerParams, EncoderFlags, Gradient, PairFeatures,
};
use crate::error::{Error, Result};
use crate::par;
use crate::weaksup::SyntheticPair;

mod pipeline;

pub use pipeline::{
    build_candidate_sets, train_model, train_pipeline, Manifest, PipelineInputs, TrainConfig, TrainOutput,
};

/// A differentiable per-example loss over a fixed dataset, addressed by index.
pub trait Objective: Sync {
    type Params: Clone + Send + Sync;
    type Grad: Clone + Send + Sync;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `sum_j weights[j] * l_j` over the batch `idx`.
    fn loss(&self, params: &Self::Params, idx: &[usize], weights: &[f64]) -> Result<f64>;

    fn grad(&self, params: &Self::Params, idx: &[usize], weights: &[f64]) -> Result<Self::Grad>;

    /// `grad l_j` for each member of the batch, with batch context intact.
    fn per_example_grads(&self, params: &Self::Params, idx: &[usize]) -> Result<Vec<Self::Grad>>;

    fn grad_dot(a: &Self::Grad, b: &Self::Grad) -> f64;

    /// `params -= alpha * grad`
    fn descend(params: &mut Self::Params, grad: &Self::Grad, alpha: f64);
}

/// In-batch softmax loss of the bi-encoder.
pub struct BiEncoderObjective<'a> {
    pub data: &'a [PairFeatures],
    pub flags: EncoderFlags,
}

impl BiEncoderObjective<'_> {
    fn batch<'b>(&'b self, idx: &[usize], weights: Vec<f64>) -> Result<Batch<'b>> {
        let items = idx.iter().map(|&i| &self.data[i]).collect();
        Batch::new(items, weights)
    }
}

impl Objective for BiEncoderObjective<'_> {
    type Params = BiEncoderParams;
    type Grad = Gradient;

    fn len(&self) -> usize {
        self.data.len()
    }

    fn loss(&self, params: &BiEncoderParams, idx: &[usize], weights: &[f64]) -> Result<f64> {
        Ok(batch_loss(params, self.flags, &self.batch(idx, weights.to_vec())?)?.0)
    }

    fn grad(&self, params: &BiEncoderParams, idx: &[usize], weights: &[f64]) -> Result<Gradient> {
        batch_loss_grad(params, self.flags, &self.batch(idx, weights.to_vec())?)
    }

    fn per_example_grads(&self, params: &BiEncoderParams, idx: &[usize]) -> Result<Vec<Gradient>> {
        let items: Vec<&PairFeatures> = idx.iter().map(|&i| &self.data[i]).collect();
        per_example_grads(params, self.flags, &items)
    }

    fn grad_dot(a: &Gradient, b: &Gradient) -> f64 {
        a.dot(b)
    }

    fn descend(params: &mut BiEncoderParams, grad: &Gradient, alpha: f64) {
        grad.apply(params, -alpha);
    }
}

/// Softmax cross-entropy of the second-stage ranker over candidate sets.
pub struct CrossObjective<'a> {
    pub data: &'a [CandidateSet],
}

impl Objective for CrossObjective<'_> {
    type Params = CrossRankerParams;
    type Grad = CrossGradient;

    fn len(&self) -> usize {
        self.data.len()
    }

    fn loss(&self, params: &CrossRankerParams, idx: &[usize], weights: &[f64]) -> Result<f64> {
        check_lengths(idx, weights)?;
        Ok(idx
            .iter()
            .zip(weights)
            .map(|(&i, w)| w * candidate_loss(params, &self.data[i]))
            .sum())
    }

    fn grad(&self, params: &CrossRankerParams, idx: &[usize], weights: &[f64]) -> Result<CrossGradient> {
        check_lengths(idx, weights)?;
        let mut g = CrossGradient::default();
        for (&i, &w) in idx.iter().zip(weights) {
            candidate_grad(params, &self.data[i], w, &mut g);
        }
        Ok(g)
    }

    fn per_example_grads(&self, params: &CrossRankerParams, idx: &[usize]) -> Result<Vec<CrossGradient>> {
        Ok(idx
            .iter()
            .map(|&i| {
                let mut g = CrossGradient::default();
                candidate_grad(params, &self.data[i], 1.0, &mut g);
                g
            })
            .collect())
    }

    fn grad_dot(a: &CrossGradient, b: &CrossGradient) -> f64 {
        a.dot(b)
    }

    fn descend(params: &mut CrossRankerParams, grad: &CrossGradient, alpha: f64) {
        grad.apply(params, -alpha);
    }
}

fn check_lengths(idx: &[usize], weights: &[f64]) -> Result<()> {
    if idx.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} examples but {} weights",
            idx.len(),
            weights.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Biencoder,
    Crossranker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reweighting {
    /// Seed-guided weights.
    #[default]
    Meta,
    /// Every synthetic example weighted `1/n`; plain SGD.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub alpha: f64,
    pub eta: f64,
    pub n_syn: usize,
    pub m_seed: usize,
    pub steps: usize,
    pub rng_seed: u64,
    pub stage: Stage,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.1,
            eta: 1.0,
            n_syn: 32,
            m_seed: 16,
            steps: 2000,
            rng_seed: 0,
            stage: Stage::Biencoder,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self, syn_len: usize, seed_len: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if syn_len == 0 || seed_len == 0 {
            return Err(Error::invalid("synthetic and seed sets must be nonempty"));
        }
        if self.n_syn == 0 || self.n_syn > syn_len {
            return Err(Error::Config(format!(
                "n_syn must lie in 1..={syn_len}, got {}",
                self.n_syn
            )));
        }
        if self.m_seed == 0 || self.m_seed > seed_len {
            return Err(Error::Config(format!(
                "m_seed must lie in 1..={seed_len}, got {}",
                self.m_seed
            )));
        }
        Ok(())
    }
}

/// A synthetic pair with the weight it was assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPair {
    pub pair: SyntheticPair,
    pub weight: f64,
}

impl WeightedPair {
    pub fn new(pair: SyntheticPair, weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!("weight must be finite and nonnegative, got {weight}")));
        }
        Ok(WeightedPair { pair, weight })
    }
}

#[derive(Debug, Clone)]
pub struct TrainerState<P> {
    pub params: P,
    pub step: u64,
    /// Sum of normalized weights each synthetic example has received.
    pub cumulative_weights: Vec<f64>,
}

impl<P> TrainerState<P> {
    pub fn new(params: P, num_synthetic: usize) -> Self {
        TrainerState {
            params,
            step: 0,
            cumulative_weights: vec![0.0; num_synthetic],
        }
    }
}

/// Lookahead parameters at zero tentative weight, plus each example's
/// gradient at the current parameters.
pub fn meta_forward<O: Objective>(
    obj: &O,
    params: &O::Params,
    syn_batch: &[usize],
    _alpha: f64,
) -> Result<(O::Params, Vec<O::Grad>)> {
    if syn_batch.is_empty() {
        return Err(Error::invalid("empty synthetic batch"));
    }
    let grads = obj.per_example_grads(params, syn_batch)?;
    // phi - alpha * sum_j 0 * grad_j is phi itself.
    Ok((params.clone(), grads))
}

/// Raw weights `eta * alpha * <grad l_j, grad L_seed>`.
pub fn meta_backward<G: Sync>(
    per_example: &[G],
    seed_grad: &G,
    alpha: f64,
    eta: f64,
    dot: impl Fn(&G, &G) -> f64 + Sync + Send,
) -> Vec<f64> {
    par::map(per_example, |g| eta * alpha * dot(g, seed_grad))
}

/// Drops negative weights and normalizes the rest to sum to one. An all-zero
/// result stays zero.
pub fn clamp_normalize(raw: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = raw.iter().map(|&w| w.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    let denom = sum + if sum == 0.0 { 1.0 } else { 0.0 };
    clamped.into_iter().map(|w| w / denom).collect()
}

/// One SGD step on the reweighted synthetic loss.
pub fn reweighted_step<O: Objective>(
    obj: &O,
    state: &mut TrainerState<O::Params>,
    syn_batch: &[usize],
    weights: &[f64],
    alpha: f64,
) -> Result<()> {
    check_lengths(syn_batch, weights)?;
    if weights.iter().any(|&w| w != 0.0) {
        let grad = obj.grad(&state.params, syn_batch, weights)?;
        O::descend(&mut state.params, &grad, alpha);
    }
    for (&i, &w) in syn_batch.iter().zip(weights) {
        state.cumulative_weights[i] += w;
    }
    state.step += 1;
    Ok(())
}

/// Mean seed loss over a batch and its gradient.
pub fn seed_grad<O: Objective>(obj: &O, params: &O::Params, seed_batch: &[usize]) -> Result<O::Grad> {
    let m = seed_batch.len() as f64;
    obj.grad(params, seed_batch, &vec![1.0 / m; seed_batch.len()])
}

/// Mean loss over the whole dataset treated as one batch.
pub fn full_loss<O: Objective>(obj: &O, params: &O::Params) -> Result<f64> {
    let n = obj.len();
    let idx: Vec<usize> = (0..n).collect();
    obj.loss(params, &idx, &vec![1.0 / n as f64; n])
}

pub fn meta_train<O: Objective>(
    syn: &O,
    seed: &O,
    config: &MetaConfig,
    init: O::Params,
) -> Result<(O::Params, Vec<f64>)> {
    meta_train_with(syn, seed, config, init, Reweighting::Meta)
}

/// Runs `config.steps` reweighted updates. Batches are drawn uniformly without
/// replacement within a batch, independently across steps, from one seeded
/// stream; the seed batch is drawn in both modes so the streams line up.
pub fn meta_train_with<O: Objective>(
    syn: &O,
    seed: &O,
    config: &MetaConfig,
    init: O::Params,
    mode: Reweighting,
) -> Result<(O::Params, Vec<f64>)> {
    config.validate(syn.len(), seed.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut state = TrainerState::new(init, syn.len());
    for _ in 0..config.steps {
        let syn_batch = sample(&mut rng, syn.len(), config.n_syn).into_vec();
        let seed_batch = sample(&mut rng, seed.len(), config.m_seed).into_vec();
        let weights = match mode {
            Reweighting::Meta => {
                let (lookahead, grads) = meta_forward(syn, &state.params, &syn_batch, config.alpha)?;
                let g_seed = seed_grad(seed, &lookahead, &seed_batch)?;
                let raw = meta_backward(&grads, &g_seed, config.alpha, config.eta, O::grad_dot);
                clamp_normalize(&raw)
            }
            Reweighting::Uniform => vec![1.0 / config.n_syn as f64; config.n_syn],
        };
        reweighted_step(syn, &mut state, &syn_batch, &weights, config.alpha)?;
    }
    Ok((state.params, state.cumulative_weights))
}
