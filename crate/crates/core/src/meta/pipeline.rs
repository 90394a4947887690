//! End-to-end training: weak supervision, then both reweighted stages.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{full_loss, meta_train_with, BiEncoderObjective, CrossObjective, MetaConfig, Reweighting, Stage};
use crate::encoder::{
    cross_features_from_vectors, encode_entity, encode_mention, featurize_all, BiEncoderParams, CandidateSet, CrossRankerParams,
    EncoderFlags, EntityIndex, LinkingModel, DEFAULT_DIM,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, WeightRecord, DEFAULT_K};
use crate::kb::{Buckets, Document, Kb, MentionExample, Provenance};
use crate::par;
use crate::weaksup::{exact_match, rewrite_mentions, BaselineRewriter, MentionRewriter, SyntheticPair, DEFAULT_PREFIX};

/// Offsets mixed into `rng_seed` so each consumer gets its own stream.
const INIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const CROSS_STREAM: u64 = 0xc2b2_ae3d_27d4_eb4f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub num_buckets: Buckets,
    pub flags: EncoderFlags,
    /// Shared by both stages; `stage` is set per stage.
    pub meta: MetaConfig,
    /// Inner learning rate of the ranker stage, which sees far larger
    /// feature magnitudes than the embedding rows.
    pub cross_alpha: f64,
    pub reweighting: Reweighting,
    /// Candidates per example when building ranker training sets.
    pub train_candidates: usize,
    pub disable_rewrite: bool,
    pub prefix: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: DEFAULT_DIM,
            num_buckets: Buckets::default(),
            flags: EncoderFlags::default(),
            meta: MetaConfig::default(),
            cross_alpha: MetaConfig::default().alpha,
            reweighting: Reweighting::Meta,
            train_candidates: 16,
            disable_rewrite: false,
            prefix: DEFAULT_PREFIX.to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.train_candidates == 0 {
            return Err(Error::Config("train_candidates must be positive".into()));
        }
        if !(self.cross_alpha > 0.0 && self.cross_alpha.is_finite()) {
            return Err(Error::Config(format!("cross_alpha must be positive, got {}", self.cross_alpha)));
        }
        if self.meta.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        Ok(())
    }
}

/// Ordered `key=value` record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest(Vec<(String, String)>);

impl Manifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.0
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: LinkingModel,
    /// Ranker-stage cumulative weight of every synthetic pair, in input order.
    pub weights: Vec<WeightRecord>,
    pub biencoder_weights: Vec<WeightRecord>,
    pub manifest: Manifest,
}

/// Candidate set per example: top `k` from the example's domain with the gold
/// swapped into the last slot when retrieval misses it.
pub fn build_candidate_sets(
    params: &BiEncoderParams,
    flags: EncoderFlags,
    examples: &[MentionExample],
    kb: &Kb,
    k: usize,
) -> Result<Vec<CandidateSet>> {
    let mut indices: BTreeMap<&str, EntityIndex> = BTreeMap::new();
    for ex in examples {
        kb.resolve(ex)?;
        if !indices.contains_key(ex.domain.as_str()) {
            indices.insert(&ex.domain, EntityIndex::build(params, flags, kb, kb.domain_indices(&ex.domain)));
        }
    }
    Ok(par::map(examples, |ex| {
        let gold = kb.index_of(&ex.domain, &ex.entity_id).expect("resolved above");
        let m = encode_mention(params, ex);
        let mut cands = indices[ex.domain.as_str()].retrieve_topk(&m, k);
        let gold_pos = match cands.iter().position(|c| c.kb_index == gold) {
            Some(p) => p,
            None => {
                let last = cands.len() - 1;
                cands[last].kb_index = gold;
                cands[last].entity_id = ex.entity_id.clone();
                last
            }
        };
        let features = cands
            .iter()
            .map(|c| {
                let e = kb.entity(c.kb_index);
                cross_features_from_vectors(&m, &encode_entity(params, e), ex, e)
            })
            .collect();
        CandidateSet {
            ids: cands.into_iter().map(|c| c.entity_id).collect(),
            features,
            gold: gold_pos,
        }
    }))
}

fn stage_config(config: &TrainConfig, stage: Stage, syn_len: usize, seed_len: usize) -> MetaConfig {
    let base = &config.meta;
    MetaConfig {
        alpha: match stage {
            Stage::Biencoder => base.alpha,
            Stage::Crossranker => config.cross_alpha,
        },
        n_syn: base.n_syn.min(syn_len),
        m_seed: base.m_seed.min(seed_len),
        stage,
        rng_seed: match stage {
            Stage::Biencoder => base.rng_seed,
            Stage::Crossranker => base.rng_seed ^ CROSS_STREAM,
        },
        ..*base
    }
}

/// Trains both stages on already generated synthetic pairs.
pub fn train_model(syn: &[MentionExample], seeds: &[MentionExample], kb: &Kb, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    if syn.is_empty() {
        return Err(Error::NoSyntheticPairs);
    }
    if seeds.is_empty() {
        return Err(Error::invalid("seed set is empty"));
    }
    let flags = config.flags;
    let syn_feats = featurize_all(syn, kb, config.num_buckets)?;
    let seed_feats = featurize_all(seeds, kb, config.num_buckets)?;
    let init = BiEncoderParams::init_uniform(config.dim, config.num_buckets, config.meta.rng_seed ^ INIT_STREAM)?;

    let bi_syn = BiEncoderObjective { data: &syn_feats, flags };
    let bi_seed = BiEncoderObjective { data: &seed_feats, flags };
    let bi_config = stage_config(config, Stage::Biencoder, syn.len(), seeds.len());
    let seed_loss_before = full_loss(&bi_seed, &init).ok();
    let (bi, bi_cumulative) = meta_train_with(&bi_syn, &bi_seed, &bi_config, init, config.reweighting)?;
    let seed_loss_after = full_loss(&bi_seed, &bi).ok();

    let k = config.train_candidates;
    let syn_sets = build_candidate_sets(&bi, flags, syn, kb, k)?;
    let seed_sets = build_candidate_sets(&bi, flags, seeds, kb, k)?;
    let cross_syn = CrossObjective { data: &syn_sets };
    let cross_seed = CrossObjective { data: &seed_sets };
    let cross_config = stage_config(config, Stage::Crossranker, syn.len(), seeds.len());
    let cross_init = CrossRankerParams::default();
    let cross_loss_before = full_loss(&cross_seed, &cross_init)?;
    let (cross, cumulative) = meta_train_with(&cross_syn, &cross_seed, &cross_config, cross_init, config.reweighting)?;
    let cross_loss_after = full_loss(&cross_seed, &cross)?;

    let records = |cumulative: &[f64]| -> Vec<WeightRecord> {
        syn.iter()
            .zip(cumulative)
            .map(|(ex, &w)| WeightRecord {
                pair_id: ex.id.clone(),
                cumulative_weight: w,
                provenance: ex.provenance,
            })
            .collect()
    };

    let mut manifest = Manifest::default();
    manifest.push("rng_seed", config.meta.rng_seed);
    manifest.push("reweighting", format!("{:?}", config.reweighting).to_lowercase());
    manifest.push("steps", config.meta.steps);
    manifest.push("biencoder.steps", bi_config.steps);
    manifest.push("crossranker.steps", cross_config.steps);
    manifest.push("dim", config.dim);
    manifest.push("num_buckets", config.num_buckets.get());
    manifest.push("count.synthetic", syn.len());
    manifest.push("count.seed_set", seeds.len());
    for p in Provenance::ALL {
        manifest.push(format!("count.provenance.{p}"), syn.iter().filter(|e| e.provenance == p).count());
    }
    let loss = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
    manifest.push("loss.biencoder.seed.initial", loss(seed_loss_before));
    manifest.push("loss.biencoder.seed.final", loss(seed_loss_after));
    manifest.push("loss.crossranker.seed.initial", cross_loss_before);
    manifest.push("loss.crossranker.seed.final", cross_loss_after);
    let selected = |c: &[f64]| c.iter().filter(|&&w| w > 0.0).count();
    manifest.push("selected.biencoder", selected(&bi_cumulative));
    manifest.push("selected.crossranker", selected(&cumulative));

    Ok(TrainOutput {
        model: LinkingModel { flags, bi, cross },
        weights: records(&cumulative),
        biencoder_weights: records(&bi_cumulative),
        manifest,
    })
}

/// Everything a run reads.
#[derive(Debug, Clone, Copy)]
pub struct PipelineInputs<'a> {
    /// Entities of every domain involved, target and source.
    pub kb: &'a Kb,
    pub target_documents: &'a [Document],
    pub seeds: &'a [MentionExample],
    /// Labeled pairs from other domains, mixed into the synthetic pool.
    pub source_pairs: &'a [MentionExample],
    pub dev: Option<&'a [MentionExample]>,
}

/// Exact match, rewrite (built-in extractive rewriter unless one is given),
/// then [`train_model`]. Returns the synthetic pairs alongside the output.
pub fn train_pipeline(
    inputs: PipelineInputs<'_>,
    config: &TrainConfig,
    rewriter: Option<&mut dyn MentionRewriter>,
) -> Result<(Vec<SyntheticPair>, TrainOutput)> {
    if inputs.kb.is_empty() {
        return Err(Error::invalid("knowledge base is empty"));
    }
    let exact = exact_match(inputs.target_documents, inputs.kb);
    if exact.is_empty() {
        return Err(Error::NoSyntheticPairs);
    }
    let pairs = if config.disable_rewrite {
        exact
    } else {
        match rewriter {
            Some(r) => rewrite_mentions(&exact, r, inputs.kb, &config.prefix)?,
            None => {
                let mut r = BaselineRewriter::new(inputs.kb, inputs.target_documents, &config.prefix);
                rewrite_mentions(&exact, &mut r, inputs.kb, &config.prefix)?
            }
        }
    };
    let mut syn: Vec<MentionExample> = pairs.iter().map(|p| p.example.clone()).collect();
    syn.extend(inputs.source_pairs.iter().cloned());
    let mut out = train_model(&syn, inputs.seeds, inputs.kb, config)?;
    out.manifest.push("count.source", inputs.source_pairs.len());
    if let Some(dev) = inputs.dev {
        let report = evaluate(&out.model, dev, inputs.kb, DEFAULT_K)?;
        out.manifest.push("dev.recall_at_k", report.recall_at_k);
        out.manifest.push("dev.n_acc", report.n_acc);
        out.manifest.push("dev.u_acc", report.u_acc);
    }
    Ok((pairs, out))
}
