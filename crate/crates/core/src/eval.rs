//! Two-stage evaluation and the data analyses built on top of training output.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    cross_features_from_vectors, encode_entity, encode_mention, rank_candidates, Candidate, EntityIndex,
    LinkingModel,
};
use crate::error::{Error, Result};
use crate::kb::{categorize_overlap, tokenize, Kb, MentionExample, OverlapCategory, Provenance};
use crate::par;

pub const DEFAULT_K: usize = 64;

/// Picks the final answer from first-stage candidates.
pub trait SecondStage: Sync {
    /// Entity id ranked first, or `None` for an empty candidate list.
    fn top1(&self, query: &MentionExample, mention_vec: &[f64], candidates: &[Candidate]) -> Option<String>;
}

/// The trained linear ranker over joint features.
pub struct CrossStage<'a> {
    model: &'a LinkingModel,
    kb: &'a Kb,
    entity_vectors: Vec<Vec<f64>>,
}

impl<'a> CrossStage<'a> {
    pub fn new(model: &'a LinkingModel, kb: &'a Kb) -> Self {
        let entity_vectors = par::map(kb.entities(), |e| encode_entity(&model.bi, e));
        CrossStage {
            model,
            kb,
            entity_vectors,
        }
    }

    pub fn entity_vector(&self, kb_index: usize) -> &[f64] {
        &self.entity_vectors[kb_index]
    }
}

impl SecondStage for CrossStage<'_> {
    fn top1(&self, query: &MentionExample, mention_vec: &[f64], candidates: &[Candidate]) -> Option<String> {
        let feats: Vec<_> = candidates
            .iter()
            .map(|c| {
                let f = cross_features_from_vectors(
                    mention_vec,
                    &self.entity_vectors[c.kb_index],
                    query,
                    self.kb.entity(c.kb_index),
                );
                (c.entity_id.clone(), f)
            })
            .collect();
        rank_candidates(&self.model.cross, &feats).into_iter().next().map(|(id, _)| id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub recalled: bool,
    pub correct: bool,
    pub category: OverlapCategory,
}

fn category_of(query: &MentionExample, kb: &Kb) -> OverlapCategory {
    query.overlap_category.unwrap_or_else(|| {
        kb.get(&query.domain, &query.entity_id)
            .and_then(|e| categorize_overlap(&query.mention, &e.title).ok())
            .unwrap_or(OverlapCategory::LowOverlap)
    })
}

fn domain_indices(model: &LinkingModel, queries: &[MentionExample], kb: &Kb) -> HashMap<String, EntityIndex> {
    let mut out = HashMap::new();
    for q in queries {
        if !out.contains_key(&q.domain) {
            let idx = EntityIndex::build(&model.bi, model.flags, kb, kb.domain_indices(&q.domain));
            out.insert(q.domain.clone(), idx);
        }
    }
    out
}

/// Candidate generation plus second-stage ranking for every query, in order.
pub fn run_queries(
    model: &LinkingModel,
    ranker: &dyn SecondStage,
    queries: &[MentionExample],
    kb: &Kb,
    k: usize,
) -> Result<Vec<QueryOutcome>> {
    if queries.is_empty() {
        return Err(Error::invalid("no queries to evaluate"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    for q in queries {
        kb.resolve(q)?;
    }
    let indices = domain_indices(model, queries, kb);
    Ok(par::map(queries, |q| {
        let mention_vec = encode_mention(&model.bi, q);
        let candidates = indices[&q.domain].retrieve_topk(&mention_vec, k);
        let recalled = candidates.iter().any(|c| c.entity_id == q.entity_id);
        let correct = recalled && ranker.top1(q, &mention_vec, &candidates).as_deref() == Some(q.entity_id.as_str());
        QueryOutcome {
            recalled,
            correct,
            category: category_of(q, kb),
        }
    }))
}

fn recall_of(outcomes: &[QueryOutcome]) -> f64 {
    outcomes.iter().filter(|o| o.recalled).count() as f64 / outcomes.len() as f64
}

fn n_acc_of(outcomes: &[QueryOutcome]) -> Result<f64> {
    let recalled = outcomes.iter().filter(|o| o.recalled).count();
    if recalled == 0 {
        return Err(Error::NoRecalledQueries);
    }
    Ok(outcomes.iter().filter(|o| o.correct).count() as f64 / recalled as f64)
}

/// Fraction of queries whose gold entity is among the top `k` candidates.
pub fn recall_at_k(model: &LinkingModel, queries: &[MentionExample], kb: &Kb, k: usize) -> Result<f64> {
    let ranker = CrossStage::new(model, kb);
    Ok(recall_of(&run_queries(model, &ranker, queries, kb, k)?))
}

/// Second-stage accuracy over the queries whose gold was recalled.
pub fn normalized_accuracy(model: &LinkingModel, queries: &[MentionExample], kb: &Kb, k: usize) -> Result<f64> {
    let ranker = CrossStage::new(model, kb);
    n_acc_of(&run_queries(model, &ranker, queries, kb, k)?)
}

pub fn unnormalized_accuracy(recall: f64, n_acc: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&recall) || !(0.0..=1.0).contains(&n_acc) {
        return Err(Error::invalid(format!(
            "fractions must lie in [0, 1], got {recall} and {n_acc}"
        )));
    }
    Ok(recall * n_acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub u_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub num_queries: usize,
    pub recall_at_k: f64,
    pub n_acc: f64,
    pub u_acc: f64,
    pub per_category: BTreeMap<OverlapCategory, CategoryStats>,
}

impl EvalReport {
    fn per_category(outcomes: &[QueryOutcome]) -> BTreeMap<OverlapCategory, CategoryStats> {
        let mut tally: BTreeMap<OverlapCategory, (usize, usize)> = BTreeMap::new();
        for o in outcomes {
            let t = tally.entry(o.category).or_default();
            t.0 += 1;
            t.1 += usize::from(o.correct);
        }
        tally
            .into_iter()
            .map(|(c, (n, ok))| {
                (
                    c,
                    CategoryStats {
                        count: n,
                        u_acc: ok as f64 / n as f64,
                    },
                )
            })
            .collect()
    }

    pub fn from_outcomes(outcomes: &[QueryOutcome], k: usize) -> Result<Self> {
        let recall = recall_of(outcomes);
        let n_acc = n_acc_of(outcomes)?;
        Ok(EvalReport {
            k,
            num_queries: outcomes.len(),
            recall_at_k: recall,
            n_acc,
            u_acc: unnormalized_accuracy(recall, n_acc)?,
            per_category: Self::per_category(outcomes),
        })
    }

    /// Stable `key=value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "num_queries={}", self.num_queries);
        let _ = writeln!(s, "recall_at_k={}", self.recall_at_k);
        let _ = writeln!(s, "n_acc={}", self.n_acc);
        let _ = writeln!(s, "u_acc={}", self.u_acc);
        for (c, st) in &self.per_category {
            let _ = writeln!(s, "category.{c}.count={}", st.count);
            let _ = writeln!(s, "category.{c}.u_acc={}", st.u_acc);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("report line without '=': {line:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::invalid(format!("report is missing {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::invalid(format!("bad {k}"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::invalid(format!("bad {k}"))) };
        let mut per_category = BTreeMap::new();
        for c in OverlapCategory::ALL {
            if kv.contains_key(format!("category.{c}.count").as_str()) {
                per_category.insert(
                    c,
                    CategoryStats {
                        count: int(&format!("category.{c}.count"))?,
                        u_acc: num(&format!("category.{c}.u_acc"))?,
                    },
                );
            }
        }
        Ok(EvalReport {
            k: int("k")?,
            num_queries: int("num_queries")?,
            recall_at_k: num("recall_at_k")?,
            n_acc: num("n_acc")?,
            u_acc: num("u_acc")?,
            per_category,
        })
    }
}

pub fn evaluate_with(
    model: &LinkingModel,
    ranker: &dyn SecondStage,
    queries: &[MentionExample],
    kb: &Kb,
    k: usize,
) -> Result<EvalReport> {
    EvalReport::from_outcomes(&run_queries(model, ranker, queries, kb, k)?, k)
}

pub fn evaluate(model: &LinkingModel, queries: &[MentionExample], kb: &Kb, k: usize) -> Result<EvalReport> {
    evaluate_with(model, &CrossStage::new(model, kb), queries, kb, k)
}

/// Links a query when its tokens equal some title in its domain (smallest id
/// on ties). Reported as a one-stage system: recall carries the accuracy and
/// the normalized accuracy is 1.
pub fn name_matching_baseline(queries: &[MentionExample], kb: &Kb) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::invalid("no queries to evaluate"));
    }
    let mut titles: HashMap<(&str, Vec<String>), &str> = HashMap::new();
    for e in kb.entities() {
        titles
            .entry((e.domain.as_str(), tokenize(&e.title)))
            .and_modify(|id| {
                if e.id.as_str() < *id {
                    *id = &e.id;
                }
            })
            .or_insert(&e.id);
    }
    let outcomes: Vec<QueryOutcome> = queries
        .iter()
        .map(|q| {
            let hit = titles.get(&(q.domain.as_str(), tokenize(&q.mention)));
            let correct = hit.is_some_and(|id| *id == q.entity_id);
            QueryOutcome {
                recalled: correct,
                correct,
                category: category_of(q, kb),
            }
        })
        .collect();
    let u_acc = recall_of(&outcomes);
    Ok(EvalReport {
        k: 1,
        num_queries: outcomes.len(),
        recall_at_k: u_acc,
        n_acc: 1.0,
        u_acc: unnormalized_accuracy(u_acc, 1.0)?,
        per_category: EvalReport::per_category(&outcomes),
    })
}

/// Unigram-overlap F1 with clipped counts over the crate tokenizer.
pub fn rouge1_f1(candidate: &str, reference: &str) -> f64 {
    let count = |toks: Vec<String>| {
        let mut m: HashMap<String, usize> = HashMap::new();
        for t in toks {
            *m.entry(t).or_default() += 1;
        }
        m
    };
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let (c_len, r_len) = (c.len(), r.len());
    if c_len == 0 || r_len == 0 {
        return 0.0;
    }
    let (c, r) = (count(c), count(r));
    let overlap: usize = c.iter().map(|(t, n)| (*n).min(r.get(t).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c_len as f64;
    let rec = overlap as f64 / r_len as f64;
    2.0 * p * rec / (p + rec)
}

/// One line of a weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub pair_id: String,
    pub cumulative_weight: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub ratio_by_provenance: BTreeMap<Provenance, f64>,
    pub counts: BTreeMap<Provenance, usize>,
}

impl SelectionReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (p, n) in &self.counts {
            let _ = writeln!(s, "selection.{p}.count={n}");
            let _ = writeln!(s, "selection.{p}.ratio={}", self.ratio_by_provenance[p]);
        }
        s
    }
}

/// Per provenance class, the fraction of pairs whose cumulative weight is
/// positive.
pub fn selection_ratio_experiment(weights: &[WeightRecord], pairs: &[MentionExample]) -> Result<SelectionReport> {
    let by_id: HashMap<&str, f64> = weights
        .iter()
        .map(|w| (w.pair_id.as_str(), w.cumulative_weight))
        .collect();
    let mut tally: BTreeMap<Provenance, (usize, usize)> = BTreeMap::new();
    for p in pairs {
        let w = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::invalid(format!("pair {:?} has no weight record", p.id)))?;
        let t = tally.entry(p.provenance).or_default();
        t.0 += 1;
        t.1 += usize::from(*w > 0.0);
    }
    Ok(SelectionReport {
        ratio_by_provenance: tally
            .iter()
            .map(|(p, (n, sel))| (*p, *sel as f64 / *n as f64))
            .collect(),
        counts: tally.into_iter().map(|(p, (n, _))| (p, n)).collect(),
    })
}
