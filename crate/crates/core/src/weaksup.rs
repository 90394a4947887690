//! Synthetic in-domain training data.
//!
//! Exact matching links document spans to entities whose title tokens they
//! reproduce. Mention rewriting then swaps each matched mention for a short
//! summary of the gold entity's description, so the pair no longer gives the
//! answer away by string identity. Also here: zero-shot seed heuristics,
//! random-relinked "bad" pairs for denoising experiments, and a sentinel-masked
//! corpus for adapting an external generator to the target domain.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::CONTEXT_WINDOW;
use crate::error::{Error, Result};
use crate::kb::{split_disambiguation, tokenize, tokenize_spans, Document, Entity, Kb, MentionExample, Provenance, TokenSpan};
use crate::par;

pub const DEFAULT_PREFIX: &str = "summarize: ";
pub const MAX_SEED_MENTION_TOKENS: usize = 8;
pub const MEAN_NOISE_SPAN: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    #[serde(flatten)]
    pub example: MentionExample,
    pub source_entity_id: String,
}

/// Cuts `text` into (left context, mention, right context) around tokens
/// `start..end`, keeping at most [`CONTEXT_WINDOW`] tokens on each side.
fn split_around(text: &str, spans: &[TokenSpan], start: usize, end: usize) -> (String, String, String) {
    let left = if start == 0 {
        String::new()
    } else {
        let from = spans[start.saturating_sub(CONTEXT_WINDOW)].start;
        text[from..spans[start].start].trim().to_string()
    };
    let mention = text[spans[start].start..spans[end - 1].end].to_string();
    let right = if end == spans.len() {
        String::new()
    } else {
        let to = spans[(end + CONTEXT_WINDOW).min(spans.len()) - 1].end;
        text[spans[end - 1].end..to].trim().to_string()
    };
    (left, mention, right)
}

struct TitleIndex {
    by_tokens: HashMap<Vec<String>, String>,
    max_len: usize,
}

fn title_indices(kb: &Kb) -> HashMap<&str, TitleIndex> {
    let mut out: HashMap<&str, TitleIndex> = HashMap::new();
    for e in kb.entities() {
        let toks = tokenize(&e.title);
        let idx = out.entry(e.domain.as_str()).or_insert_with(|| TitleIndex {
            by_tokens: HashMap::new(),
            max_len: 0,
        });
        idx.max_len = idx.max_len.max(toks.len());
        idx.by_tokens
            .entry(toks)
            .and_modify(|id| {
                if e.id < *id {
                    *id = e.id.clone();
                }
            })
            .or_insert_with(|| e.id.clone());
    }
    out
}

/// Leftmost-longest scan for spans whose tokens equal an entity title.
pub fn exact_match(documents: &[Document], kb: &Kb) -> Vec<SyntheticPair> {
    let titles = title_indices(kb);
    par::map(documents, |doc| {
        let Some(index) = titles.get(doc.domain.as_str()) else {
            return Vec::new();
        };
        let spans = tokenize_spans(&doc.text);
        let tokens: Vec<String> = spans.iter().map(|s| s.token.clone()).collect();
        let mut pairs = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = index.max_len.min(tokens.len() - i);
            let hit = (1..=longest)
                .rev()
                .find_map(|len| index.by_tokens.get(&tokens[i..i + len]).map(|id| (len, id)));
            match hit {
                Some((len, id)) => {
                    let (left, mention, right) = split_around(&doc.text, &spans, i, i + len);
                    pairs.push(SyntheticPair {
                        example: MentionExample {
                            id: format!("{}#{i}", doc.id),
                            context_left: left,
                            mention,
                            context_right: right,
                            entity_id: id.clone(),
                            domain: doc.domain.clone(),
                            provenance: Provenance::Exact,
                            overlap_category: None,
                        },
                        source_entity_id: id.clone(),
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        pairs
    })
    .into_iter()
    .flatten()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub entity_id: String,
    pub domain: String,
    /// The entity description behind the summarization prefix.
    pub prompt: String,
}

impl RewriteRequest {
    pub fn new(entity: &Entity, prefix: &str) -> Self {
        RewriteRequest {
            entity_id: entity.id.clone(),
            domain: entity.domain.clone(),
            prompt: format!("{prefix}{}", entity.description),
        }
    }
}

/// Produces a short mention for each request, in request order.
pub trait MentionRewriter {
    fn rewrite(&mut self, requests: &[RewriteRequest]) -> Result<Vec<String>>;
}

/// Rewrites every exact pair with the mention generated for its gold entity.
/// Pairs whose rewrite is empty or just echoes the title stay exact.
pub fn rewrite_mentions(
    pairs: &[SyntheticPair],
    rewriter: &mut dyn MentionRewriter,
    kb: &Kb,
    prefix: &str,
) -> Result<Vec<SyntheticPair>> {
    if let Some(p) = pairs.iter().find(|p| p.example.provenance != Provenance::Exact) {
        return Err(Error::invalid(format!(
            "rewrite expects exact pairs, {:?} is {}",
            p.example.id, p.example.provenance
        )));
    }
    // One request per distinct gold entity, in first-seen order.
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut requests = Vec::new();
    let mut pair_slots = Vec::with_capacity(pairs.len());
    for p in pairs {
        let idx = kb.resolve(&p.example)?;
        let s = *slot.entry(idx).or_insert_with(|| {
            requests.push(RewriteRequest::new(kb.entity(idx), prefix));
            requests.len() - 1
        });
        pair_slots.push((idx, s));
    }
    let mentions = rewriter.rewrite(&requests)?;
    if mentions.len() != requests.len() {
        return Err(Error::Rewriter {
            entity_id: requests.get(mentions.len()).map(|r| r.entity_id.clone()).unwrap_or_default(),
            message: format!("expected {} rewrites, got {}", requests.len(), mentions.len()),
        });
    }
    Ok(pairs
        .iter()
        .zip(pair_slots)
        .map(|(p, (idx, s))| {
            let new = mentions[s].trim();
            let toks = tokenize(new);
            if toks.is_empty() || toks == tokenize(&kb.entity(idx).title) {
                return p.clone();
            }
            let mut out = p.clone();
            out.example.mention = new.to_string();
            out.example.provenance = Provenance::Rewritten;
            out
        })
        .collect())
}

/// Document frequencies of one domain's corpus.
#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub doc_freq: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut stats = CorpusStats::default();
        for t in texts {
            stats.num_docs += 1;
            let uniq: HashSet<String> = tokenize(t).into_iter().collect();
            for tok in uniq {
                *stats.doc_freq.entry(tok).or_default() += 1;
            }
        }
        stats
    }

    /// Smoothed inverse document frequency, `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.doc_freq.get(token).copied().unwrap_or(0);
        ((1.0 + self.num_docs as f64) / (1.0 + df as f64)).ln() + 1.0
    }
}

pub fn corpus_stats_by_domain(documents: &[Document]) -> HashMap<String, CorpusStats> {
    let mut grouped: HashMap<&str, Vec<&str>> = HashMap::new();
    for d in documents {
        grouped.entry(&d.domain).or_default().push(&d.text);
    }
    grouped
        .into_iter()
        .map(|(dom, texts)| (dom.to_string(), CorpusStats::from_texts(texts)))
        .collect()
}

/// Extractive stand-in for a generative rewriter: the description n-gram
/// (n = 1..=4) with the highest mean TF-IDF, never the title itself. Ties go
/// to the earliest start, then the shorter n-gram.
pub fn baseline_rewrite(title: &str, description: &str, stats: &CorpusStats) -> String {
    let spans = tokenize_spans(description);
    if spans.is_empty() {
        return String::new();
    }
    let title_toks = tokenize(title);
    let mut tf: HashMap<&str, f64> = HashMap::new();
    for s in &spans {
        *tf.entry(s.token.as_str()).or_default() += 1.0;
    }
    let len = spans.len() as f64;
    let weight: Vec<f64> = spans
        .iter()
        .map(|s| tf[s.token.as_str()] / len * stats.idf(&s.token))
        .collect();

    let mut best: Option<(f64, usize, usize)> = None;
    for start in 0..spans.len() {
        for n in 1..=4.min(spans.len() - start) {
            let window = &spans[start..start + n];
            if window.iter().map(|s| &s.token).eq(title_toks.iter()) {
                continue;
            }
            let score = weight[start..start + n].iter().sum::<f64>() / n as f64;
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, start, n));
            }
        }
    }
    match best {
        Some((_, start, n)) => description[spans[start].start..spans[start + n - 1].end].to_string(),
        None => String::new(),
    }
}

pub struct BaselineRewriter<'a> {
    kb: &'a Kb,
    stats: HashMap<String, CorpusStats>,
    prefix: String,
}

impl<'a> BaselineRewriter<'a> {
    pub fn new(kb: &'a Kb, documents: &[Document], prefix: &str) -> Self {
        BaselineRewriter {
            kb,
            stats: corpus_stats_by_domain(documents),
            prefix: prefix.to_string(),
        }
    }
}

impl MentionRewriter for BaselineRewriter<'_> {
    fn rewrite(&mut self, requests: &[RewriteRequest]) -> Result<Vec<String>> {
        let empty = CorpusStats::default();
        requests
            .iter()
            .map(|r| {
                let entity = self.kb.get(&r.domain, &r.entity_id).ok_or_else(|| Error::Rewriter {
                    entity_id: r.entity_id.clone(),
                    message: "entity not in knowledge base".into(),
                })?;
                let description = r.prompt.strip_prefix(&self.prefix).unwrap_or(&r.prompt);
                let stats = self.stats.get(&r.domain).unwrap_or(&empty);
                Ok(baseline_rewrite(&entity.title, description, stats))
            })
            .collect()
    }
}

/// Rewriter backed by an external process speaking line-delimited JSON:
/// requests `{"id","prompt"}` on its stdin, answers `{"id","mention"}` on its
/// stdout in any order. Closing stdin ends the session.
pub struct SubprocessRewriter {
    command: String,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    id: String,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    id: String,
    mention: String,
}

impl SubprocessRewriter {
    pub fn new(command: impl Into<String>) -> Self {
        SubprocessRewriter { command: command.into() }
    }
}

impl MentionRewriter for SubprocessRewriter {
    fn rewrite(&mut self, requests: &[RewriteRequest]) -> Result<Vec<String>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let fail = |i: usize, message: String| Error::Rewriter {
            entity_id: requests[i.min(requests.len() - 1)].entity_id.clone(),
            message,
        };
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(0, format!("cannot start {:?}: {e}", self.command)))?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let payload: Vec<u8> = requests
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                let mut line = serde_json::to_vec(&WireRequest {
                    id: i.to_string(),
                    prompt: &r.prompt,
                })
                .expect("request serializes");
                line.push(b'\n');
                line
            })
            .collect();
        let writer = std::thread::spawn(move || stdin.write_all(&payload));

        let mut answers: Vec<Option<String>> = vec![None; requests.len()];
        for line in BufReader::new(stdout).lines() {
            let line = line.map_err(|e| fail(0, format!("read failed: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let resp: WireResponse =
                serde_json::from_str(&line).map_err(|e| fail(0, format!("bad response {line:?}: {e}")))?;
            let slot = resp
                .id
                .parse::<usize>()
                .ok()
                .filter(|&i| i < requests.len())
                .ok_or_else(|| fail(0, format!("response for unknown id {:?}", resp.id)))?;
            answers[slot] = Some(resp.mention);
        }
        let write_result = writer.join().map_err(|_| fail(0, "writer thread panicked".into()))?;
        let status = child.wait().map_err(|e| fail(0, e.to_string()))?;
        if let Some(i) = answers.iter().position(Option::is_none) {
            return Err(fail(i, format!("no response (child exited with {status})")));
        }
        write_result.map_err(|e| fail(0, format!("write failed: {e}")))?;
        if !status.success() {
            return Err(fail(0, format!("child exited with {status}")));
        }
        Ok(answers.into_iter().map(Option::unwrap).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoisingExample {
    pub masked_text: String,
    pub target_text: String,
}

pub fn sentinel(i: usize) -> String {
    format!("<extra_id_{i}>")
}

fn parse_sentinel(tok: &str) -> Option<usize> {
    tok.strip_prefix("<extra_id_")?.strip_suffix('>')?.parse().ok()
}

/// A random composition of `total` into `parts` positive integers.
fn random_composition(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    cuts.push(total);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let len = c - prev;
            prev = c;
            len
        })
        .collect()
}

/// Noise spans `(start, end)` over `len` tokens: about `ratio * len` tokens in
/// spans of mean length 3, each preceded by at least one kept token.
fn noise_spans(len: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    if len < 2 {
        return Vec::new();
    }
    let num_noise = ((len as f64 * ratio).round() as usize).min(len - 1);
    if num_noise == 0 {
        return Vec::new();
    }
    let num_keep = len - num_noise;
    let num_spans = ((num_noise as f64 / MEAN_NOISE_SPAN).round() as usize)
        .max(1)
        .min(num_keep);
    let noise = random_composition(rng, num_noise, num_spans);
    let keep = random_composition(rng, num_keep, num_spans);
    let mut pos = 0;
    keep.iter()
        .zip(&noise)
        .map(|(k, n)| {
            pos += k;
            let span = (pos, pos + n);
            pos += n;
            span
        })
        .collect()
}

/// Masks whitespace tokens of each document with ordered sentinels; the target
/// lists each sentinel followed by the tokens it hides.
pub fn build_denoising_corpus(documents: &[Document], mask_ratio: f64, rng_seed: u64) -> Result<Vec<DenoisingExample>> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::invalid(format!("mask_ratio must lie in (0, 1), got {mask_ratio}")));
    }
    Ok(par::map_range(documents.len(), |d| {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(d as u64);
        let tokens: Vec<&str> = documents[d].text.split_whitespace().collect();
        mask_tokens(&tokens, &noise_spans(tokens.len(), mask_ratio, &mut rng))
    }))
}

fn mask_tokens(tokens: &[&str], spans: &[(usize, usize)]) -> DenoisingExample {
    let mut masked: Vec<String> = Vec::new();
    let mut target: Vec<String> = Vec::new();
    let mut pos = 0;
    for (s, &(start, end)) in spans.iter().enumerate() {
        masked.extend(tokens[pos..start].iter().map(|t| t.to_string()));
        masked.push(sentinel(s));
        target.push(sentinel(s));
        target.extend(tokens[start..end].iter().map(|t| t.to_string()));
        pos = end;
    }
    masked.extend(tokens[pos..].iter().map(|t| t.to_string()));
    DenoisingExample {
        masked_text: masked.join(" "),
        target_text: target.join(" "),
    }
}

/// Inverse of the masking: restores the original whitespace tokens.
pub fn demask(example: &DenoisingExample) -> Result<Vec<String>> {
    let mut fills: HashMap<usize, Vec<&str>> = HashMap::new();
    let mut current: Option<usize> = None;
    for tok in example.target_text.split_whitespace() {
        if let Some(s) = parse_sentinel(tok) {
            fills.insert(s, Vec::new());
            current = Some(s);
        } else {
            let s = current.ok_or_else(|| Error::invalid("target text does not start with a sentinel"))?;
            fills.get_mut(&s).expect("inserted").push(tok);
        }
    }
    let mut out = Vec::new();
    for tok in example.masked_text.split_whitespace() {
        match parse_sentinel(tok) {
            Some(s) => out.extend(
                fills
                    .get(&s)
                    .ok_or_else(|| Error::invalid(format!("sentinel {s} missing from target")))?
                    .iter()
                    .map(|t| t.to_string()),
            ),
            None => out.push(tok.to_string()),
        }
    }
    Ok(out)
}

fn domain_vocabulary(kb: &Kb, documents: &[Document]) -> HashMap<String, HashSet<String>> {
    let mut vocab: HashMap<String, HashSet<String>> = HashMap::new();
    for d in documents {
        vocab.entry(d.domain.clone()).or_default().extend(tokenize(&d.text));
    }
    for e in kb.entities() {
        let v = vocab.entry(e.domain.clone()).or_default();
        v.extend(tokenize(&e.title));
        v.extend(tokenize(&e.description));
    }
    vocab
}

/// Zero-shot seed filter: rewritten mentions of 1..=8 in-vocabulary tokens
/// sharing no token with the gold title.
pub fn filter_seed(pairs: &[SyntheticPair], kb: &Kb, documents: &[Document]) -> Vec<MentionExample> {
    let vocab = domain_vocabulary(kb, documents);
    pairs
        .iter()
        .filter(|p| p.example.provenance == Provenance::Rewritten)
        .filter(|p| {
            let ex = &p.example;
            let Some(gold) = kb.get(&ex.domain, &ex.entity_id) else {
                return false;
            };
            let toks = tokenize(&ex.mention);
            let title: HashSet<String> = tokenize(&gold.title).into_iter().collect();
            let in_vocab = vocab.get(&ex.domain).is_some_and(|v| toks.iter().all(|t| v.contains(t)));
            (1..=MAX_SEED_MENTION_TOKENS).contains(&toks.len())
                && in_vocab
                && toks.iter().all(|t| !title.contains(t))
        })
        .map(|p| MentionExample {
            provenance: Provenance::Seed,
            ..p.example.clone()
        })
        .collect()
}

/// Zero-shot seeds from entities titled `"X (phrase)"` whose own description
/// mentions X. Only the first occurrence per entity is used.
pub fn self_match_seed(kb: &Kb) -> Vec<MentionExample> {
    kb.entities()
        .iter()
        .filter_map(|e| {
            let (base, _) = split_disambiguation(&e.title)?;
            let needle = tokenize(base);
            if needle.is_empty() {
                return None;
            }
            let spans = tokenize_spans(&e.description);
            let start = spans
                .windows(needle.len())
                .position(|w| w.iter().map(|s| &s.token).eq(needle.iter()))?;
            let (left, mention, right) = split_around(&e.description, &spans, start, start + needle.len());
            Some(MentionExample {
                id: format!("self:{}", e.id),
                context_left: left,
                mention,
                context_right: right,
                entity_id: e.id.clone(),
                domain: e.domain.clone(),
                provenance: Provenance::Seed,
                overlap_category: None,
            })
        })
        .collect()
}

/// Relinks every pair to a uniformly drawn different entity of its domain.
pub fn generate_bad_pairs(pairs: &[SyntheticPair], kb: &Kb, rng_seed: u64) -> Result<Vec<SyntheticPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    pairs
        .iter()
        .map(|p| {
            let ex = &p.example;
            let pool = kb.domain_indices(&ex.domain);
            if pool.len() < 2 {
                return Err(Error::invalid(format!(
                    "domain {:?} needs at least 2 entities to relink pairs",
                    ex.domain
                )));
            }
            let own = kb.resolve(ex)?;
            let own_pos = pool.iter().position(|&i| i == own).expect("entity is in its domain");
            let r = rng.gen_range(0..pool.len() - 1);
            let pick = pool[if r >= own_pos { r + 1 } else { r }];
            Ok(SyntheticPair {
                example: MentionExample {
                    id: format!("{}:bad", ex.id),
                    entity_id: kb.entity(pick).id.clone(),
                    provenance: Provenance::Bad,
                    overlap_category: None,
                    ..ex.clone()
                },
                source_entity_id: ex.entity_id.clone(),
            })
        })
        .collect()
}
