//! Knowledge-base data model, tokenization, feature hashing, and loaders.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};

pub const DEFAULT_NUM_BUCKETS: u64 = 1 << 16;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// A lowercased token together with its byte range in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSpan {
    pub token: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_spans(text).into_iter().map(|s| s.token).collect()
}

pub fn tokenize_spans(text: &str) -> Vec<TokenSpan> {
    let mut spans = Vec::new();
    let mut current: Option<TokenSpan> = None;
    for (pos, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            let span = current.get_or_insert_with(|| TokenSpan {
                token: String::new(),
                start: pos,
                end: pos,
            });
            span.token.extend(ch.to_lowercase());
            span.end = pos + ch.len_utf8();
        } else if let Some(span) = current.take() {
            spans.push(span);
        }
    }
    spans.extend(current);
    spans
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Number of hash buckets; validated to be at least 2 on construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct Buckets(u64);

impl Buckets {
    pub fn new(n: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("num_buckets must be >= 2, got {n}")));
        }
        if n > u64::from(u32::MAX) {
            return Err(Error::Config(format!("num_buckets {n} exceeds u32 range")));
        }
        Ok(Buckets(n))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl Default for Buckets {
    fn default() -> Self {
        Buckets(DEFAULT_NUM_BUCKETS)
    }
}

impl TryFrom<u64> for Buckets {
    type Error = Error;
    fn try_from(n: u64) -> Result<Self> {
        Buckets::new(n)
    }
}

impl From<Buckets> for u64 {
    fn from(b: Buckets) -> u64 {
        b.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub u32);

pub fn hash_token(token: &str, buckets: Buckets) -> TokenId {
    TokenId((fnv1a64(token.as_bytes()) % buckets.get()) as u32)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub domain: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Seed,
    Exact,
    Rewritten,
    Bad,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [
        Provenance::Seed,
        Provenance::Exact,
        Provenance::Rewritten,
        Provenance::Bad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Seed => "seed",
            Provenance::Exact => "exact",
            Provenance::Rewritten => "rewritten",
            Provenance::Bad => "bad",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OverlapCategory {
    HighOverlap,
    MultipleCategories,
    AmbiguousSubstring,
    LowOverlap,
}

impl OverlapCategory {
    pub const ALL: [OverlapCategory; 4] = [
        OverlapCategory::HighOverlap,
        OverlapCategory::MultipleCategories,
        OverlapCategory::AmbiguousSubstring,
        OverlapCategory::LowOverlap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OverlapCategory::HighOverlap => "HighOverlap",
            OverlapCategory::MultipleCategories => "MultipleCategories",
            OverlapCategory::AmbiguousSubstring => "AmbiguousSubstring",
            OverlapCategory::LowOverlap => "LowOverlap",
        }
    }
}

impl fmt::Display for OverlapCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionExample {
    pub id: String,
    #[serde(default)]
    pub context_left: String,
    pub mention: String,
    #[serde(default)]
    pub context_right: String,
    pub entity_id: String,
    pub domain: String,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_category: Option<OverlapCategory>,
}

/// Splits a trailing parenthesized disambiguation phrase off a raw title.
/// `"apple (fruit)"` yields `("apple", "fruit")`.
pub fn split_disambiguation(title: &str) -> Option<(&str, &str)> {
    let trimmed = title.trim_end();
    if !trimmed.ends_with(')') {
        return None;
    }
    let open = trimmed.rfind('(')?;
    let base = trimmed[..open].trim_end();
    let phrase = &trimmed[open + 1..trimmed.len() - 1];
    if base.is_empty() {
        return None;
    }
    Some((base, phrase))
}

pub fn categorize_overlap(mention: &str, title: &str) -> Result<OverlapCategory> {
    let m = tokenize(mention);
    let t = tokenize(title);
    if m.is_empty() || t.is_empty() {
        return Err(Error::invalid(format!(
            "cannot categorize overlap of {mention:?} and {title:?}: empty after tokenization"
        )));
    }
    if m == t {
        return Ok(OverlapCategory::HighOverlap);
    }
    if let Some((base, _)) = split_disambiguation(title) {
        if tokenize(base) == m {
            return Ok(OverlapCategory::MultipleCategories);
        }
    }
    if m.len() <= t.len() && t.windows(m.len()).any(|w| w == m.as_slice()) {
        return Ok(OverlapCategory::AmbiguousSubstring);
    }
    Ok(OverlapCategory::LowOverlap)
}

/// Entity store keyed by `(domain, id)`. Immutable after construction.
#[derive(Debug, Clone, Default)]
pub struct Kb {
    entities: Vec<Entity>,
    index: HashMap<String, HashMap<String, usize>>,
    by_domain: HashMap<String, Vec<usize>>,
}

impl Kb {
    pub fn from_entities(entities: Vec<Entity>) -> Result<Self> {
        let numbered = entities.into_iter().enumerate().map(|(i, e)| (i + 1, e));
        Self::build(numbered)
    }

    fn build(records: impl IntoIterator<Item = (usize, Entity)>) -> Result<Self> {
        let mut kb = Kb::default();
        for (line, entity) in records {
            if tokenize(&entity.title).is_empty() {
                return Err(Error::invalid(format!(
                    "entity {:?} on line {line} has an empty title",
                    entity.id
                )));
            }
            let ids = kb.index.entry(entity.domain.clone()).or_default();
            if ids.contains_key(&entity.id) {
                return Err(Error::DuplicateId {
                    id: entity.id,
                    domain: entity.domain,
                    line,
                });
            }
            let idx = kb.entities.len();
            ids.insert(entity.id.clone(), idx);
            kb.by_domain.entry(entity.domain.clone()).or_default().push(idx);
            kb.entities.push(entity);
        }
        Ok(kb)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, idx: usize) -> &Entity {
        &self.entities[idx]
    }

    pub fn index_of(&self, domain: &str, id: &str) -> Option<usize> {
        self.index.get(domain)?.get(id).copied()
    }

    pub fn get(&self, domain: &str, id: &str) -> Option<&Entity> {
        self.index_of(domain, id).map(|i| &self.entities[i])
    }

    /// Indices of all entities in `domain`, in load order.
    pub fn domain_indices(&self, domain: &str) -> &[usize] {
        self.by_domain.get(domain).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Domain names in sorted order.
    pub fn domains(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.by_domain.keys().map(String::as_str).collect();
        names.sort_unstable();
        names
    }

    /// Resolves the example's gold entity, failing with a dangling-entity error.
    pub fn resolve(&self, example: &MentionExample) -> Result<usize> {
        self.index_of(&example.domain, &example.entity_id)
            .ok_or_else(|| Error::DanglingEntity {
                example_id: example.id.clone(),
                entity_id: example.entity_id.clone(),
                domain: example.domain.clone(),
            })
    }
}

/// One domain's entity dictionary plus its raw documents.
#[derive(Debug, Clone)]
pub struct Domain {
    pub name: String,
    pub entities: Vec<Entity>,
    pub documents: Vec<Document>,
}

impl Domain {
    pub fn from_kb(kb: &Kb, name: &str, documents: &[Document]) -> Self {
        Domain {
            name: name.to_string(),
            entities: kb
                .domain_indices(name)
                .iter()
                .map(|&i| kb.entity(i).clone())
                .collect(),
            documents: documents
                .iter()
                .filter(|d| d.domain == name)
                .cloned()
                .collect(),
        }
    }
}

pub fn load_entities(path: &Path) -> Result<Kb> {
    Kb::build(read_jsonl::<Entity>(path)?)
}

pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    Ok(read_jsonl::<Document>(path)?
        .into_iter()
        .map(|(_, d)| d)
        .collect())
}

/// Loads mentions, checks each gold entity resolves, and fills in the overlap
/// category against the gold title.
pub fn load_mentions(path: &Path, kb: &Kb) -> Result<Vec<MentionExample>> {
    read_jsonl::<MentionExample>(path)?
        .into_iter()
        .map(|(line, mut ex)| {
            if tokenize(&ex.mention).is_empty() {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    line,
                    message: format!("mention {:?} is empty", ex.id),
                });
            }
            let gold = kb.entity(kb.resolve(&ex)?);
            ex.overlap_category = Some(categorize_overlap(&ex.mention, &gold.title)?);
            Ok(ex)
        })
        .collect()
}

pub fn save_mentions(path: &Path, examples: &[MentionExample]) -> Result<()> {
    write_jsonl(path, examples)
}

pub fn save_entities(path: &Path, entities: &[Entity]) -> Result<()> {
    write_jsonl(path, entities)
}

pub fn save_documents(path: &Path, documents: &[Document]) -> Result<()> {
    write_jsonl(path, documents)
}
