//! Deterministic toy world for tests, benches and the selftest.
//!
//! Entities carry made-up two-word titles, two alias words, four signature
//! words and a topic. Documents mention one entity by its exact title inside
//! context drawn mostly from that entity's own vocabulary, so exact matching
//! yields clean pairs whose contexts agree with their descriptions. Seeds and
//! test queries use aliases and partial titles instead of full titles.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kb::{categorize_overlap, Buckets, Document, Entity, Kb, MentionExample, OverlapCategory, Provenance};
use crate::meta::TrainConfig;

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "te", "va", "zo", "pe", "ni", "su", "da", "fe", "go", "hi", "ju", "bo",
];
const FILLERS: [&str; 8] = ["the", "of", "and", "in", "is", "to", "with", "from"];
const TOPIC_WORDS: usize = 8;
const SIGNATURE_WORDS: usize = 4;
const CONTEXT_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureConfig {
    pub domain: &'static str,
    pub num_entities: usize,
    pub num_topics: usize,
    pub num_documents: usize,
    pub num_seeds: usize,
    pub num_test: usize,
    /// Every n-th entity gets a parenthesized disambiguation phrase.
    pub disambiguation_every: usize,
    pub rng_seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            domain: "toy",
            num_entities: 200,
            num_topics: 10,
            num_documents: 800,
            num_seeds: 50,
            num_test: 200,
            disambiguation_every: 8,
            rng_seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub kb: Kb,
    pub documents: Vec<Document>,
    pub seeds: Vec<MentionExample>,
    pub test: Vec<MentionExample>,
}

struct Profile {
    title: Vec<String>,
    aliases: [String; 2],
    signature: Vec<String>,
    topic: usize,
}

/// Three syllables per word: 4096 distinct words, none a real filler.
fn word(i: usize) -> String {
    (0..3).map(|k| SYLLABLES[(i >> (4 * k)) & 15]).collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
        .unwrap_or_default()
}

fn context(p: &Profile, topics: &[Vec<String>], rng: &mut ChaCha8Rng) -> String {
    let mut out = Vec::with_capacity(CONTEXT_LEN);
    for _ in 0..CONTEXT_LEN {
        let r: f64 = rng.gen();
        let w = if r < 0.45 {
            p.signature.choose(rng).expect("nonempty").clone()
        } else if r < 0.55 {
            p.aliases.choose(rng).expect("nonempty").clone()
        } else if r < 0.8 {
            topics[p.topic].choose(rng).expect("nonempty").clone()
        } else {
            FILLERS.choose(rng).expect("nonempty").to_string()
        };
        out.push(w);
    }
    out.join(" ")
}

/// Training settings sized for the toy world. The embedding tables start
/// near zero, where the bilinear score has a saddle, so the bi-encoder needs
/// a much larger step than the ranker.
pub fn toy_train_config(rng_seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        dim: 16,
        num_buckets: Buckets::new(4096).expect("valid"),
        cross_alpha: 0.1,
        ..TrainConfig::default()
    };
    c.meta.alpha = 30.0;
    c.meta.steps = 500;
    c.meta.rng_seed = rng_seed;
    c
}

pub fn toy_world(config: &FixtureConfig) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let per_entity = 4 + 2 + SIGNATURE_WORDS;
    let needed = config.num_topics * TOPIC_WORDS + config.num_entities * per_entity;
    assert!(needed <= 4096, "toy vocabulary exhausted");
    let mut pool: Vec<String> = (0..4096).map(word).collect();
    pool.shuffle(&mut rng);
    let mut pool = pool.into_iter();
    let mut take = |n: usize| -> Vec<String> { pool.by_ref().take(n).collect() };

    let topics: Vec<Vec<String>> = (0..config.num_topics).map(|_| take(TOPIC_WORDS)).collect();
    let profiles: Vec<Profile> = (0..config.num_entities)
        .map(|i| {
            let mut title = take(2);
            let extra = take(2);
            if config.disambiguation_every > 0 && i % config.disambiguation_every == 0 {
                title.push(extra[0].clone());
            }
            let aliases = take(2);
            Profile {
                title,
                aliases: [aliases[0].clone(), aliases[1].clone()],
                signature: take(SIGNATURE_WORDS),
                topic: i % config.num_topics,
            }
        })
        .collect();

    let domain = config.domain.to_string();
    let title_text = |p: &Profile| {
        let base = format!("{} {}", capitalize(&p.title[0]), capitalize(&p.title[1]));
        match p.title.get(2) {
            Some(d) => format!("{base} ({d})"),
            None => base,
        }
    };
    let entities: Vec<Entity> = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut words: Vec<String> = p.signature.iter().chain(&p.aliases).cloned().collect();
            words.extend(topics[p.topic].iter().take(4).cloned());
            words.extend(FILLERS.iter().take(3).map(|s| s.to_string()));
            words.shuffle(&mut rng);
            Entity {
                id: format!("E{i:04}"),
                title: title_text(p),
                description: format!("{} is {}.", title_text(p), words.join(" ")),
                domain: domain.clone(),
            }
        })
        .collect();

    let documents: Vec<Document> = (0..config.num_documents)
        .map(|d| {
            let p = &profiles[d % config.num_entities];
            let left = context(p, &topics, &mut rng);
            let right = context(p, &topics, &mut rng);
            Document {
                id: format!("D{d:04}"),
                text: format!("{left} {} {right}", title_text(p)),
                domain: domain.clone(),
            }
        })
        .collect();

    let query = |i: usize, e: usize, mention: String, prov: Provenance, rng: &mut ChaCha8Rng, prefix: &str| {
        let p = &profiles[e];
        MentionExample {
            id: format!("{prefix}{i:04}"),
            context_left: context(p, &topics, rng),
            mention,
            context_right: context(p, &topics, rng),
            entity_id: entities[e].id.clone(),
            domain: domain.clone(),
            provenance: prov,
            overlap_category: None,
        }
    };

    let mut order: Vec<usize> = (0..config.num_entities).collect();
    order.shuffle(&mut rng);
    let seeds: Vec<MentionExample> = order
        .iter()
        .cycle()
        .take(config.num_seeds)
        .enumerate()
        .map(|(i, &e)| {
            let alias = profiles[e].aliases[i % 2].clone();
            query(i, e, alias, Provenance::Seed, &mut rng, "S")
        })
        .collect();

    let test: Vec<MentionExample> = (0..config.num_test)
        .map(|i| {
            let e = rng.gen_range(0..config.num_entities);
            let p = &profiles[e];
            let mention = match i % 4 {
                0 => title_text(p),
                1 if p.title.len() == 3 => format!("{} {}", capitalize(&p.title[0]), capitalize(&p.title[1])),
                1 | 2 => capitalize(&p.title[i % 2]),
                _ => p.aliases[i % 2].clone(),
            };
            let mut q = query(i, e, mention, Provenance::Seed, &mut rng, "T");
            q.overlap_category = categorize_overlap(&q.mention, &entities[e].title).ok();
            q
        })
        .collect();

    let seeds = seeds
        .into_iter()
        .map(|mut s| {
            s.overlap_category = Some(OverlapCategory::LowOverlap);
            s
        })
        .collect();

    Fixture {
        kb: Kb::from_entities(entities).expect("fixture ids are unique"),
        documents,
        seeds,
        test,
    }
}
