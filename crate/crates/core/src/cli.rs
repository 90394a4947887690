//! The `metalink` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderFlags, LinkingModel};
use crate::error::Error;
use crate::eval::{evaluate, name_matching_baseline, selection_ratio_experiment, EvalReport, WeightRecord};
use crate::io::{read_jsonl, write_atomic, write_jsonl};
use crate::kb::{load_documents, load_entities, load_mentions, Buckets, MentionExample};
use crate::meta::{train_model, MetaConfig, Reweighting, Stage, TrainConfig};
use crate::weaksup::{
    exact_match, filter_seed, generate_bad_pairs, rewrite_mentions, BaselineRewriter, MentionRewriter,
    SubprocessRewriter, SyntheticPair, DEFAULT_PREFIX,
};
use crate::{par, selftest};

pub const THREADS_ENV: &str = "METALINK_THREADS";

/// Every setting a run can take from a config file. Flags override these,
/// and these override the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub eta: f64,
    pub n_syn: usize,
    pub m_seed: usize,
    pub steps: usize,
    pub rng_seed: u64,
    /// Which stage's cumulative weights go to the weights file.
    pub stage: Stage,
    pub cross_alpha: f64,
    pub reweighting: Reweighting,
    pub dim: usize,
    pub num_buckets: u64,
    pub train_candidates: usize,
    pub k: usize,
    pub paper_exact_loss: bool,
    pub normalize_embeddings: bool,
    pub disable_rewrite: bool,
    /// `builtin` or a shell command speaking the JSON-lines protocol.
    pub rewriter: String,
    pub prefix: String,

    pub kb: Option<PathBuf>,
    pub docs: Option<PathBuf>,
    pub syn: Option<PathBuf>,
    pub seed: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub weights_out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub seed_out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let meta = MetaConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            alpha: meta.alpha,
            eta: meta.eta,
            n_syn: meta.n_syn,
            m_seed: meta.m_seed,
            steps: meta.steps,
            rng_seed: meta.rng_seed,
            stage: Stage::Crossranker,
            cross_alpha: train.cross_alpha,
            reweighting: Reweighting::Meta,
            dim: train.dim,
            num_buckets: train.num_buckets.get(),
            train_candidates: train.train_candidates,
            k: crate::eval::DEFAULT_K,
            paper_exact_loss: false,
            normalize_embeddings: false,
            disable_rewrite: false,
            rewriter: "builtin".into(),
            prefix: DEFAULT_PREFIX.into(),
            kb: None,
            docs: None,
            syn: None,
            seed: None,
            dev: None,
            queries: None,
            model: None,
            out: None,
            weights_out: None,
            manifest: None,
            report: None,
            weights: None,
            pairs: None,
            seed_out: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.train_config()?.validate()?;
        if self.m_seed == 0 || self.n_syn == 0 {
            return Err(Error::Config("n_syn and m_seed must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.rewriter.trim().is_empty() {
            return Err(Error::Config("rewriter must be `builtin` or a command".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig, Error> {
        let meta = MetaConfig {
            alpha: self.alpha,
            eta: self.eta,
            n_syn: self.n_syn,
            m_seed: self.m_seed,
            steps: self.steps,
            rng_seed: self.rng_seed,
            stage: Stage::Biencoder,
        };
        if !(meta.alpha > 0.0 && meta.alpha.is_finite() && meta.eta > 0.0 && meta.eta.is_finite()) {
            return Err(Error::Config("alpha and eta must be positive".into()));
        }
        Ok(TrainConfig {
            dim: self.dim,
            num_buckets: Buckets::new(self.num_buckets).map_err(|e| Error::Config(e.to_string()))?,
            flags: EncoderFlags {
                paper_exact_loss: self.paper_exact_loss,
                normalize_embeddings: self.normalize_embeddings,
            },
            meta,
            cross_alpha: self.cross_alpha,
            reweighting: self.reweighting,
            train_candidates: self.train_candidates,
            disable_rewrite: self.disable_rewrite,
            prefix: self.prefix.clone(),
        })
    }

    /// `key=value` lines, paths included when set.
    pub fn render(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = String::new();
        if let toml::Value::Table(t) = value {
            for (k, v) in t {
                let v = match v {
                    toml::Value::String(s) => s,
                    other => other.to_string(),
                };
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }
}

#[derive(Debug, Parser)]
#[command(name = "metalink", version, about = "Weakly-supervised few-shot entity linking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize training pairs from a dictionary and raw documents.
    Generate(GenerateArgs),
    /// Train both stages with seed-guided reweighting.
    Train(TrainArgs),
    /// Two-stage evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Selection ratio of each provenance class from a weights file.
    Analyze(AnalyzeArgs),
    /// Finite-difference and normalization self-checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    docs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `builtin` or a command reading prompts on stdin.
    #[arg(long)]
    rewriter: Option<String>,
    /// Random seed for the bad-pair relinking.
    #[arg(long)]
    seed: Option<u64>,
    /// Keep exact matches as they are.
    #[arg(long)]
    no_rewrite: bool,
    /// Also emit one randomly relinked copy of every pair.
    #[arg(long)]
    bad: bool,
    /// Write heuristically filtered seed pairs here.
    #[arg(long)]
    seed_out: Option<PathBuf>,
    #[arg(long)]
    prefix: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    syn: Option<PathBuf>,
    /// Seed pairs (JSON lines).
    #[arg(long)]
    seed: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Held-out queries scored into the manifest.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    n_syn: Option<usize>,
    #[arg(long)]
    m_seed: Option<usize>,
    #[arg(long)]
    cross_alpha: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    num_buckets: Option<u64>,
    #[arg(long)]
    train_candidates: Option<usize>,
    #[arg(long, value_parser = parse_reweighting)]
    reweighting: Option<Reweighting>,
    #[arg(long, value_parser = parse_stage)]
    stage: Option<Stage>,
    #[arg(long)]
    paper_exact_loss: bool,
    #[arg(long)]
    normalize_embeddings: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Score the title-matching baseline instead of the model.
    #[arg(long)]
    name_matching: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long)]
    rng_seed: Option<u64>,
}

fn parse_reweighting(s: &str) -> Result<Reweighting, String> {
    match s {
        "meta" => Ok(Reweighting::Meta),
        "uniform" => Ok(Reweighting::Uniform),
        _ => Err(format!("expected meta or uniform, got {s:?}")),
    }
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    match s {
        "biencoder" => Ok(Stage::Biencoder),
        "crossranker" => Ok(Stage::Crossranker),
        _ => Err(format!("expected biencoder or crossranker, got {s:?}")),
    }
}

fn base_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn require<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, Error> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("--{} is required", name.replace('_', "-"))))
}

/// Echoes the effective configuration, `rng_seed` included.
fn announce(cfg: &RunConfig) {
    print!("{}", cfg.render());
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(&args.config)?;
    set_path(&mut cfg.kb, args.kb);
    set_path(&mut cfg.docs, args.docs);
    set_path(&mut cfg.out, args.out);
    set_path(&mut cfg.seed_out, args.seed_out);
    set(&mut cfg.rewriter, args.rewriter);
    set(&mut cfg.rng_seed, args.seed);
    set(&mut cfg.prefix, args.prefix);
    cfg.disable_rewrite |= args.no_rewrite;
    cfg.validate()?;
    let (kb_path, docs_path, out_path) = (require(&cfg.kb, "kb")?, require(&cfg.docs, "docs")?, require(&cfg.out, "out")?);
    announce(&cfg);

    let kb = load_entities(kb_path)?;
    let docs = load_documents(docs_path)?;
    let exact = exact_match(&docs, &kb);
    if exact.is_empty() {
        return Err(Error::NoSyntheticPairs.into());
    }
    let mut pairs: Vec<SyntheticPair> = if cfg.disable_rewrite {
        exact.clone()
    } else {
        let mut rewriter: Box<dyn MentionRewriter + '_> = if cfg.rewriter == "builtin" {
            Box::new(BaselineRewriter::new(&kb, &docs, &cfg.prefix))
        } else {
            Box::new(SubprocessRewriter::new(cfg.rewriter.clone()))
        };
        rewrite_mentions(&exact, rewriter.as_mut(), &kb, &cfg.prefix)?
    };
    if let Some(seed_out) = &cfg.seed_out {
        let seeds = filter_seed(&pairs, &kb, &docs);
        write_jsonl(seed_out, &seeds)?;
        println!("seed_pairs={}", seeds.len());
    }
    if args.bad {
        let bad = generate_bad_pairs(&pairs, &kb, cfg.rng_seed)?;
        pairs.extend(bad);
    }
    write_jsonl(out_path, &pairs)?;
    println!("exact_pairs={}", exact.len());
    println!("written_pairs={}", pairs.len());
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(&args.config)?;
    set_path(&mut cfg.syn, args.syn);
    set_path(&mut cfg.seed, args.seed);
    set_path(&mut cfg.kb, args.kb);
    set_path(&mut cfg.out, args.out);
    set_path(&mut cfg.weights_out, args.weights_out);
    set_path(&mut cfg.manifest, args.manifest);
    set_path(&mut cfg.dev, args.dev);
    set(&mut cfg.rng_seed, args.rng_seed);
    set(&mut cfg.steps, args.steps);
    set(&mut cfg.alpha, args.alpha);
    set(&mut cfg.eta, args.eta);
    set(&mut cfg.n_syn, args.n_syn);
    set(&mut cfg.m_seed, args.m_seed);
    set(&mut cfg.cross_alpha, args.cross_alpha);
    set(&mut cfg.dim, args.dim);
    set(&mut cfg.num_buckets, args.num_buckets);
    set(&mut cfg.train_candidates, args.train_candidates);
    set(&mut cfg.reweighting, args.reweighting);
    set(&mut cfg.stage, args.stage);
    cfg.paper_exact_loss |= args.paper_exact_loss;
    cfg.normalize_embeddings |= args.normalize_embeddings;
    cfg.validate()?;
    let kb_path = require(&cfg.kb, "kb")?;
    let syn_path = require(&cfg.syn, "syn")?;
    let seed_path = require(&cfg.seed, "seed")?;
    let out_path = require(&cfg.out, "out")?;
    announce(&cfg);

    let kb = load_entities(kb_path)?;
    let syn = load_mentions(syn_path, &kb)?;
    let seeds = load_mentions(seed_path, &kb)?;
    let out = train_model(&syn, &seeds, &kb, &cfg.train_config()?)?;
    let mut manifest = out.manifest.clone();
    if let Some(dev) = &cfg.dev {
        let dev = load_mentions(dev, &kb)?;
        let report = evaluate(&out.model, &dev, &kb, cfg.k)?;
        manifest.push("dev.recall_at_k", report.recall_at_k);
        manifest.push("dev.n_acc", report.n_acc);
        manifest.push("dev.u_acc", report.u_acc);
    }
    out.model.save(out_path)?;
    if let Some(w) = &cfg.weights_out {
        let records = match cfg.stage {
            Stage::Biencoder => &out.biencoder_weights,
            Stage::Crossranker => &out.weights,
        };
        write_jsonl(w, records)?;
    }
    if let Some(m) = &cfg.manifest {
        write_atomic(m, manifest.render().as_bytes())?;
    }
    print!("{}", manifest.render());
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(&args.config)?;
    set_path(&mut cfg.model, args.model);
    set_path(&mut cfg.queries, args.queries);
    set_path(&mut cfg.kb, args.kb);
    set_path(&mut cfg.report, args.report);
    set(&mut cfg.k, args.k);
    cfg.validate()?;
    let kb_path = require(&cfg.kb, "kb")?;
    let queries_path = require(&cfg.queries, "queries")?;
    if !args.name_matching {
        require(&cfg.model, "model")?;
    }
    announce(&cfg);

    let kb = load_entities(kb_path)?;
    let queries = load_mentions(queries_path, &kb)?;
    let report: EvalReport = if args.name_matching {
        name_matching_baseline(&queries, &kb)?
    } else {
        let model_path = require(&cfg.model, "model")?;
        let model = LinkingModel::load(model_path)?;
        evaluate(&model, &queries, &kb, cfg.k)?
    };
    let text = report.render();
    if let Some(r) = &cfg.report {
        write_atomic(r, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(&args.config)?;
    set_path(&mut cfg.weights, args.weights);
    set_path(&mut cfg.pairs, args.pairs);
    set_path(&mut cfg.report, args.report);
    cfg.validate()?;
    let weights_path = require(&cfg.weights, "weights")?;
    let pairs_path = require(&cfg.pairs, "pairs")?;
    announce(&cfg);

    let weights: Vec<WeightRecord> = read_jsonl(weights_path)?.into_iter().map(|(_, w)| w).collect();
    let pairs: Vec<MentionExample> = read_jsonl(pairs_path)?.into_iter().map(|(_, p)| p).collect();
    let report = selection_ratio_experiment(&weights, &pairs)?;
    let text = report.render();
    if let Some(r) = &cfg.report {
        write_atomic(r, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn run_selftest(args: SelftestArgs) -> anyhow::Result<()> {
    let seed = args.rng_seed.unwrap_or(0);
    println!("rng_seed={seed}");
    let checks = selftest::run(seed);
    let mut failed = 0;
    for c in &checks {
        println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} self-check(s) failed");
    }
    Ok(())
}

fn threads_from_env() -> Result<usize, Error> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a nonnegative integer, got {v:?}"))),
        _ => Ok(0),
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first) and runs; returns the exit status.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = threads_from_env()
        .map(par::init_threads)
        .map_err(anyhow::Error::from)
        .and_then(|()| match cli.command {
            Command::Generate(a) => generate(a).context("generate failed"),
            Command::Train(a) => train(a).context("train failed"),
            Command::Eval(a) => eval(a).context("eval failed"),
            Command::Analyze(a) => analyze(a).context("analyze failed"),
            Command::Selftest(a) => run_selftest(a),
        });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c = RunConfig::from_toml("steps = 5\nrng_seed = 9\nreweighting = \"uniform\"\n").unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.rng_seed, 9);
        assert_eq!(c.reweighting, Reweighting::Uniform);
        assert_eq!(c.alpha, 0.1);
        assert!(matches!(RunConfig::from_toml("stepz = 5"), Err(Error::Config(_))));
    }

    #[test]
    fn render_lists_every_scalar() {
        let text = RunConfig::default().render();
        assert!(text.contains("alpha=0.1\n"));
        assert!(text.contains("rewriter=builtin\n"));
        assert!(text.contains("stage=crossranker\n"));
        assert!(!text.contains("kb="));
    }

    #[test]
    fn validation_rejects_bad_values() {
        for c in [
            RunConfig {
                num_buckets: 1,
                ..RunConfig::default()
            },
            RunConfig {
                alpha: -1.0,
                ..RunConfig::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
