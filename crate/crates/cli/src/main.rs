use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ecamp_core::corpus::{
    annotate, compute_stats, match_entities, read_corpus, tokenize, write_stats_json, EntityLexicon, Vocab,
    DEFAULT_BETA,
};
use ecamp_core::distill::{
    build_prompt, distill_batch, distill_rule_based, DistillCache, DistillTemplate, EndpointConfig, HttpChatClient,
    Provenance, DEFAULT_API_KEY_ENV,
};
use ecamp_core::model::Model;
use ecamp_core::synthgen::{gen_corpus, read_synth_dir, write_synth_dir, GroundTruthAttention, SynthSpec};
use ecamp_core::train::{
    build_dataset, composite_gradcheck, linear_probe, load_checkpoint, ProbeOptions, TrainConfig, Trainer,
};

const ENV_HELP: &str = "\
Environment:
  ECAMP_API_KEY  credential for the remote distillation endpoint (`distill --remote`).
                 It is only ever read from the environment; config files cannot set it.
  RUST_LOG       log filter, e.g. `info` or `ecamp_core=debug` (default: warn)";

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "ecamp", version, about = "Entity-centred masked vision-language pre-training on synthetic data")]
#[command(after_help = ENV_HELP)]
struct Cli {
    /// Flat `key = value` file overriding training defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired synthetic image/report dataset.
    Synth(SynthArgs),
    /// Entity and descriptor statistics of a report corpus.
    Stats(StatsArgs),
    /// Rewrite reports into templated descriptor sentences.
    #[command(after_help = ENV_HELP)]
    Distill(DistillArgs),
    /// Pre-train on a synthetic dataset.
    Pretrain(PretrainArgs),
    /// Linear-probe a checkpoint's frozen image encoder.
    Probe(ProbeArgs),
    /// Finite-difference check of every autodiff op and of the full loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// High-resolution side length.
    #[arg(long, default_value_t = 64)]
    canvas: usize,
    /// Probability that an entity is present in a sample.
    #[arg(long, default_value_t = 1.0 / 21.0)]
    p_positive: f64,
}

#[derive(Args)]
struct LexiconArgs {
    /// One entity per line (default: the built-in 44-entity list).
    #[arg(long, value_name = "FILE")]
    lexicon: Option<PathBuf>,
    /// One negation term per line (default: the built-in list).
    #[arg(long, value_name = "FILE")]
    negation: Option<PathBuf>,
}

impl LexiconArgs {
    fn load(&self) -> Result<EntityLexicon> {
        match &self.lexicon {
            Some(p) => Ok(EntityLexicon::from_files(p, self.negation.as_deref())?),
            None if self.negation.is_some() => bail!("--negation requires --lexicon"),
            None => Ok(EntityLexicon::default()),
        }
    }
}

#[derive(Args)]
struct StatsArgs {
    /// Line-delimited `{id, text, image_ref}` records.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    #[command(flatten)]
    lexicon: LexiconArgs,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: usize,
    /// Also write the statistics as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    #[command(flatten)]
    lexicon: LexiconArgs,
    /// Query a chat-completion endpoint.
    #[arg(long, conflicts_with = "rule_based")]
    remote: bool,
    /// Offline rule-based distiller (the default).
    #[arg(long)]
    rule_based: bool,
    /// Line-delimited `{id, distilled_text, provenance}` records.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Endpoint base; requests go to `{base_url}/chat/completions`.
    #[arg(long, default_value = "http://localhost:8000/v1")]
    base_url: String,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    model: String,
    /// Header that carries `Bearer <credential>`.
    #[arg(long, default_value = "Authorization")]
    auth_header: String,
    /// Environment variable holding the credential.
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    /// TOML file with `system`, `instruction`, `example`, `query` keys.
    #[arg(long, value_name = "FILE")]
    template: Option<PathBuf>,
    /// Response cache directory.
    #[arg(long, value_name = "DIR")]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value_t = 3)]
    max_attempts: usize,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

#[derive(Args)]
struct AblationArgs {
    /// Drop the super-resolution loss.
    #[arg(long)]
    no_sr: bool,
    /// Unit weights for negative and other descriptor tokens.
    #[arg(long)]
    no_rebalance: bool,
    /// Mask descriptors like any other token.
    #[arg(long)]
    no_descriptor_mask: bool,
    /// Train on the original reports only.
    #[arg(long)]
    no_distill: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// Directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output of `distill`; reports it does not cover use the rule-based distiller.
    #[arg(long, value_name = "FILE")]
    distilled: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Metrics file (default: `<out>.metrics.jsonl`).
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
    /// Total optimizer steps (overrides `steps` and `epochs`).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, default_value_t = 64)]
    max_text_len: usize,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Directory written by `synth`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Seeds the split, the shuffle control and the baseline encoder.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    #[arg(long, default_value_t = 1e-2)]
    l2: f64,
    /// Permute training labels (control run).
    #[arg(long)]
    shuffle_labels: bool,
    /// Write the full result as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random cases per op.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Random samples for the full-loss check.
    #[arg(long, default_value_t = 20)]
    composite_trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Stats(a) => stats(a),
        Command::Distill(a) => distill(a),
        Command::Pretrain(a) => pretrain(a, config),
        Command::Probe(a) => probe(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
        config.apply_kv_text(&text).with_context(|| format!("{}", p.display()))?;
    }
    Ok(config)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        canvas: a.canvas,
        p_positive: a.p_positive,
        seed: a.seed,
        ..Default::default()
    };
    let samples = gen_corpus(&spec, a.n)?;
    write_synth_dir(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn stats(a: StatsArgs) -> Result<ExitCode> {
    if a.beta == 0 {
        bail!("--beta must be at least 1");
    }
    let lex = a.lexicon.load()?;
    let reports = read_corpus(&a.corpus)?;
    let vocab = Vocab::build(reports.iter().map(|r| r.text.as_str()), []);
    let mut docs = Vec::with_capacity(reports.len());
    for r in &reports {
        let seq = tokenize(&r.text, &vocab, usize::MAX)?;
        docs.push(annotate(&r.id, seq, &lex, a.beta));
    }
    let s = compute_stats(&docs).with_context(|| format!("{}", a.corpus.display()))?;
    print!("{}", s.to_table());
    if let Some(p) = &a.json {
        write_stats_json(p, &s)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn distill(a: DistillArgs) -> Result<ExitCode> {
    let lex = a.lexicon.load()?;
    let reports = read_corpus(&a.corpus)?;
    let vocab = Vocab::build(reports.iter().map(|r| r.text.as_str()), []);
    let annotated = reports
        .iter()
        .map(|r| Ok(annotate(&r.id, tokenize(&r.text, &vocab, usize::MAX)?, &lex, DEFAULT_BETA)))
        .collect::<Result<Vec<_>>>()?;
    let mut records: Vec<(String, String, Provenance)> = annotated
        .iter()
        .map(|ann| {
            let d = distill_rule_based(ann);
            (ann.id.clone(), d.text(), d.provenance)
        })
        .collect();

    if a.remote {
        let template = match &a.template {
            Some(p) => DistillTemplate::from_file(p)?,
            None => DistillTemplate::default(),
        };
        let config = EndpointConfig {
            base_url: a.base_url,
            model: a.model,
            api_key_env: a.api_key_env,
            auth_header: a.auth_header,
            max_attempts: a.max_attempts,
            timeout: Duration::from_secs(a.timeout_secs),
            ..Default::default()
        };
        let backoff = config.initial_backoff;
        let client = HttpChatClient::from_env(config)?;
        let cache = a.cache.as_deref().map(DistillCache::open).transpose()?;
        // Reports without mentions keep the (empty) rule-based output.
        let wanted: Vec<usize> = (0..reports.len()).filter(|&i| !annotated[i].mentions.is_empty()).collect();
        let prompts: Vec<_> = wanted
            .iter()
            .map(|&i| {
                let seq = &annotated[i].seq;
                build_prompt(&reports[i], &match_entities(seq, &lex), &template)
            })
            .collect();
        let results = distill_batch(&prompts, &client, cache.as_ref(), &lex, a.parallelism, a.max_attempts, backoff);
        for (&i, r) in wanted.iter().zip(results) {
            let d = r.with_context(|| format!("report `{}`", reports[i].id))?;
            records[i] = (reports[i].id.clone(), d.text(), d.provenance);
        }
    }

    let mut out = String::new();
    for (id, text, provenance) in &records {
        let line = serde_json::json!({"id": id, "distilled_text": text, "provenance": provenance});
        out.push_str(&line.to_string());
        out.push('\n');
    }
    fs::write(&a.out, out).with_context(|| format!("{}", a.out.display()))?;
    println!("distilled {} reports into {}", records.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn read_distilled(path: &Path) -> Result<HashMap<String, String>> {
    let file = fs::File::open(path).with_context(|| format!("{}", path.display()))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("{}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        match (v["id"].as_str(), v["distilled_text"].as_str()) {
            (Some(id), Some(text)) => out.insert(id.to_string(), text.to_string()),
            _ => bail!("{}:{}: expected `id` and `distilled_text` strings", path.display(), i + 1),
        };
    }
    Ok(out)
}

fn pretrain(a: PretrainArgs, mut config: TrainConfig) -> Result<ExitCode> {
    if let Some(s) = a.steps {
        config.steps = s;
    }
    if let Some(s) = a.seed {
        config.optim.seed = s;
    }
    if let Some(n) = a.checkpoint_every {
        config.checkpoint_every = n;
    }
    let ab = &mut config.ablation;
    ab.no_sr |= a.ablation.no_sr;
    ab.no_rebalance |= a.ablation.no_rebalance;
    ab.no_descriptor_mask |= a.ablation.no_descriptor_mask;
    ab.no_distill |= a.ablation.no_distill;

    let samples = read_synth_dir(&a.data)?;
    let canvas = samples.first().map(|s| s.canvas).context("dataset is empty")?;
    if samples.iter().any(|s| s.canvas != canvas) {
        bail!("{}: samples have different canvas sizes", a.data.display());
    }
    config.model.image_size_high = canvas;
    config.model.image_size_low = canvas / 2;
    config.model.max_text_len = a.max_text_len;
    let distilled = a.distilled.as_deref().map(read_distilled).transpose()?;
    let data = build_dataset(
        &samples,
        distilled.as_ref(),
        &EntityLexicon::default(),
        &GroundTruthAttention,
        config.model.patch_size,
        a.max_text_len,
        None,
    )?;
    let total = config.total_steps(data.len());
    let mut trainer = if a.resume {
        Trainer::from_checkpoint(config, data, &a.out).with_context(|| format!("resuming from {}", a.out.display()))?
    } else {
        Trainer::new(config, data)?
    };
    let done = trainer.step as usize;
    if done > total {
        bail!("checkpoint is at step {done}, beyond the {total}-step budget");
    }

    let metrics_path = a.metrics.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume)
        .truncate(!a.resume)
        .open(&metrics_path)
        .with_context(|| format!("{}", metrics_path.display()))?;
    log::info!(
        "training steps {done}..{total}, {} parameters, factors {:?}",
        trainer.params.numel(),
        trainer.factors
    );
    let run = trainer.run(total - done, Some(&mut metrics as &mut dyn Write), Some(&a.out))?;
    trainer.save(&a.out)?;
    match run.last() {
        Some(m) => println!(
            "step {} total {:.5} (mim {:.5} mlm {:.5} sr {:.5}); checkpoint {}",
            m.step,
            m.total,
            m.l_mim,
            m.l_mlm,
            m.l_sr,
            a.out.display()
        ),
        None => println!("nothing to do at step {done}; checkpoint {}", a.out.display()),
    }
    Ok(ExitCode::SUCCESS)
}

fn probe(a: ProbeArgs) -> Result<ExitCode> {
    let ck = load_checkpoint(&a.checkpoint, None)?;
    let (model, _) = Model::new(&ck.model, 0)?;
    let samples = read_synth_dir(&a.data)?;
    if let Some(s) = samples.iter().find(|s| s.image_low.len() != ck.model.image_size_low.pow(2)) {
        bail!(
            "sample `{}` has a {}-pixel image, the checkpoint expects {}x{}",
            s.id,
            s.image_low.len(),
            ck.model.image_size_low,
            ck.model.image_size_low
        );
    }
    let mut entities: Vec<String> = samples.iter().flat_map(|s| s.labels.keys().cloned()).collect();
    entities.sort();
    entities.dedup();
    let opts = ProbeOptions {
        train_fraction: a.train_fraction,
        l2: a.l2,
        seed: a.seed,
        shuffle_labels: a.shuffle_labels,
        ..Default::default()
    };
    let r = linear_probe(&model, &ck.params, &samples, &entities, &opts)?;
    println!("{:<16} {:>9} {:>9}", "entity", "accuracy", "baseline");
    for (e, acc) in &r.per_class {
        let base = r.baseline_per_class.get(e).copied().unwrap_or(f64::NAN);
        println!("{e:<16} {acc:>9.4} {base:>9.4}");
    }
    println!(
        "macro {:.4}  baseline {:.4}  chance {:.4}",
        r.macro_accuracy, r.baseline_macro, r.chance_macro
    );
    if !r.skipped.is_empty() {
        println!("skipped (single class): {}", r.skipped.join(", "));
    }
    if let Some(p) = &a.out {
        let body = serde_json::to_string_pretty(&r).context("serializing probe result")?;
        fs::write(p, body).with_context(|| format!("{}", p.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let ops = ecamp_autodiff::op_suite(a.trials, a.seed)?;
    let mut ok = true;
    for o in &ops {
        let pass = o.max_rel_error < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{:<28} {:.3e} {}", o.op, o.max_rel_error, if pass { "ok" } else { "FAIL" });
    }
    if a.composite_trials > 0 {
        let c = composite_gradcheck(a.composite_trials, a.seed, 2)?;
        let pass = c.max_rel_error < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{:<28} {:.3e} {}", "pretrain_loss", c.max_rel_error, if pass { "ok" } else { "FAIL" });
    }
    if ok {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: relative gradient error at or above {GRADCHECK_TOLERANCE:e}");
        Ok(ExitCode::FAILURE)
    }
}
