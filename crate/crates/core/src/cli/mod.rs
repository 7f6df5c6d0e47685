//! The `treg` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. The only environment variable read is `TREG_CACHE_DIR`.

pub mod config;
mod manifest;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::{load_records, make_synthetic_planted_task, planted_sft_corpus, write_records, PreferencePair, Tokenizer};
use crate::diagnostics::{export_heatmap, heatmap_record, HeatmapSide};
use crate::gradcheck_suite::{run_gradcheck_suite, GradcheckConfig, GRADCHECK_TOLERANCE};
use crate::losses::LossConfig;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, PolicyState, Role};
use crate::numerics::{inject_backward_fault, OpKind};
use crate::rewards::{annotate, default_cache_dir, RewardCache, RewardError};
use crate::trainer::{evaluate, train_sft, SftConfig, Trainer};

pub use config::{load_run_config, parse_overrides, RunConfig, ALPHA_GRID};
pub use manifest::{file_sha256, RunManifest};

/// Name of the reward cache file inside the cache directory.
pub const CACHE_FILE: &str = "rewards.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "treg", version, about = "DPO/SimPO training with self-scored per-token rewards")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a policy from a TOML config plus `--section.key value` overrides.
    Train(TrainArgs),
    /// Compute and cache contrastive token rewards for a dataset.
    Annotate(AnnotateArgs),
    /// Finite-difference gradient checks of every loss variant.
    Gradcheck(GradcheckArgs),
    /// Held-out loss, preference accuracy, margin and credit metrics.
    Eval(EvalArgs),
    /// Export per-token log-ratio heatmaps.
    Heatmap(HeatmapArgs),
    /// Generate a planted-error preference dataset.
    Synth(SynthArgs),
    /// Supervised warm-up of a starting checkpoint on a planted dataset.
    Sft(SftArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted overrides such as `--loss.alpha 0`; `--grid.alpha` runs α ∈ {0.1, 0.25, 0.5}.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    /// Line-delimited preference records.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluator checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cache directory [default: $TREG_CACHE_DIR or .treg-cache].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Corrupt the backward rule of one op kind (test fixture).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a static HTML rendering next to the JSON file.
    #[arg(long)]
    pub html: bool,
    /// Only these record ids (repeatable); default: all.
    #[arg(long = "id")]
    pub ids: Vec<String>,
    /// Which response to show: chosen or rejected.
    #[arg(long, default_value = "rejected", value_parser = parse_side)]
    pub side: HeatmapSide,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
}

fn parse_side(s: &str) -> Result<HeatmapSide, String> {
    match s {
        "chosen" => Ok(HeatmapSide::Chosen),
        "rejected" => Ok(HeatmapSide::Rejected),
        _ => Err(format!("expected `chosen` or `rejected`, got `{s}`")),
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SftArgs {
    /// Planted-task records to build the warm-up corpus from.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with optional `[model]` and `[sft]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(serde::Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SftFile {
    model: ModelConfig,
    sft: SftConfig,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
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
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Annotate(a) => cmd_annotate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Sft(a) => cmd_sft(a),
    }
}

fn read_records(path: &Path) -> Result<Vec<crate::data::PreferenceRecord>, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("dataset {} does not exist", path.display())));
    }
    load_records(path).map_err(runtime)
}

fn read_model(path: &Path) -> Result<PolicyState, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(path).map_err(runtime)?.model)
}

fn tokenize(
    records: &[crate::data::PreferenceRecord],
    context_len: usize,
) -> Result<(Vec<PreferencePair>, Vec<String>), CliError> {
    let tok = Tokenizer::new();
    let mut pairs = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    for r in records {
        match PreferencePair::from_record(r, &tok, context_len) {
            Ok(p) => pairs.push(p),
            Err(crate::data::DataError::TooLong { id, .. }) => skipped.push(id),
            Err(e) => return Err(runtime(e)),
        }
    }
    Ok((pairs, skipped))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let ov = parse_overrides(&a.overrides)?;
    let base = load_run_config(a.config.as_deref(), &ov.pairs)?;
    base.validate()?;
    if !ov.grid_alpha {
        return train_one(base);
    }
    for alpha in ALPHA_GRID {
        let mut cfg = base.clone();
        cfg.loss.alpha = alpha;
        cfg.out_dir = base.out_dir.join(format!("alpha-{alpha}"));
        println!("grid: alpha = {alpha}");
        train_one(cfg)?;
    }
    Ok(())
}

fn train_one(mut cfg: RunConfig) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("train", serde_json::to_value(&cfg).expect("config serialises"));
    let train_path = cfg.data.train.clone().expect("validated");
    let train_records = read_records(&train_path)?;
    manifest.add_input(&train_path).map_err(runtime)?;
    let eval_records = match &cfg.data.eval {
        Some(p) => {
            manifest.add_input(p).map_err(runtime)?;
            Some(read_records(p)?)
        }
        None => None,
    };
    let init = match &cfg.init {
        Some(p) => {
            manifest.add_input(p).map_err(runtime)?;
            read_model(p)?.to_policy()
        }
        None => PolicyState::init(cfg.model.clone()).map_err(runtime)?,
    };
    let reference = init.freeze_copy(Role::Reference);
    let evaluator = init.freeze_copy(Role::Evaluator);
    let ctx = init.config().context_len;
    let (mut train, skipped) = tokenize(&train_records, ctx)?;
    if !skipped.is_empty() {
        eprintln!("skipped {} training records longer than the context", skipped.len());
    }

    if cfg.loss.needs_cached_rewards() && !cfg.train.strict_rewards {
        let dir = cfg.cache_dir.clone().unwrap_or_else(default_cache_dir);
        let mut cache = RewardCache::open(dir.join(CACHE_FILE)).map_err(runtime)?;
        let summary = annotate(&evaluator, &Tokenizer::new(), &train_records, &mut cache).map_err(runtime)?;
        println!(
            "rewards: {} cached, {} computed, {} skipped",
            summary.reused,
            summary.written,
            summary.skipped.len()
        );
        let hash = evaluator.fingerprint();
        let before = train.len();
        train.retain(|p| cache.pair(&hash, &p.id).is_some());
        for p in &mut train {
            let (c, j) = cache.pair(&hash, &p.id).expect("retained");
            p.attach_rewards(c, j).map_err(runtime)?;
        }
        if train.len() < before {
            eprintln!("dropped {} pairs without cached rewards", before - train.len());
        }
    }
    let eval = match &eval_records {
        Some(r) => Some(tokenize(r, ctx)?.0),
        None => None,
    };

    fs::create_dir_all(&cfg.out_dir).map_err(|e| runtime(format!("{}: {e}", cfg.out_dir.display())))?;
    let _ = fs::remove_file(cfg.out_dir.join("metrics.jsonl"));
    cfg.train.checkpoint_dir = Some(cfg.out_dir.clone());
    let mut t = Trainer::new(cfg.train.clone(), cfg.loss.clone(), init, reference, &train).map_err(|e| match e {
        crate::trainer::TrainError::Config(m) => CliError::Usage(m),
        other => runtime(other),
    })?;
    if cfg.train.strict_rewards && cfg.loss.needs_cached_rewards() {
        t = t.with_evaluator(evaluator).map_err(runtime)?;
    }
    if let Some(e) = &eval {
        t = t.with_eval_set(e).map_err(runtime)?;
    }
    let total = t.state().total_steps;
    t.run().map_err(runtime)?;
    let state = t.state();
    let mut outputs = vec![cfg.out_dir.join("metrics.jsonl")];
    if let Some(p) = &state.last_checkpoint {
        outputs.push(p.clone());
    } else {
        // Zero-step runs still leave a final checkpoint.
        let p = cfg.out_dir.join("final.ckpt");
        save_checkpoint(&p, &t.checkpoint()).map_err(runtime)?;
        outputs.push(p);
    }
    if let Some(last) = state.history.last() {
        println!(
            "step {}/{total}: loss {:.5} margin {:.5} accuracy {:.3}",
            last.step + 1,
            last.loss,
            last.reward_margin,
            last.accuracy
        );
    }
    if let Some((step, m)) = state.eval_history.last() {
        println!("eval at step {step}: accuracy {:.4} margin {:.5} loss {:.5}", m.accuracy, m.mean_margin, m.loss);
    }
    manifest.outputs = outputs;
    manifest.finish(&cfg.out_dir).map_err(runtime)?;
    Ok(())
}

fn cmd_annotate(a: AnnotateArgs) -> Result<(), CliError> {
    let records = read_records(&a.data)?;
    let evaluator = read_model(&a.checkpoint)?.freeze_copy(Role::Evaluator);
    let dir = a.out.clone().unwrap_or_else(default_cache_dir);
    let mut manifest = RunManifest::start(
        "annotate",
        serde_json::json!({
            "data": a.data,
            "checkpoint": a.checkpoint,
            "out": dir,
        }),
    );
    manifest.add_input(&a.data).map_err(runtime)?;
    manifest.add_input(&a.checkpoint).map_err(runtime)?;
    let mut cache = RewardCache::open(dir.join(CACHE_FILE)).map_err(runtime)?;
    let summary = match annotate(&evaluator, &Tokenizer::new(), &records, &mut cache) {
        Ok(s) => s,
        Err(RewardError::Mismatch(m)) => return Err(CliError::Usage(m)),
        Err(e) => return Err(runtime(e)),
    };
    println!(
        "annotated {} records: {} reward vectors written, {} reused, {} records skipped",
        records.len(),
        summary.written,
        summary.reused,
        summary.skipped.len()
    );
    for (id, why) in &summary.skipped {
        println!("  skipped {id}: {why}");
    }
    manifest.outputs = vec![cache.path().to_path_buf()];
    manifest.finish(&dir).map_err(runtime)?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let fault = match &a.fault {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| CliError::Usage(format!("unknown op kind `{name}`")))?),
        None => None,
    };
    inject_backward_fault(fault);
    let rows = run_gradcheck_suite(&GradcheckConfig {
        seed: a.seed,
        eps: a.eps,
        ..GradcheckConfig::default()
    });
    inject_backward_fault(None);
    let rows = rows.map_err(runtime)?;
    println!("{:<20} {:>14} {:>8} {:>9}", "loss", "max rel err", "coords", "seconds");
    for r in &rows {
        println!(
            "{:<20} {:>14.3e} {:>8} {:>9.2}  {}",
            r.loss,
            r.max_rel_error,
            r.coords,
            r.seconds,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.loss.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check above {GRADCHECK_TOLERANCE:e} for: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let policy = read_model(&a.checkpoint)?;
    let reference = read_model(&a.reference)?.freeze_copy(Role::Reference);
    let records = read_records(&a.data)?;
    let (pairs, _) = tokenize(&records, policy.config().context_len)?;
    let cfg = LossConfig {
        beta: a.beta,
        ..LossConfig::dpo(a.beta)
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let m = evaluate(&policy, &reference, &pairs, &cfg, a.batch_size).map_err(runtime)?;
    println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialise"));
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs) -> Result<(), CliError> {
    let policy = read_model(&a.checkpoint)?;
    let reference = read_model(&a.reference)?;
    let records = read_records(&a.data)?;
    let (pairs, _) = tokenize(&records, policy.config().context_len)?;
    let tok = Tokenizer::new();
    let selected: Vec<&PreferencePair> = if a.ids.is_empty() {
        pairs.iter().collect()
    } else {
        let mut v = Vec::new();
        for id in &a.ids {
            v.push(
                pairs
                    .iter()
                    .find(|p| &p.id == id)
                    .ok_or_else(|| CliError::Usage(format!("no record with id `{id}`")))?,
            );
        }
        v
    };
    let records = selected
        .into_iter()
        .map(|p| heatmap_record(&policy, &reference, &tok, p, a.side, a.beta))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    for f in export_heatmap(&records, &a.out, a.html).map_err(runtime)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let records = make_synthetic_planted_task(a.n, a.seed);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    write_records(&a.out, &records).map_err(runtime)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_sft(a: SftArgs) -> Result<(), CliError> {
    let file: SftFile = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {}", p.display(), e.message().trim())))?
        }
        None => SftFile::default(),
    };
    let records = read_records(&a.data)?;
    let corpus = planted_sft_corpus(&records, &Tokenizer::new(), file.sft.seed);
    let mut model = PolicyState::init(file.model.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let losses = train_sft(&mut model, &corpus, &file.sft).map_err(runtime)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("sft: {} steps, loss {first:.4} -> {last:.4}", losses.len());
    }
    save_checkpoint(&a.out, &Checkpoint::new(model)).map_err(runtime)?;
    let mut out = std::io::stdout();
    let _ = writeln!(out, "wrote {}", a.out.display());
    Ok(())
}
