//! Subcommands behind the `vq-sign` binary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Preset, RunConfig};
use crate::corpus::{generate_corpus, read_dataset, write_dataset, PhonoFeatureSchema, SignRecord, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::experiment::{comparison_table, prepare_splits, sort_reports};
use crate::model::ModelVariant;
use crate::probe::RankScore;
use crate::train::{train, TrainState};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "VQ_SIGN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "vq-sign", version, about = "VQ autoencoders for sign pose sequences")]
pub struct Cli {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Default set to start from (paper or desk).
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    /// Dotted override such as `train.steps=500`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint: reconstruction, probes, perplexity.
    Eval(EvalArgs),
    /// Run only the ISR and PFR probes on a checkpoint.
    Probe(EvalArgs),
    /// Train and evaluate every variant for every seed.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub signs: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train, validation and test fractions, comma separated.
    #[arg(long)]
    pub splits: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from the checkpoint in the output directory (or `--checkpoint`).
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Expected variant; a checkpoint of another variant is rejected.
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn push(over: &mut Vec<String>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        over.push(format!("{key}={}", v.to_string()));
    }
}

fn quoted(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| format!("{:?}", p.display().to_string()))
}

/// Resolves the effective configuration for a parsed command line.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut over = cli.overrides.clone();
    match &cli.command {
        Cmd::Gen(a) => {
            push(&mut over, "paths.out_dir", quoted(&a.out));
            push(&mut over, "corpus.signs", a.signs);
            push(&mut over, "corpus.instances_per_sign", a.instances);
            push(&mut over, "corpus.seed", a.seed);
            push(&mut over, "corpus.splits", a.splits.as_ref().map(|s| format!("[{s}]")));
        }
        Cmd::Train(a) => {
            push(&mut over, "paths.dataset", quoted(&a.dataset));
            push(&mut over, "paths.out_dir", quoted(&a.out));
            push(&mut over, "paths.checkpoint", quoted(&a.checkpoint));
            push(&mut over, "variant", a.variant.map(|v| format!("{:?}", v.as_str())));
            push(&mut over, "train.seed", a.seed);
            push(&mut over, "train.steps", a.steps);
        }
        Cmd::Eval(a) | Cmd::Probe(a) => {
            push(&mut over, "paths.dataset", quoted(&a.dataset));
            push(&mut over, "paths.checkpoint", quoted(&a.checkpoint));
            push(&mut over, "paths.out_dir", quoted(&a.out));
            push(&mut over, "paths.csv", quoted(&a.csv));
            push(&mut over, "variant", a.variant.map(|v| format!("{:?}", v.as_str())));
        }
        Cmd::Ablation(a) => {
            push(&mut over, "paths.dataset", quoted(&a.dataset));
            push(&mut over, "paths.out_dir", quoted(&a.out));
            push(&mut over, "ablation.seeds", a.seeds.as_ref().map(|s| format!("[{s}]")));
            push(&mut over, "ablation.jobs", a.jobs);
        }
    }
    RunConfig::resolve(cli.preset, cli.config.as_deref(), &over)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    let cfg = effective_config(&cli)?;
    match &cli.command {
        Cmd::Gen(_) => cmd_gen(&cfg).map(|_| ()),
        Cmd::Train(a) => cmd_train(&cfg, a.resume).map(|_| ()),
        Cmd::Eval(_) => cmd_eval(&cfg).map(|_| ()),
        Cmd::Probe(_) => cmd_probe(&cfg).map(|_| ()),
        Cmd::Ablation(_) => cmd_ablation(&cfg).map(|_| ()),
    }
}

/// Creates `dir` and records the effective config and tool version in it.
pub fn prepare_out_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    write_file(&dir.join("version.txt"), format!("vq-sign {VERSION}\n").as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_file(path, format!("{text}\n").as_bytes())
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("{what} path is required")))
}

pub const DATASET_FILE: &str = "corpus.slds";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";

pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf> {
    let schema = PhonoFeatureSchema::default();
    let (records, split) = generate_corpus(&schema, &cfg.corpus)?;
    let dir = &cfg.paths.out_dir;
    prepare_out_dir(dir, cfg)?;
    let path = dir.join(DATASET_FILE);
    write_dataset(&records, &split, &schema, &path)?;
    info!("wrote {} records to {}", records.len(), path.display());
    Ok(path)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Vec<SignRecord>, SplitSpec, PhonoFeatureSchema)> {
    let path = required(&cfg.paths.dataset, "dataset")?;
    read_dataset(path)
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<PathBuf> {
    let (records, split, schema) = load_dataset(cfg)?;
    let dir = &cfg.paths.out_dir;
    let ck_path = cfg.paths.checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    let (mut model, mut state) = if resume {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.variant != cfg.variant {
            return Err(Error::Config(format!("checkpoint holds {}, config asks for {}", ck.variant, cfg.variant)));
        }
        let state = ck
            .train_state
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume".into()))?;
        (ck.restore()?, state)
    } else {
        let model = crate::model::build_model(cfg.variant, &cfg.model, &schema, cfg.train.seed)?;
        let state = TrainState::new(&model, &cfg.train);
        (model, state)
    };
    if model.schema != schema {
        return Err(Error::Config("dataset schema differs from the model's".into()));
    }
    prepare_out_dir(dir, cfg)?;
    let (train_data, _) = prepare_splits(&model, &records, &split)?;
    let log_path = dir.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let remaining = cfg.train.steps.saturating_sub(state.step);
    info!("training {} for {remaining} steps from step {}", cfg.variant, state.step);
    let result = train(&mut model, &train_data, &cfg.train, &mut state, remaining, |e| {
        let line = serde_json::to_string(e).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if e.step % 100 == 0 {
            info!("step {} total {:.5} recon {:.5}", e.step, e.total, e.recon);
        }
        Ok(())
    });
    // Keep progress on disk even when training aborts.
    Checkpoint::capture(&model, Some(&state)).save(&ck_path)?;
    result?;
    Ok(ck_path)
}

fn load_checked(cfg: &RunConfig) -> Result<(Checkpoint, crate::model::Model)> {
    let path = cfg.paths.checkpoint.clone().unwrap_or_else(|| cfg.paths.out_dir.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&path)?;
    if ck.variant != cfg.variant {
        return Err(Error::Config(format!("checkpoint holds {}, config asks for {}", ck.variant, cfg.variant)));
    }
    let model = ck.restore()?;
    Ok((ck, model))
}

fn append_csv(path: &Path, row: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{}", MetricsReport::csv_header()).map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{row}").map_err(|e| Error::io(path, e))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let (records, split, _) = load_dataset(cfg)?;
    let (_, model) = load_checked(cfg)?;
    let (train_data, test_data) = prepare_splits(&model, &records, &split)?;
    let report = evaluate(&model, cfg.train.seed, &train_data, &test_data, &cfg.probe)?;
    prepare_out_dir(&cfg.paths.out_dir, cfg)?;
    write_json(&cfg.paths.out_dir.join("report.json"), &report)?;
    append_csv(&cfg.csv_path(), &report.csv_row())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub variant: String,
    pub seed: u64,
    pub isr_iv: RankScore,
    pub isr_oov: RankScore,
    pub pfr_iv: RankScore,
    pub pfr_oov: RankScore,
    pub checkpoint_sha256: String,
}

pub fn cmd_probe(cfg: &RunConfig) -> Result<ProbeReport> {
    let (records, split, _) = load_dataset(cfg)?;
    let (ck, model) = load_checked(cfg)?;
    let before = Checkpoint::capture(&model, ck.train_state.as_ref()).digest()?;
    let (train_data, test_data) = prepare_splits(&model, &records, &split)?;
    let r = evaluate(&model, cfg.train.seed, &train_data, &test_data, &cfg.probe)?;
    let after = Checkpoint::capture(&model, ck.train_state.as_ref()).digest()?;
    if before != after {
        return Err(Error::InvalidArgument("probing changed the model".into()));
    }
    let report = ProbeReport {
        variant: r.variant,
        seed: r.seed,
        isr_iv: r.isr_iv,
        isr_oov: r.isr_oov,
        pfr_iv: r.pfr_iv,
        pfr_oov: r.pfr_oov,
        checkpoint_sha256: after,
    };
    prepare_out_dir(&cfg.paths.out_dir, cfg)?;
    write_json(&cfg.paths.out_dir.join("probe.json"), &report)?;
    Ok(report)
}

/// Output directory of one ablation member.
pub fn run_dir(root: &Path, variant: ModelVariant, seed: u64) -> PathBuf {
    root.join(format!("{}-seed{seed}", variant.as_str()))
}

/// Worker count after applying the `VQ_SIGN_THREADS` cap.
pub fn worker_count(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    cap.map_or(requested, |c| requested.min(c)).max(1)
}

fn member_config(cfg: &RunConfig, variant: ModelVariant, seed: u64) -> RunConfig {
    let mut m = cfg.clone();
    m.variant = variant;
    m.train.seed = seed;
    m.paths.out_dir = run_dir(&cfg.paths.out_dir, variant, seed);
    m.paths.checkpoint = None;
    m.paths.csv = Some(m.paths.out_dir.join("metrics.csv"));
    m
}

fn run_member(m: &RunConfig) -> Result<MetricsReport> {
    cmd_train(m, false)?;
    cmd_eval(m)
}

fn spawn_member(m: &RunConfig) -> Result<std::process::Child> {
    prepare_out_dir(&m.paths.out_dir, m)?;
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let config = m.paths.out_dir.join("config.toml");
    let script = format!(
        "{exe:?} --config {c:?} train && {exe:?} --config {c:?} eval",
        exe = exe.display().to_string(),
        c = config.display().to_string()
    );
    Command::new("sh")
        .arg("-c")
        .arg(script)
        .env(THREADS_ENV, "1")
        .spawn()
        .map_err(|e| Error::io(&exe, e))
}

pub fn cmd_ablation(cfg: &RunConfig) -> Result<Vec<MetricsReport>> {
    required(&cfg.paths.dataset, "dataset")?;
    let root = &cfg.paths.out_dir;
    prepare_out_dir(root, cfg)?;
    let members: Vec<RunConfig> = cfg
        .ablation
        .seeds
        .iter()
        .flat_map(|&s| cfg.ablation.variants.iter().map(move |&v| (v, s)))
        .map(|(v, s)| member_config(cfg, v, s))
        .collect();
    let jobs = worker_count(cfg.ablation.jobs);
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    if jobs <= 1 {
        for m in &members {
            match run_member(m) {
                Ok(r) => reports.push(r),
                Err(e) => {
                    log::error!("{} seed {}: {e}", m.variant, m.train.seed);
                    failures.push(e);
                }
            }
        }
    } else {
        for chunk in members.chunks(jobs) {
            let children: Vec<_> = chunk.iter().map(spawn_member).collect::<Result<_>>()?;
            for (m, mut child) in chunk.iter().zip(children) {
                let status = child.wait().map_err(|e| Error::io("worker", e))?;
                if !status.success() {
                    failures.push(Error::InvalidArgument(format!(
                        "{} seed {} worker exited with {status}",
                        m.variant, m.train.seed
                    )));
                    continue;
                }
                let text = fs::read_to_string(m.paths.out_dir.join("report.json"))
                    .map_err(|e| Error::io(m.paths.out_dir.join("report.json"), e))?;
                reports.push(serde_json::from_str(&text).map_err(|e| Error::Parse {
                    line: e.line(),
                    message: e.to_string(),
                })?);
            }
        }
    }
    sort_reports(&mut reports);
    let mut csv = MetricsReport::csv_header();
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_file(&root.join("ablation.csv"), csv.as_bytes())?;
    write_file(&root.join("table.txt"), comparison_table(&reports).as_bytes())?;
    match failures.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(reports),
    }
}
