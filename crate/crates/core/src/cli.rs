//! Command-line interface.
//!
//! Every command writes machine-readable JSON either to stdout or to files
//! under `--out`; progress notes go to stderr.

use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::audit::audit;
use crate::bench::diagnostics::{low_rank_share, mean_selected_rank, spearman};
use crate::bench::export::{export_embeddings, write_allocation, AllocationReport};
use crate::bench::fewshot::{few_shot_sweep, FewShotOptions, InitPolicy};
use crate::bench::{self, train_options, RunMetrics};
use crate::checkpoint;
use crate::config::{RunConfig, TaskSpec};
use crate::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "more-kit", version, about = "Train and inspect rank-prefix LoRA expert models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train one seed (with --seed) or every configured seed as subprocesses.
    Train(TrainArgs),
    /// Print held-out accuracy per task for a checkpoint.
    Eval(CheckpointArgs),
    /// Print the parameter-budget audit for a config or checkpoint.
    Audit(AuditArgs),
    /// Rewrite a checkpoint with its task→rank mapping frozen.
    Freeze(FreezeArgs),
    /// Write task embeddings as CSV.
    ExportEmbeddings(ExportArgs),
    /// Few-shot transfer of a checkpoint to a new task.
    Fewshot(FewshotArgs),
    /// Aggregate per-seed runs under a directory.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Enable an ablation; repeatable.
    #[arg(long = "ablation", value_name = "NAME")]
    pub ablations: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        for name in &self.ablations {
            cfg.ablations.enable(name)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: the config's `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub config: Option<PathBuf>,
    #[arg(long = "ablation", value_name = "NAME")]
    pub ablations: Vec<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct FreezeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write the frozen checkpoint here instead of in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FewshotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON file with the new task's spec.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [4, 16, 32])]
    pub shots: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value = "kaiming", value_parser = ["kaiming", "copy_nearest"])]
    pub policy: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding `seed-*` run directories.
    #[arg(long)]
    pub runs: PathBuf,
}

/// Files a single-seed training run leaves behind.
pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(&args.checkpoint),
        Cmd::Audit(args) => cmd_audit(args),
        Cmd::Freeze(args) => cmd_freeze(args),
        Cmd::ExportEmbeddings(args) => cmd_export(args),
        Cmd::Fewshot(args) => cmd_fewshot(args),
        Cmd::Report(args) => cmd_report(&args.runs),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    match args.seed {
        Some(seed) => train_one(&cfg, seed, &out),
        None => train_seeds(&args, &cfg, &out),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    run_dir: PathBuf,
}

fn train_one(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let dir = run_dir(out, seed);
    std::fs::create_dir_all(&dir)?;
    let suite = bench::build_suite(cfg, seed)?;
    let mut model = bench::build_model(cfg, seed)?;
    eprintln!("training seed {seed}: {} tasks, {} steps", suite.len(), cfg.training.steps);
    let metrics = bench::train(&suite, &mut model, &train_options(cfg, seed))?;
    metrics.write_jsonl(&dir.join("metrics.jsonl"))?;
    if let Some(counts) = metrics.final_allocation() {
        let report = AllocationReport {
            tasks: cfg.tasks.iter().map(|t| t.name.clone()).collect(),
            ranks: (1..=cfg.adapter.rank).collect(),
            counts: counts.clone(),
        };
        write_allocation(&report, &dir.join("allocation.json"))?;
    }
    checkpoint::save(&dir.join("checkpoint"), &model, cfg, seed, metrics.sampler_state.clone())?;
    if let Some((_, mean)) = metrics.last_eval() {
        eprintln!("seed {seed}: mean held-out accuracy {mean:.4}");
    }
    print_json(&TrainSummary { seed, run_dir: dir })
}

/// Re-invoke this executable once per seed, at most `MORE_KIT_THREADS`
/// at a time.
fn train_seeds(args: &TrainArgs, cfg: &RunConfig, out: &Path) -> Result<()> {
    let exe = std::env::current_exe()?;
    let limit = std::env::var("MORE_KIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1);
    let mut failures = Vec::new();
    for chunk in cfg.seeds.chunks(limit) {
        let mut children = Vec::new();
        for &seed in chunk {
            let mut cmd = Command::new(&exe);
            cmd.arg("train")
                .arg("--config")
                .arg(&args.config.config)
                .arg("--seed")
                .arg(seed.to_string())
                .arg("--out")
                .arg(out);
            for a in &args.config.ablations {
                cmd.arg("--ablation").arg(a);
            }
            children.push((seed, cmd.spawn()?));
        }
        for (seed, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                failures.push((seed, status.code().unwrap_or(1)));
            }
        }
    }
    match failures.first() {
        None => Ok(()),
        Some(&(seed, code)) => Err(match code {
            3 => Error::Divergence {
                step: 0,
                detail: format!("seed {seed} failed numerically"),
            },
            4 => Error::Checkpoint(format!("seed {seed} hit an I/O failure")),
            _ => Error::Config(format!("seed {seed} exited with code {code}")),
        }),
    }
}

#[derive(Serialize, Deserialize)]
pub struct EvalOutput {
    pub tasks: Vec<String>,
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

pub fn eval_checkpoint(dir: &Path) -> Result<EvalOutput> {
    let (mut model, manifest) = checkpoint::load(dir)?;
    let suite = bench::build_suite(&manifest.config, manifest.seed)?;
    let accuracy = bench::evaluate(&suite, &mut model)?;
    let mean = accuracy.iter().sum::<f64>() / accuracy.len() as f64;
    Ok(EvalOutput {
        tasks: manifest.config.tasks.iter().map(|t| t.name.clone()).collect(),
        accuracy,
        mean_accuracy: mean,
    })
}

fn cmd_eval(dir: &Path) -> Result<()> {
    print_json(&eval_checkpoint(dir)?)
}

fn cmd_audit(args: AuditArgs) -> Result<()> {
    let model = match (&args.checkpoint, &args.config) {
        (Some(dir), _) => checkpoint::load(dir)?.0,
        (None, Some(path)) => {
            let cfg = ConfigArgs {
                config: path.clone(),
                ablations: args.ablations.clone(),
            }
            .load()?;
            bench::build_model(&cfg, args.seed)?
        }
        (None, None) => return Err(Error::Config("audit needs --config or --checkpoint".into())),
    };
    print_json(&audit(&model))
}

fn cmd_freeze(args: FreezeArgs) -> Result<()> {
    let (mut model, manifest) = checkpoint::load(&args.checkpoint)?;
    model.freeze_mapping()?;
    let out = args.out.unwrap_or(args.checkpoint);
    checkpoint::save(&out, &model, &manifest.config, manifest.seed, manifest.rng)?;
    #[derive(Serialize)]
    struct Frozen {
        checkpoint: PathBuf,
        routing: Vec<crate::more::Routing>,
    }
    print_json(&Frozen {
        checkpoint: out,
        routing: model.routings(),
    })
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let rows = export_embeddings(&model, &args.out)?;
    eprintln!("wrote {rows} embedding rows to {}", args.out.display());
    Ok(())
}

fn cmd_fewshot(args: FewshotArgs) -> Result<()> {
    let (source, manifest) = checkpoint::load(&args.checkpoint)?;
    let task: TaskSpec = serde_json::from_str(&std::fs::read_to_string(&args.task)?)
        .map_err(|e| Error::Config(format!("task spec: {e}")))?;
    let policy = InitPolicy::parse(&args.policy).expect("clap restricts the policy");
    let template = FewShotOptions {
        shots: 1,
        steps: args.steps,
        lr: args.lr.unwrap_or(manifest.config.training.lr),
        batch_size: manifest.config.training.batch_size,
        policy,
        seed: 0,
        pool_size: 256,
    };
    let summaries = few_shot_sweep(
        &source,
        &manifest.config,
        manifest.seed,
        &task,
        &args.shots,
        &args.seeds,
        &template,
    )?;
    std::fs::create_dir_all(&args.out)?;
    for s in &summaries {
        let path = args.out.join(format!("fewshot_k{}.json", s.shots));
        std::fs::write(&path, serde_json::to_string_pretty(s)?)?;
        eprintln!("k={}: mean accuracy {:.4} over {} seeds", s.shots, s.mean_accuracy, s.runs.len());
    }
    Ok(())
}

/// Cross-seed summary of a training sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub seeds: Vec<u64>,
    pub tasks: Vec<String>,
    pub intrinsic_ranks: Vec<usize>,
    pub mean_accuracy_per_task: Vec<f64>,
    pub mean_accuracy: f64,
    /// Per seed: mean selected rank per task.
    pub mean_selected_rank: Vec<Vec<f64>>,
    /// Per seed: Spearman correlation of intrinsic vs selected rank.
    pub rank_spearman: Vec<f64>,
    /// Share of selections at ranks 1-3, over all seeds.
    pub low_rank_share: Option<f64>,
}

pub fn build_report(runs: &Path) -> Result<Report> {
    let mut dirs: Vec<(u64, PathBuf)> = std::fs::read_dir(runs)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let seed = name.strip_prefix("seed-")?.parse().ok()?;
            Some((seed, e.path()))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!("no seed-* runs under {}", runs.display())));
    }
    let manifest = checkpoint::read_manifest(&dirs[0].1.join("checkpoint"))?;
    let tasks: Vec<String> = manifest.config.tasks.iter().map(|t| t.name.clone()).collect();
    let intrinsic: Vec<usize> = manifest.config.tasks.iter().map(|t| t.intrinsic_rank).collect();
    let mut acc_sum = vec![0.0; tasks.len()];
    let mut msr = Vec::new();
    let mut rho = Vec::new();
    let mut total = vec![vec![0u64; manifest.config.adapter.rank]; tasks.len()];
    let mut any_alloc = false;
    for (_, dir) in &dirs {
        let text = std::fs::read_to_string(dir.join("metrics.jsonl"))?;
        let metrics = RunMetrics {
            records: text
                .lines()
                .map(serde_json::from_str)
                .collect::<std::result::Result<_, _>>()?,
            sampler_state: None,
        };
        let (acc, _) = metrics
            .last_eval()
            .ok_or_else(|| Error::Config(format!("{} has no eval record", dir.display())))?;
        for (s, a) in acc_sum.iter_mut().zip(acc) {
            *s += a;
        }
        if let Some(alloc) = metrics.final_allocation() {
            any_alloc = true;
            let m = mean_selected_rank(alloc);
            let x: Vec<f64> = intrinsic.iter().map(|&k| k as f64).collect();
            rho.push(spearman(&x, &m).unwrap_or(0.0));
            msr.push(m);
            for (row, add) in total.iter_mut().zip(alloc) {
                for (c, a) in row.iter_mut().zip(add) {
                    *c += a;
                }
            }
        }
    }
    let n = dirs.len() as f64;
    let per_task: Vec<f64> = acc_sum.iter().map(|s| s / n).collect();
    Ok(Report {
        seeds: dirs.iter().map(|(s, _)| *s).collect(),
        mean_accuracy: per_task.iter().sum::<f64>() / per_task.len() as f64,
        tasks,
        intrinsic_ranks: intrinsic,
        mean_accuracy_per_task: per_task,
        mean_selected_rank: msr,
        rank_spearman: rho,
        low_rank_share: any_alloc.then(|| low_rank_share(&total, 3)),
    })
}

fn cmd_report(runs: &Path) -> Result<()> {
    print_json(&build_report(runs)?)
}
