//! `hpi`: run hybrid path integral experiments from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hpi_core::harness::{self, diag, emit, merge_json, ExperimentConfig, ProposalKind, ScalePreset};
use log::info;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "hpi", version, about = "Hybrid path integral control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Paired proposal vs H-PI batch; writes CSV and JSON files to --out.
    Run(RunArgs),
    /// Solve the H-iLQR proposal and save it as JSON.
    Ilqr(IlqrArgs),
    /// Path-measure diagnostics.
    #[command(subcommand)]
    Diag(DiagCommand),
    /// Recompute summary tables from a batch directory.
    Stats(StatsArgs),
}

#[derive(Subcommand)]
enum DiagCommand {
    /// Girsanov ratio vs discrete density ratio, KL vs control energy, and the
    /// Radon–Nikodym martingale check.
    Girsanov(GirsanovArgs),
    /// Effective sample portion at t = 0 with and without reference extensions.
    Ablation(CommonArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProposalArg {
    Hilqr,
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

/// Flags shared by every command that builds a system.
#[derive(Args, Clone)]
struct CommonArgs {
    #[arg(long)]
    system: Option<String>,
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    scale_preset: Option<PresetArg>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    extensions: Option<OnOff>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    experiments: Option<usize>,
    #[arg(long, value_enum)]
    proposal: Option<ProposalArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IlqrArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GirsanovArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Also rewrite tables.json in the directory.
    #[arg(long)]
    write: bool,
}

impl CommonArgs {
    fn overlay(&self) -> Value {
        let mut v = json!({});
        let mut set = |path: &[&str], value: Value| {
            let mut patch = value;
            for key in path.iter().rev() {
                patch = json!({ *key: patch });
            }
            merge_json(&mut v, &patch);
        };
        if let Some(s) = &self.system {
            set(&["system"], json!(s));
        }
        if let Some(p) = self.scale_preset {
            set(&["scale_preset"], json!(preset_of(p)));
        }
        if let Some(n) = self.samples {
            set(&["samples"], json!(n));
        }
        if let Some(s) = self.seed {
            set(&["seed"], json!(s));
        }
        if let Some(e) = self.extensions {
            set(&["extensions"], json!(matches!(e, OnOff::On)));
        }
        for (key, value) in [("dt", self.dt), ("eps", self.eps), ("horizon", self.horizon)] {
            if let Some(x) = value {
                set(&["overrides", key], json!(x));
            }
        }
        v
    }
}

fn preset_of(p: PresetArg) -> ScalePreset {
    match p {
        PresetArg::Desk => ScalePreset::Desk,
        PresetArg::Paper => ScalePreset::Paper,
    }
}

/// Preset defaults, then the config file, then flags.
fn resolve_config(common: &CommonArgs, extra: Value) -> Result<ExperimentConfig> {
    let file = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<Value>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => json!({}),
    };
    let mut flags = common.overlay();
    merge_json(&mut flags, &extra);

    let pick = |key: &str| flags.get(key).or_else(|| file.get(key)).cloned();
    let system = match pick("system") {
        Some(Value::String(s)) => s,
        Some(other) => bail!("system must be a string, got {other}"),
        None => "bouncing-ball".to_string(),
    };
    let preset: ScalePreset = match pick("scale_preset") {
        Some(v) => serde_json::from_value(v).context("invalid scale_preset")?,
        None => ScalePreset::Desk,
    };
    let mut value = serde_json::to_value(ExperimentConfig::preset(&system, preset))?;
    merge_json(&mut value, &file);
    merge_json(&mut value, &flags);
    let config: ExperimentConfig = serde_json::from_value(value).context("invalid configuration")?;
    config.validate()?;
    Ok(config)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let mut extra = json!({});
    if let Some(n) = args.experiments {
        extra["experiments"] = json!(n);
    }
    if let Some(p) = args.proposal {
        let kind = match p {
            ProposalArg::Hilqr => ProposalKind::Hilqr,
            ProposalArg::Zero => ProposalKind::Zero,
        };
        extra["proposal"] = serde_json::to_value(kind)?;
    }
    if let Some(out) = &args.out {
        extra["out"] = json!(out);
    }
    let config = resolve_config(&args.common, extra)?;
    let out = config.out.clone().context("--out is required (flag or config file)")?;
    emit::prepare_output_dir(&out).with_context(|| format!("output directory {} is not writable", out.display()))?;
    info!(
        "{}: {} experiments, {} samples, seed {}",
        config.system, config.experiments, config.samples, config.seed
    );
    let batch = harness::run_batch(&config)?;
    emit::emit(&batch, &out)?;
    let failed = batch.records.iter().filter(|r| !r.completed()).count();
    match batch.tables() {
        Ok(t) => print_json(&t)?,
        Err(e) => eprintln!("no tables: {e}"),
    }
    if failed > 0 {
        eprintln!("{failed} of {} experiments failed", batch.records.len());
    }
    Ok(())
}

fn ilqr(args: &IlqrArgs) -> Result<()> {
    let config = resolve_config(&args.common, json!({}))?;
    let bench = config.benchmark()?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        emit::prepare_output_dir(parent)?;
    }
    let sol = hpi_core::hilqr::solve(&bench.model, &bench.grid, &bench.initial, &bench.costs, &config.events, &config.hilqr)?;
    let policy = sol.policy.clone().with_extensions(config.extensions);
    policy.save(&bench.model, Some(config.seed), &args.out)?;
    print_json(&json!({
        "system": config.system,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "cost": sol.cost(),
        "jumps": policy.nominal.jumps.len(),
        "out": args.out,
    }))
}

fn girsanov(args: &GirsanovArgs) -> Result<()> {
    let config = resolve_config(&args.common, json!({}))?;
    let report = diag::girsanov_report(&config, config.samples)?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    print_json(&report)
}

fn ablation(args: &CommonArgs) -> Result<()> {
    let config = resolve_config(args, json!({}))?;
    print_json(&harness::ablation_extensions(&config)?)
}

fn stats(args: &StatsArgs) -> Result<()> {
    let dir: &Path = &args.input;
    let manifest = emit::read_manifest(&dir.join(emit::MANIFEST_FILE))
        .with_context(|| format!("reading manifest in {}", dir.display()))?;
    info!("batch for {} written by {}", manifest.config.system, manifest.version);
    let tables = emit::tables_from_dir(dir)?;
    if args.write {
        emit::write_tables(dir, &tables)?;
    }
    print_json(&tables)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HPI_THREADS") {
        let n: usize = v.parse().with_context(|| format!("HPI_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("HPI_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::Run(a) => run(&a),
        Command::Ilqr(a) => ilqr(&a),
        Command::Diag(DiagCommand::Girsanov(a)) => girsanov(&a),
        Command::Diag(DiagCommand::Ablation(a)) => ablation(&a),
        Command::Stats(a) => stats(&a),
    }
}
