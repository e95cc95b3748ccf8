use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hivemil::datamodel::io::save_dataset;
use hivemil::evalkit::{save_csv, save_summary, MetricsRow, RunMetrics, Summary};
use hivemil::harness::config::apply_overrides;
use hivemil::harness::{self, BaselineKind, MatrixSpec, RunConfig};
use hivemil::synthgen::{generate_dataset, SynthConfig};

mod check;

#[derive(Parser)]
#[command(name = "hivemil", version, about = "Few-shot multi-scale vision-language MIL experiments")]
struct Cli {
    /// Root directory for outputs when no explicit --out is given.
    #[arg(long, env = "HIVEMIL_OUTPUT_ROOT", default_value = "runs", global = true)]
    output_root: PathBuf,

    /// Print wall-clock time on exit.
    #[arg(long, global = true)]
    time: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (JSON); omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// `key=value` override, dotted keys allowed (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Dataset directory; replaces data.path.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Generator configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model once per seed.
    Train(RunArgs),
    /// Train a pooling baseline under the same protocol.
    Baseline {
        #[arg(long, value_parser = parse_baseline)]
        kind: BaselineKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run an ablation grid.
    Matrix {
        /// Grid specification (JSON).
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a saved checkpoint on its seed's test split.
    Eval {
        /// Checkpoint path without extension, e.g. runs/train/checkpoints/seed0.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the invariant and gradient checks.
    Check,
}

fn parse_baseline(s: &str) -> Result<BaselineKind, String> {
    s.parse().map_err(|e: hivemil::error::Error| e.to_string())
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&args.overrides)?;
    if let Some(d) = &args.data {
        cfg.data.path = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(explicit: &Option<PathBuf>, cfg: Option<&RunConfig>, root: &Path, name: &str) -> PathBuf {
    explicit
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| root.join(name))
}

fn print_summary(name: &str, s: &Summary) {
    let fmt = |m: Option<hivemil::evalkit::MeanStd>| match m {
        Some(m) => format!("{:.4} ± {:.4}", m.mean, m.std),
        None => "n/a".to_owned(),
    };
    println!(
        "{name}: acc {}  auc {}  f1 {}  hit@2 {}",
        fmt(s.accuracy),
        fmt(s.auc),
        fmt(s.macro_f1),
        fmt(s.hit_ratio_at_2)
    );
}

fn write_metrics(dir: &Path, name: &str, m: &RunMetrics) -> Result<()> {
    let rows: Vec<MetricsRow> = m.per_seed.iter().map(|s| MetricsRow::ok(name, s)).collect();
    save_csv(&dir.join("metrics.csv"), &rows)?;
    save_summary(&dir.join("summary.json"), &[(name.to_owned(), m.summary())])?;
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Synth { config, overrides, out } => {
            let base = match config {
                Some(p) => serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => SynthConfig::default(),
            };
            let cfg: SynthConfig = apply_overrides(&base, overrides)?;
            let dir = out_dir(out, None, &cli.output_root, "synth");
            let ds = generate_dataset(&cfg)?;
            save_dataset(&dir, &ds, Some(serde_json::to_value(&cfg)?))?;
            println!("wrote {} bags to {}", ds.bags.len(), dir.display());
        }
        Command::Train(args) => {
            let cfg = run_config(args)?;
            let ds = harness::load_data(&cfg)?;
            let report = harness::train(&cfg, &ds)?;
            let dir = out_dir(&args.out, Some(&cfg), &cli.output_root, "train");
            harness::save_train_outputs(&dir, &cfg, &report)?;
            print_summary("hivemil", &report.metrics.summary());
            println!("outputs in {}", dir.display());
        }
        Command::Baseline { kind, run } => {
            let cfg = run_config(run)?;
            let ds = harness::load_data(&cfg)?;
            let m = harness::run_baseline(*kind, &ds, &cfg)?;
            let dir = out_dir(&run.out, Some(&cfg), &cli.output_root, "baseline");
            write_metrics(&dir, kind.name(), &m)?;
            print_summary(kind.name(), &m.summary());
        }
        Command::Matrix { grid, run } => {
            let cfg = run_config(run)?;
            let spec: MatrixSpec = serde_json::from_slice(&std::fs::read(grid).with_context(|| format!("reading {}", grid.display()))?)
                .context("parsing grid")?;
            let ds = harness::load_data(&cfg)?;
            let result = harness::run_matrix(&cfg, &spec, &ds)?;
            let dir = out_dir(&run.out, Some(&cfg), &cli.output_root, "matrix");
            harness::save_matrix_outputs(&dir, &cfg, &spec, &result)?;
            for (name, s) in result.summaries() {
                print_summary(&name, &s);
            }
            let failed = result.rows.iter().filter(|r| !r.error.is_empty()).count();
            if failed > 0 {
                eprintln!("{failed} job(s) failed; see metrics.csv");
            }
        }
        Command::Eval { checkpoint, run } => {
            let cfg = run_config(run)?;
            let ds = harness::load_data(&cfg)?;
            let m = harness::eval_checkpoint(&ds, &cfg, checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Check => return check::run_all(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let result = run(&cli);
    if cli.time {
        eprintln!("wall-clock: {:.2} s", start.elapsed().as_secs_f64());
    }
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
