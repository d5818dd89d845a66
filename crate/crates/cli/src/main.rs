//! `asplab`: run active-selective-prediction experiments from TOML
//! configs, materialize datasets, and evaluate external score dumps.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use asplab_core::harness::{build_data, export_results, run_experiment, ExperimentConfig};
use asplab_core::metrics::{EvalFrame, MetricBundle};

#[derive(Parser)]
#[command(name = "asplab", version, about = "Active selective prediction laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Output directory for results, curves and round logs.
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Override the config's seed list (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for independent (seed) jobs.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Force fully sequential execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Run a config across an explicit budget grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Budgets replacing the config's list (comma-separated).
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<usize>,
    },
    /// Materialize the config's dataset splits plus a reproduction
    /// manifest, without running anything.
    GenData {
        /// Experiment config (TOML); only the [dataset] section is used.
        config: PathBuf,
        #[arg(long, default_value = "data-out")]
        out_dir: PathBuf,
        /// Seed for the split (defaults to the config's first seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the metric family on an external score dump
    /// (CSV columns: score, correct [, selected]).
    Metrics {
        scores: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        target_accuracy: f64,
        #[arg(long, default_value_t = 0.8)]
        target_coverage: f64,
    },
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: String,
    kind: &'a str,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = ErrorRecord {
                error: e.to_string(),
                kind: e.kind(),
            };
            let json = serde_json::to_string(&record)
                .unwrap_or_else(|_| format!("{{\"error\":\"{e}\"}}"));
            eprintln!("{json}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> asplab_core::Result<()> {
    match command {
        Command::Run(args) => run_command(args, None),
        Command::Sweep { run, budgets } => run_command(run, Some(budgets)),
        Command::GenData {
            config,
            out_dir,
            seed,
        } => gen_data(&config, &out_dir, seed),
        Command::Metrics {
            scores,
            target_accuracy,
            target_coverage,
        } => metrics_command(&scores, target_accuracy, target_coverage),
    }
}

fn run_command(args: RunArgs, budgets: Option<Vec<usize>>) -> asplab_core::Result<()> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(budgets) = budgets {
        cfg.budgets = budgets;
    }
    cfg.validate()?;
    let threads = if args.deterministic { 1 } else { args.threads.max(1) };
    let (record, timing) = run_experiment(&cfg, threads)?;
    let written = export_results(&record, Some(&timing), &args.out_dir)?;
    for row in record.aggregates.iter().filter(|r| r.metric == "auacc") {
        println!(
            "{} + {} | M={} | AUACC {} +/- {}",
            row.method,
            row.acquisition,
            row.budget,
            asplab_core::harness::format_percent(row.mean),
            asplab_core::harness::format_percent(row.std),
        );
    }
    println!("wrote {} files to {}", written.len(), args.out_dir.display());
    Ok(())
}

fn gen_data(config: &Path, out_dir: &Path, seed: Option<u64>) -> asplab_core::Result<()> {
    let cfg = ExperimentConfig::from_path(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let data = build_data(&cfg.dataset, seed, None)?;
    std::fs::create_dir_all(out_dir)?;
    for (name, split) in [
        ("train", &data.train),
        ("val", &data.val),
        ("test", &data.test),
    ] {
        let path = out_dir.join(format!("{name}.csv"));
        write_split_csv(split, &path)?;
    }
    let manifest = serde_json::to_string_pretty(&data.manifest)
        .map_err(|e| asplab_core::Error::Serialize(e.to_string()))?;
    std::fs::write(out_dir.join("manifest.json"), manifest + "\n")?;
    if let Some(label_map) = &data.label_map {
        let json = serde_json::to_string_pretty(label_map)
            .map_err(|e| asplab_core::Error::Serialize(e.to_string()))?;
        std::fs::write(out_dir.join("label_map.json"), json + "\n")?;
    }
    println!(
        "wrote splits ({} / {} / {} rows) and manifest to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out_dir.display()
    );
    Ok(())
}

fn write_split_csv(split: &asplab_core::data::Dataset, path: &Path) -> asplab_core::Result<()> {
    let mut file = std::fs::File::create(path)?;
    let header: Vec<String> = (0..split.n_features())
        .map(|j| format!("x{j}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(file, "{}", header.join(","))?;
    for (row, &label) in split.x.outer_iter().zip(&split.y) {
        let mut cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        cells.push(label.to_string());
        writeln!(file, "{}", cells.join(","))?;
    }
    Ok(())
}

fn parse_flag(field: &str, row: usize, column: &str) -> asplab_core::Result<bool> {
    match field.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" => Ok(true),
        "0" | "false" | "f" | "no" => Ok(false),
        other => Err(asplab_core::Error::Ingest(format!(
            "row {row}: cannot parse '{other}' as a boolean for column '{column}'"
        ))),
    }
}

fn metrics_command(path: &Path, target_accuracy: f64, target_coverage: f64) -> asplab_core::Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| asplab_core::Error::Ingest(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| asplab_core::Error::Ingest(e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let score_idx = col("score")
        .ok_or_else(|| asplab_core::Error::Ingest("missing 'score' column".into()))?;
    let correct_idx = col("correct")
        .ok_or_else(|| asplab_core::Error::Ingest("missing 'correct' column".into()))?;
    let selected_idx = col("selected");

    let mut scores = Vec::new();
    let mut correct = Vec::new();
    let mut selected = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| asplab_core::Error::Ingest(format!("row {}: {e}", row_no + 1)))?;
        let s: f64 = record
            .get(score_idx)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| {
                asplab_core::Error::Ingest(format!("row {}: bad score value", row_no + 1))
            })?;
        scores.push(s);
        correct.push(parse_flag(record.get(correct_idx).unwrap_or(""), row_no + 1, "correct")?);
        selected.push(match selected_idx {
            Some(i) => parse_flag(record.get(i).unwrap_or("0"), row_no + 1, "selected")?,
            None => false,
        });
    }
    let frame = EvalFrame::new(scores, correct, selected)?;
    let bundle = MetricBundle::compute(&frame, target_accuracy, target_coverage);
    let json = serde_json::to_string_pretty(&bundle)
        .map_err(|e| asplab_core::Error::Serialize(e.to_string()))?;
    println!("{json}");
    Ok(())
}
