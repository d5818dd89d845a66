//! Result persistence: results.json, summary.csv, per-run curve CSVs and
//! round logs as JSON lines. Exports are a pure function of the record, so
//! re-exporting an identical record reproduces every file byte for byte.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::experiment::{
    format_percent, AggregateRow, ResultRecord, TimingRecord,
};
use crate::metrics::MetricBundle;

fn fmt_tau(tau: f64) -> String {
    if tau == f64::INFINITY {
        "inf".to_string()
    } else if tau == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{tau}")
    }
}

#[derive(Serialize)]
struct RoundLine<'a> {
    round: usize,
    selected_indices: &'a [usize],
    ensemble_accuracy: f64,
    metrics: &'a MetricBundle,
    budget: usize,
}

/// Write the full export bundle into `out_dir` (created if missing):
/// `results.json`, `timing.json`, `summary.csv`,
/// `curve_<seed>_<budget>.csv` and `rounds_<seed>.jsonl`.
pub fn export_results(
    record: &ResultRecord,
    timing: Option<&TimingRecord>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let results_path = out_dir.join("results.json");
    let json = serde_json::to_string_pretty(record)
        .map_err(|e| Error::Serialize(e.to_string()))?;
    std::fs::write(&results_path, json + "\n")?;
    written.push(results_path);

    if let Some(timing) = timing {
        let timing_path = out_dir.join("timing.json");
        let json = serde_json::to_string_pretty(timing)
            .map_err(|e| Error::Serialize(e.to_string()))?;
        std::fs::write(&timing_path, json + "\n")?;
        written.push(timing_path);
    }

    let summary_path = out_dir.join("summary.csv");
    write_summary(&record.aggregates, &summary_path)?;
    written.push(summary_path);

    // Curves: tau ascending, so the first data row is the full-coverage
    // endpoint.
    for run in &record.runs {
        let path = out_dir.join(format!("curve_{}_{}.csv", run.seed, run.budget));
        let mut file = std::fs::File::create(&path)?;
        writeln!(file, "tau,coverage,accuracy")?;
        for point in run.curve.iter().rev() {
            writeln!(
                file,
                "{},{},{}",
                fmt_tau(point.tau),
                point.coverage,
                point.accuracy
            )?;
        }
        written.push(path);
    }

    // Round logs: one JSONL file per seed, one line per (budget, round).
    let mut seeds: Vec<u64> = record.runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    for seed in seeds {
        let path = out_dir.join(format!("rounds_{seed}.jsonl"));
        let mut file = std::fs::File::create(&path)?;
        for run in record.runs.iter().filter(|r| r.seed == seed) {
            for round in &run.rounds {
                let line = RoundLine {
                    round: round.round,
                    selected_indices: &round.selected_indices,
                    ensemble_accuracy: round.ensemble_accuracy,
                    metrics: &round.metrics,
                    budget: run.budget,
                };
                let json = serde_json::to_string(&line)
                    .map_err(|e| Error::Serialize(e.to_string()))?;
                writeln!(file, "{json}")?;
            }
        }
        written.push(path);
    }

    Ok(written)
}

/// `summary.csv`: method, acquisition, budget, metric, mean, std — values
/// formatted as percentages with two decimals.
pub fn write_summary(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "method,acquisition,budget,metric,mean,std")?;
    for row in rows {
        writeln!(
            file,
            "{},{},{},{},{},{}",
            row.method,
            row.acquisition,
            row.budget,
            row.metric,
            format_percent(row.mean),
            format_percent(row.std)
        )?;
    }
    Ok(())
}
