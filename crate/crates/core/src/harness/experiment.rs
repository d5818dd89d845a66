//! Experiment driver: data construction, per-seed/per-budget runs, and
//! mean/std aggregation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_csv_dataset, lof_scores, lof_shift_split_with_scores, standardize, synth_gaussian_shift,
    CsvSchema, Dataset, LabelMap, SplitManifest, SynthShiftSpec,
};
use crate::ensemble::predict_from_probs;
use crate::error::{Error, Result};
use crate::harness::config::{DatasetConfig, ExperimentConfig, Method, StdMode};
use crate::metrics::{MetricBundle, SweepPoint};
use crate::nn::MlpModel;
use crate::rng::derive_seed;
use crate::runner::{
    run_aspest, run_de, run_sr, source_train, RoundLog, RunOutcome,
};

const TAG_DATA: u64 = 0x44415441;
const TAG_MODEL: u64 = 0x4d4f444c;
const TAG_RUN: u64 = 0x52554e21;

/// Everything recorded for one (seed, budget) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub budget: usize,
    pub labels_used: usize,
    /// Accuracy of the source-trained model on the source validation split.
    pub source_val_accuracy: f64,
    /// Accuracy of the source-trained model on the full target test set.
    pub initial_target_accuracy: f64,
    pub metrics: MetricBundle,
    pub curve: Vec<SweepPoint>,
    pub rounds: Vec<RoundLog>,
}

/// One row of the aggregate table (values stored as fractions).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub acquisition: String,
    pub budget: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
}

/// Full record of an experiment: config echo, per-run results, aggregates.
/// Deterministic for a given config (wall-clock timing lives in
/// [`TimingRecord`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_hash: String,
    pub dataset_hash: String,
    pub method: String,
    pub acquisition: String,
    /// Raw-label mapping for CSV datasets (class index -> original label).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label_map: Option<LabelMap>,
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    pub aggregates: Vec<AggregateRow>,
}

/// Wall-clock sidecar, kept out of [`ResultRecord`] so results files are
/// bit-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub total_secs: f64,
    pub per_run: Vec<RunTiming>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTiming {
    pub seed: u64,
    pub budget: usize,
    pub secs: f64,
}

/// Materialized splits for one seed.
pub struct BuiltData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub manifest: SplitManifest,
    /// Raw-label mapping for CSV datasets, persisted with results.
    pub label_map: Option<LabelMap>,
}

/// Build (and optionally standardize) the splits for one seed. For CSV
/// datasets the caller may pass precomputed LOF scores to avoid repeating
/// the neighbor search across seeds.
pub fn build_data(
    dataset: &DatasetConfig,
    seed: u64,
    csv_cache: Option<&CsvCache>,
) -> Result<BuiltData> {
    let mut label_map = None;
    let (train, val, test, manifest) = match dataset {
        DatasetConfig::Synthetic {
            classes,
            features,
            n_source,
            n_target,
            shift_magnitude,
            val_fraction,
        } => {
            let spec = SynthShiftSpec {
                n_classes: *classes,
                n_features: *features,
                n_source: *n_source,
                n_target: *n_target,
                shift_magnitude: *shift_magnitude,
                val_fraction: *val_fraction,
            };
            synth_gaussian_shift(&spec, derive_seed(seed, &[TAG_DATA]))?
        }
        DatasetConfig::Csv {
            path,
            label_column,
            ignore_columns,
            delimiter,
            contamination,
            lof_k,
            val_fraction,
        } => {
            let owned;
            let cache = match csv_cache {
                Some(c) => c,
                None => {
                    owned = CsvCache::load(path, label_column, ignore_columns, *delimiter, *lof_k)?;
                    &owned
                }
            };
            label_map = Some(cache.label_map.clone());
            lof_shift_split_with_scores(
                &cache.dataset,
                &cache.scores,
                *contamination,
                *lof_k,
                *val_fraction,
                derive_seed(seed, &[TAG_DATA]),
            )?
        }
    };
    // Normalization stats always come from the training split alone.
    let (train, mut rest, _) = standardize(&train, &[&val, &test])?;
    let test = rest.pop().unwrap();
    let val = rest.pop().unwrap();
    Ok(BuiltData {
        train,
        val,
        test,
        manifest,
        label_map,
    })
}

/// CSV dataset with its (seed-independent) LOF scores, computed once.
pub struct CsvCache {
    pub dataset: Dataset,
    pub scores: Vec<f64>,
    pub label_map: LabelMap,
}

impl CsvCache {
    pub fn load(
        path: &std::path::Path,
        label_column: &str,
        ignore_columns: &[String],
        delimiter: char,
        lof_k: usize,
    ) -> Result<Self> {
        let mut schema = CsvSchema::new(label_column);
        schema.ignore_columns = ignore_columns.to_vec();
        schema.delimiter = delimiter;
        let (dataset, label_map) = load_csv_dataset(path, &schema)?;
        let scores = lof_scores(&dataset.x, lof_k)?;
        Ok(Self {
            dataset,
            scores,
            label_map,
        })
    }
}

fn accuracy_of(model: &MlpModel, data: &Dataset) -> Result<f64> {
    let probs = model.predict_probs(&data.x.view())?;
    let pred = predict_from_probs(&probs);
    let correct = pred
        .labels
        .iter()
        .zip(&data.y)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn run_method(
    cfg: &ExperimentConfig,
    source_model: &MlpModel,
    data: &BuiltData,
    budget: usize,
    seed: u64,
) -> Result<RunOutcome> {
    let train_cfg = cfg.train.fine_tune_config(cfg.aspest.lambda);
    let targets = cfg.metric_targets();
    let run_seed = derive_seed(seed, &[TAG_RUN, budget as u64]);
    let outcome = match cfg.method {
        Method::Sr => {
            run_sr(
                source_model,
                &data.train,
                &data.test,
                cfg.effective_acquisition(),
                budget,
                cfg.aspest.rounds,
                &train_cfg,
                cfg.clue_temperature,
                &targets,
                run_seed,
            )?
            .outcome
        }
        Method::De => {
            run_de(
                source_model,
                &data.train,
                &data.test,
                cfg.effective_acquisition(),
                budget,
                cfg.aspest.rounds,
                cfg.aspest.n_members,
                cfg.aspest.initial_steps,
                &train_cfg,
                cfg.clue_temperature,
                &targets,
                run_seed,
            )?
            .outcome
        }
        Method::Aspest => {
            run_aspest(
                source_model,
                &data.train,
                &data.test,
                &cfg.aspest,
                budget,
                &train_cfg,
                &targets,
                run_seed,
            )?
            .outcome
        }
    };
    Ok(outcome)
}

struct SeedResults {
    runs: Vec<RunResult>,
    timings: Vec<RunTiming>,
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, csv_cache: Option<&CsvCache>) -> Result<SeedResults> {
    let data = build_data(&cfg.dataset, seed, csv_cache)?;
    let source_model = source_train(
        &cfg.model,
        &data.train,
        cfg.train.source_epochs,
        cfg.train.source_learning_rate,
        cfg.train.batch_size,
        cfg.train.optimizer,
        derive_seed(seed, &[TAG_MODEL]),
    )?;
    let source_val_accuracy = accuracy_of(&source_model, &data.val)?;
    let initial_target_accuracy = accuracy_of(&source_model, &data.test)?;

    let mut runs = Vec::with_capacity(cfg.budgets.len());
    let mut timings = Vec::with_capacity(cfg.budgets.len());
    for &budget in &cfg.budgets {
        let start = Instant::now();
        let outcome = run_method(cfg, &source_model, &data, budget, seed)?;
        let metrics =
            MetricBundle::compute(&outcome.frame, cfg.target_accuracy, cfg.target_coverage);
        runs.push(RunResult {
            seed,
            budget,
            labels_used: outcome.labels_used,
            source_val_accuracy,
            initial_target_accuracy,
            metrics,
            curve: outcome.frame.sweep(),
            rounds: outcome.rounds,
        });
        timings.push(RunTiming {
            seed,
            budget,
            secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok(SeedResults { runs, timings })
}

/// Run the full experiment grid (seeds x budgets). Seeds execute as
/// independent jobs on up to `threads` workers; results are identical
/// regardless of thread count because every job is seed-deterministic.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<(ResultRecord, TimingRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let csv_cache = match &cfg.dataset {
        DatasetConfig::Csv {
            path,
            label_column,
            ignore_columns,
            delimiter,
            lof_k,
            ..
        } => Some(CsvCache::load(
            path,
            label_column,
            ignore_columns,
            *delimiter,
            *lof_k,
        )?),
        _ => None,
    };

    let seed_results: Vec<Result<SeedResults>> = if threads <= 1 {
        cfg.seeds
            .iter()
            .map(|&s| run_seed(cfg, s, csv_cache.as_ref()))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            cfg.seeds
                .par_iter()
                .map(|&s| run_seed(cfg, s, csv_cache.as_ref()))
                .collect()
        })
    };

    let mut runs = Vec::new();
    let mut per_run = Vec::new();
    for r in seed_results {
        let r = r?;
        runs.extend(r.runs);
        per_run.extend(r.timings);
    }

    let record = ResultRecord {
        config_hash: cfg.config_hash(),
        dataset_hash: cfg.dataset_hash(),
        method: cfg.method.to_string(),
        acquisition: acquisition_name(cfg),
        label_map: csv_cache.map(|c| c.label_map),
        config: cfg.clone(),
        aggregates: aggregate_bundle_rows(cfg, &runs),
        runs,
    };
    let timing = TimingRecord {
        total_secs: started.elapsed().as_secs_f64(),
        per_run,
    };
    Ok((record, timing))
}

fn acquisition_name(cfg: &ExperimentConfig) -> String {
    if cfg.method == Method::Aspest {
        "margin".to_string()
    } else {
        format!("{:?}", cfg.effective_acquisition()).to_lowercase()
    }
}

fn mean_std(values: &[f64], mode: StdMode) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let denom = match mode {
        StdMode::Population => n,
        StdMode::Sample => (n - 1.0).max(1.0),
    };
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / denom;
    (mean, var.sqrt())
}

fn aggregate_bundle_rows(cfg: &ExperimentConfig, runs: &[RunResult]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for &budget in &cfg.budgets {
        let in_budget: Vec<&RunResult> = runs.iter().filter(|r| r.budget == budget).collect();
        if in_budget.is_empty() {
            continue;
        }
        let metric_names: Vec<&'static str> = in_budget[0]
            .metrics
            .named_values()
            .iter()
            .map(|(n, _)| *n)
            .collect();
        for name in metric_names {
            let values: Vec<f64> = in_budget
                .iter()
                .filter_map(|r| {
                    r.metrics
                        .named_values()
                        .into_iter()
                        .find(|(n, _)| *n == name)
                        .and_then(|(_, v)| v)
                })
                .collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values, cfg.std_mode);
            rows.push(AggregateRow {
                method: cfg.method.to_string(),
                acquisition: acquisition_name(cfg),
                budget,
                metric: name.to_string(),
                mean,
                std,
                n_runs: values.len(),
            });
        }
    }
    rows
}

/// Merge aggregate tables across records, grouped by
/// (method, acquisition, budget, metric). Records must share a dataset.
pub fn aggregate_runs(records: &[ResultRecord]) -> Result<Vec<AggregateRow>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    if records.iter().any(|r| r.dataset_hash != first.dataset_hash) {
        return Err(Error::Config(
            "cannot aggregate results from different datasets".into(),
        ));
    }
    use std::collections::BTreeMap;
    let mut grouped: BTreeMap<(String, String, usize, String), Vec<f64>> = BTreeMap::new();
    let mut modes: BTreeMap<(String, String, usize, String), StdMode> = BTreeMap::new();
    for record in records {
        for run in &record.runs {
            for (name, value) in run.metrics.named_values() {
                if let Some(v) = value {
                    let key = (
                        record.method.clone(),
                        record.acquisition.clone(),
                        run.budget,
                        name.to_string(),
                    );
                    grouped.entry(key.clone()).or_default().push(v);
                    modes.entry(key).or_insert(record.config.std_mode);
                }
            }
        }
    }
    Ok(grouped
        .into_iter()
        .map(|((method, acquisition, budget, metric), values)| {
            let (mean, std) = mean_std(&values, modes[&(method.clone(), acquisition.clone(), budget, metric.clone())]);
            AggregateRow {
                method,
                acquisition,
                budget,
                metric,
                mean,
                std,
                n_runs: values.len(),
            }
        })
        .collect())
}

/// Format a fraction as the percentage string used in summary tables.
pub fn format_percent(value: f64) -> String {
    format!("{:.2}", value * 100.0)
}
