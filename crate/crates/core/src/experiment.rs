//! Multi-seed comparison of the student arms.
//!
//! Per seed a teacher is trained with group-robust cross-entropy, then the
//! three students start from the same initialisation: a group-robust student
//! from scratch, vanilla distillation and group-robust distillation. Seeds
//! run in parallel on a bounded thread pool; each run owns its random
//! streams, so the results do not depend on scheduling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{save_checkpoint, to_exact_json};
use crate::config::{Arm, ArmConfig, ExperimentConfig, ModelSpec};
use crate::data::{generate, Dataset, STREAM_INIT};
use crate::error::{config_err, Error, Result};
use crate::mlp::MlpParams;
use crate::train::{evaluate, Metrics, RunRecord, Teacher, TrainConfig, TrainSession};

/// Initialisation stream of teachers, kept apart from the students' stream.
pub const STREAM_TEACHER_INIT: u64 = 4;

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub params: MlpParams,
    pub record: RunRecord,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub teacher: ArmResult,
    pub students: Vec<ArmResult>,
}

/// Trains and evaluates one arm. Distillation arms need `teacher`.
pub fn run_arm(
    arm: Arm,
    cfg: &ArmConfig,
    experiment: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    teacher: Option<&dyn Teacher>,
) -> Result<ArmResult> {
    let stream = if arm == Arm::Teacher { STREAM_TEACHER_INIT } else { STREAM_INIT };
    let init = cfg.model.init(&experiment.data, seed, stream)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let (params, mut record) = TrainSession::new(init, teacher, train, train_cfg)?.run()?;
    let metrics = evaluate(&params, test, &experiment.data.train_group_proportions)?;
    record.metrics = Some(metrics.clone());
    Ok(ArmResult { arm, seed, params, record, metrics })
}

pub fn run_seed(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, seed: u64) -> Result<SeedResult> {
    let teacher = run_arm(Arm::Teacher, &cfg.teacher, cfg, train, test, seed, None)?;
    let students = Arm::STUDENTS
        .iter()
        .map(|&arm| {
            let t: Option<&dyn Teacher> = arm.method().needs_teacher().then_some(&teacher.params as &dyn Teacher);
            run_arm(arm, cfg.arm(arm), cfg, train, test, seed, t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedResult { seed, teacher, students })
}

/// Runs every seed, at most `jobs` at a time. Results come back in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<(u64, Result<SeedResult>)>> {
    cfg.validate()?;
    let (train, test) = generate(&cfg.data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| config_err!("cannot start {jobs} worker threads: {e}"))?;
    Ok(pool.install(|| {
        cfg.seeds.par_iter().map(|&seed| (seed, run_seed(cfg, &train, &test, seed))).collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub arm: Arm,
    pub worst_group_mean: f64,
    pub worst_group_std: f64,
    pub adjusted_average_mean: f64,
    pub adjusted_average_std: f64,
    pub average_mean: f64,
    pub average_std: f64,
}

/// Arithmetic mean and sample (n - 1) standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Metric(format!("standard deviation needs two values, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// One row per student arm, best worst-group accuracy first.
pub fn summarize(results: &[SeedResult]) -> Result<Vec<SummaryRow>> {
    let mut rows = Arm::STUDENTS
        .iter()
        .map(|&arm| {
            let metrics: Vec<&Metrics> = results
                .iter()
                .flat_map(|r| r.students.iter().filter(|s| s.arm == arm).map(|s| &s.metrics))
                .collect();
            let pick = |f: fn(&Metrics) -> f64| mean_std(&metrics.iter().map(|m| f(m)).collect::<Vec<_>>());
            let (worst_group_mean, worst_group_std) = pick(|m| m.worst_group_accuracy)?;
            let (adjusted_average_mean, adjusted_average_std) = pick(|m| m.adjusted_average_accuracy)?;
            let (average_mean, average_std) = pick(|m| m.average_accuracy)?;
            Ok(SummaryRow {
                arm,
                worst_group_mean,
                worst_group_std,
                adjusted_average_mean,
                adjusted_average_std,
                average_mean,
                average_std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.worst_group_mean.total_cmp(&a.worst_group_mean).then(a.arm.cmp(&b.arm)));
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "arm,worst_group_mean,worst_group_std,adjusted_average_mean,adjusted_average_std,average_mean,average_std\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.arm.name(),
            r.worst_group_mean,
            r.worst_group_std,
            r.adjusted_average_mean,
            r.adjusted_average_std,
            r.average_mean,
            r.average_std
        );
    }
    out
}

/// Percentages as `mean ± std`, one aligned line per arm.
pub fn summary_table(rows: &[SummaryRow], num_seeds: usize) -> String {
    let mut out = format!("{:<14} {:>22} {:>22} {:>22}\n", "arm", "worst-group acc (%)", "adjusted avg acc (%)", "average acc (%)");
    let pm = |m: f64, s: f64| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s);
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>22} {:>22} {:>22}",
            r.arm.name(),
            pm(r.worst_group_mean, r.worst_group_std),
            pm(r.adjusted_average_mean, r.adjusted_average_std),
            pm(r.average_mean, r.average_std)
        );
    }
    let _ = writeln!(out, "({num_seeds} seeds, sample standard deviation)");
    out
}

#[derive(Serialize)]
pub struct RunMetricsDoc<'a> {
    pub arm: &'a str,
    pub method: &'a str,
    pub seed: u64,
    pub model: Option<&'a ModelSpec>,
    pub config: &'a TrainConfig,
    pub per_group_accuracy: &'a [f64],
    pub worst_group_accuracy: f64,
    pub average_accuracy: f64,
    pub adjusted_average_accuracy: f64,
    pub final_group_weights: Option<&'a [f64]>,
}

impl<'a> RunMetricsDoc<'a> {
    pub fn new(arm: Option<Arm>, model: Option<&'a ModelSpec>, record: &'a RunRecord, metrics: &'a Metrics) -> Self {
        Self {
            arm: arm.map_or("", Arm::name),
            method: record.config.method.name(),
            seed: record.config.seed,
            model,
            config: &record.config,
            per_group_accuracy: &metrics.per_group_accuracy,
            worst_group_accuracy: metrics.worst_group_accuracy,
            average_accuracy: metrics.average_accuracy,
            adjusted_average_accuracy: metrics.adjusted_average_accuracy,
            final_group_weights: record.final_weights.as_deref(),
        }
    }
}

/// Writes `model.json`, `run.csv` and `metrics.json` into `dir`.
pub fn write_run(dir: &Path, arm: Option<Arm>, model: Option<&ModelSpec>, params: &MlpParams, record: &RunRecord, metrics: &Metrics) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(params, &dir.join("model.json"))?;
    std::fs::write(dir.join("run.csv"), record.to_csv_string())?;
    std::fs::write(dir.join("metrics.json"), to_exact_json(&RunMetricsDoc::new(arm, model, record, metrics))?)?;
    Ok(())
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<(u64, String)>,
    pub out_dir: PathBuf,
}

/// Runs the full comparison and writes per-run files plus `summary.csv` and
/// `summary.txt` under `out_dir`. If any seed fails, the successful seeds are
/// still written, together with `partial_results.json`, and the first error
/// is returned.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    if cfg.seeds.len() < 2 {
        return Err(config_err!("seeds: need at least two seeds for a standard deviation, got {}", cfg.seeds.len()));
    }
    let outcomes = run_seeds(cfg, jobs)?;
    std::fs::create_dir_all(out_dir)?;
    let mut done = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(result) => {
                let seed_dir = out_dir.join(format!("seed_{seed}"));
                let t = &result.teacher;
                write_run(&seed_dir.join("teacher"), Some(Arm::Teacher), Some(&cfg.teacher.model), &t.params, &t.record, &t.metrics)?;
                for s in &result.students {
                    write_run(&seed_dir.join(s.arm.name()), Some(s.arm), Some(&cfg.arm(s.arm).model), &s.params, &s.record, &s.metrics)?;
                }
                done.push(result);
            }
            Err(e) => {
                failures.push((seed, e.to_string()));
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(err) = first_error {
        #[derive(Serialize)]
        struct Partial<'a> {
            completed_seeds: Vec<u64>,
            failures: &'a [(u64, String)],
        }
        let doc = Partial { completed_seeds: done.iter().map(|r| r.seed).collect(), failures: &failures };
        std::fs::write(out_dir.join("partial_results.json"), to_exact_json(&doc)?)?;
        return Err(err);
    }
    let rows = summarize(&done)?;
    std::fs::write(out_dir.join("summary.csv"), summary_csv(&rows))?;
    std::fs::write(out_dir.join("summary.txt"), summary_table(&rows, done.len()))?;
    Ok(ExperimentReport { rows, failures, out_dir: out_dir.to_path_buf() })
}
