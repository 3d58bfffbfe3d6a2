//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
//! during training, 4 I/O error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::{Arm, ExperimentConfig};
use crate::data::generate;
use crate::error::{config_err, Error};
use crate::experiment::{run_arm, run_experiment, summary_table, write_run};
use crate::train::{Method, Teacher};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const JOBS_ENV: &str = "GROUPDISTIL_JOBS";

#[derive(Debug, Parser)]
#[command(name = "groupdistil", version, about = "Group-robust knowledge distillation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test sets described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving train.csv and test.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint, log and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["group_dro", "kd", "group_distil"])]
        method: String,
        /// Teacher checkpoint; required by kd and group_distil, refused by group_dro.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Config arm providing model and hyperparameters; defaults to the method's arm
        /// (group_dro trains the teacher arm).
        #[arg(long, value_parser = ["teacher", "dro_student", "kd", "group_distil"])]
        arm: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every arm over every configured seed and summarise.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel seed jobs; overrides GROUPDISTIL_JOBS.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the default experiment config as JSON.
    DefaultConfig,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::Contract(_) => EXIT_NUMERIC,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> crate::Result<()> {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Train { config, method, teacher, arm, seed, out } => {
            let method: Method = method.parse()?;
            let arm = arm.map(|a| a.parse()).transpose()?;
            cmd_train(&config, method, teacher.as_deref(), arm, seed, &out)
        }
        Command::Experiment { config, out, jobs } => cmd_experiment(&config, out.as_deref(), jobs),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_json()?);
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> crate::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json(&text)
}

pub fn cmd_gen_data(config: &Path, out: &Path) -> crate::Result<()> {
    let cfg = load_config(config)?;
    let (train, test) = generate(&cfg.data)?;
    std::fs::create_dir_all(out)?;
    train.save(&out.join("train.csv"))?;
    test.save(&out.join("test.csv"))?;
    println!("train group counts: {:?}", train.group_counts());
    println!("test group counts:  {:?}", test.group_counts());
    Ok(())
}

pub fn cmd_train(
    config: &Path,
    method: Method,
    teacher_path: Option<&Path>,
    arm: Option<Arm>,
    seed: u64,
    out: &Path,
) -> crate::Result<()> {
    let cfg = load_config(config)?;
    let arm = match arm {
        Some(a) => a,
        None => Arm::for_method(method).ok_or_else(|| config_err!("no config arm for method {method}"))?,
    };
    if arm.method() != method {
        return Err(config_err!("arm {} trains with {}, not {method}", arm.name(), arm.method()));
    }
    let teacher = match (method.needs_teacher(), teacher_path) {
        (true, None) => return Err(config_err!("--method {method} requires --teacher")),
        (false, Some(_)) => return Err(config_err!("--method {method} does not take --teacher")),
        (true, Some(p)) => Some(load_checkpoint(p)?),
        (false, None) => None,
    };
    let (train, test) = generate(&cfg.data)?;
    if let Some(t) = &teacher {
        if t.input_dim() != train.feature_dim() || t.output_dim() != train.num_classes() {
            return Err(config_err!(
                "teacher checkpoint maps {} -> {}, data needs {} -> {}",
                t.input_dim(),
                t.output_dim(),
                train.feature_dim(),
                train.num_classes()
            ));
        }
    }
    let arm_cfg = cfg.arm(arm);
    let result = run_arm(arm, arm_cfg, &cfg, &train, &test, seed, teacher.as_ref().map(|t| t as &dyn Teacher))?;
    write_run(out, Some(arm), Some(&arm_cfg.model), &result.params, &result.record, &result.metrics)?;
    println!(
        "{} seed {seed}: worst-group {:.4}, average {:.4}, adjusted {:.4}",
        arm.name(),
        result.metrics.worst_group_accuracy,
        result.metrics.average_accuracy,
        result.metrics.adjusted_average_accuracy
    );
    Ok(())
}

fn jobs_from_env() -> crate::Result<Option<usize>> {
    match std::env::var(JOBS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| config_err!("{JOBS_ENV} must be a positive integer, got {v:?}")),
        Err(_) => Ok(None),
    }
}

pub fn cmd_experiment(config: &Path, out: Option<&Path>, jobs: Option<usize>) -> crate::Result<()> {
    let cfg = load_config(config)?;
    let jobs = match jobs {
        Some(j) => j,
        None => jobs_from_env()?.unwrap_or(1),
    };
    if jobs == 0 {
        return Err(config_err!("--jobs must be at least 1"));
    }
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let report = run_experiment(&cfg, &out_dir, jobs)?;
    print!("{}", summary_table(&report.rows, cfg.seeds.len()));
    Ok(())
}
