//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use igdm_core::attack::AttackConfig;
use igdm_core::diagnostics::{alignment_report, mean_remainder, AlignmentReport};
use igdm_core::trainer::{evaluate, run_training, Clock, TrainHistory};
use igdm_core::{init_mlp, Mlp};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::metrics::{write_metrics, HEADER};
use crate::report::emit_report;

#[derive(Debug, Parser)]
#[command(name = "igdm", about = "Adversarial training and indirect gradient distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model without a teacher (natural or adversarial training).
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Distill a student from `model.teacher_checkpoint`.
    Distill {
        #[arg(long)]
        config: PathBuf,
    },
    /// Clean, FGSM and PGD accuracy of `model.checkpoint`.
    AttackEval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mean remainder proportion of `model.checkpoint`.
    ProbeLinearity {
        #[arg(long)]
        config: PathBuf,
    },
    /// Gradient and point-wise alignment between two checkpoints.
    AlignMetrics {
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate finished runs into report.json and SVG charts.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Wall clock measured from construction.
pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        WallClock(Instant::now())
    }
}

impl Clock for WallClock {
    fn now_seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Runs one command; returns 0 on success, 1 on usage or configuration
/// errors and 2 on runtime errors.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainTeacher { config } => train(&RunConfig::load(&config)?, false).map(drop),
        Command::Distill { config } => train(&RunConfig::load(&config)?, true).map(drop),
        Command::AttackEval { config } => attack_eval(&RunConfig::load(&config)?),
        Command::ProbeLinearity { config } => probe_linearity(&RunConfig::load(&config)?),
        Command::AlignMetrics { config } => align_metrics(&RunConfig::load(&config)?),
        Command::Report { out, runs } => emit_report(&runs, &out).map(drop),
    }
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| LabError::io(&cfg.output_dir, e))?;
    write_text(&cfg.output_dir.join("config.json"), &cfg.to_json())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| LabError::Input(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn required_checkpoint(p: &Option<PathBuf>, key: &str) -> Result<Mlp> {
    match p {
        Some(p) => load_checkpoint(p),
        None => Err(LabError::Config(format!("model.{key} is required for this command"))),
    }
}

fn check_model(model: &Mlp, data: &igdm_core::data::Dataset, what: &str) -> Result<()> {
    if model.input_dim() != data.dim() || model.num_classes() != data.num_classes {
        return Err(LabError::Config(format!(
            "{what} has {} inputs and {} classes, data has {} and {}",
            model.input_dim(),
            model.num_classes(),
            data.dim(),
            data.num_classes
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    epochs: usize,
    final_clean_acc: Option<f64>,
    final_pgd_acc: Option<f64>,
    seconds: f64,
    teacher_forward_passes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    alignment: Option<AlignmentReport>,
}

/// Trains from the config and writes `config.json`, `metrics.csv`,
/// `model.ckpt` and `report.json` under `output_dir`.
pub fn train(cfg: &RunConfig, distill: bool) -> Result<TrainHistory> {
    let data = cfg.dataset()?;
    let arch = cfg.architecture(&data);
    let student = match &cfg.model.checkpoint {
        Some(p) => {
            let m = load_checkpoint(p)?;
            check_model(&m, &data, "initial checkpoint")?;
            m
        }
        None => init_mlp(&arch, cfg.seed)?,
    };
    let teacher = if distill {
        let t = required_checkpoint(&cfg.model.teacher_checkpoint, "teacher_checkpoint")?;
        check_model(&t, &data, "teacher")?;
        Some(t)
    } else {
        None
    };
    let tc = cfg.train_config(&data)?;
    prepare_output(cfg)?;
    let history = run_training(&student, teacher.as_ref(), &data, &tc, &WallClock::start())?;
    let metrics = cfg.output_dir.join("metrics.csv");
    if history.records.is_empty() {
        write_text(&metrics, &(HEADER.join(",") + "\n"))?;
    } else {
        write_metrics(&history.records, &metrics)?;
    }
    let model = Mlp::new(student.arch.clone(), history.params.clone())?;
    save_checkpoint(&model, &cfg.output_dir.join("model.ckpt"))?;
    let alignment = match &teacher {
        Some(t) => {
            let (_, held) = data.split_holdout()?;
            Some(alignment_report(t, &model, &held, tc.inner_kind, &tc.eval_attack, &cfg.probe, cfg.seed)?)
        }
        None => None,
    };
    let last = history.records.last();
    write_json(
        &cfg.output_dir.join("report.json"),
        &TrainReport {
            epochs: history.records.len(),
            final_clean_acc: last.map(|r| r.clean_acc),
            final_pgd_acc: last.map(|r| r.pgd_acc),
            seconds: history.total_seconds(),
            teacher_forward_passes: history.teacher_passes,
            alignment,
        },
    )?;
    Ok(history)
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    clean_acc: f64,
    fgsm_acc: f64,
    pgd_acc: f64,
}

fn attack_eval(cfg: &RunConfig) -> Result<()> {
    let data = cfg.dataset()?;
    let model = required_checkpoint(&cfg.model.checkpoint, "checkpoint")?;
    check_model(&model, &data, "checkpoint")?;
    let pgd = cfg.eval_attack(&data);
    let fgsm = AttackConfig {
        step_size: pgd.epsilon,
        steps: 1,
        random_start: false,
        ..pgd.clone()
    };
    let (clean_acc, pgd_acc) = evaluate(&model, &data, Some(&pgd), cfg.seed)?;
    let (_, fgsm_acc) = evaluate(&model, &data, Some(&fgsm), cfg.seed)?;
    prepare_output(cfg)?;
    write_json(
        &cfg.output_dir.join("report.json"),
        &EvalReport {
            samples: data.len(),
            clean_acc,
            fgsm_acc,
            pgd_acc,
        },
    )
}

#[derive(Serialize)]
struct ProbeReport {
    samples: usize,
    noise_magnitude: f64,
    num_probes: usize,
    remainder: f64,
}

fn probe_linearity(cfg: &RunConfig) -> Result<()> {
    let data = cfg.dataset()?;
    let model = required_checkpoint(&cfg.model.checkpoint, "checkpoint")?;
    check_model(&model, &data, "checkpoint")?;
    let remainder = mean_remainder(&model, &data.inputs, &cfg.probe, 0)?;
    prepare_output(cfg)?;
    write_json(
        &cfg.output_dir.join("report.json"),
        &ProbeReport {
            samples: data.len(),
            noise_magnitude: cfg.probe.noise_magnitude,
            num_probes: cfg.probe.num_probes,
            remainder,
        },
    )
}

fn align_metrics(cfg: &RunConfig) -> Result<()> {
    let data = cfg.dataset()?;
    let student = required_checkpoint(&cfg.model.checkpoint, "checkpoint")?;
    let teacher = required_checkpoint(&cfg.model.teacher_checkpoint, "teacher_checkpoint")?;
    check_model(&student, &data, "checkpoint")?;
    check_model(&teacher, &data, "teacher")?;
    let report = alignment_report(
        &teacher,
        &student,
        &data,
        cfg.attack.inner,
        &cfg.eval_attack(&data),
        &cfg.probe,
        cfg.seed,
    )?;
    prepare_output(cfg)?;
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.serialize(report).map_err(|e| LabError::Input(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| LabError::Input(e.to_string()))?;
    let path = cfg.output_dir.join("alignment.csv");
    fs::write(&path, bytes).map_err(|e| LabError::io(&path, e))
}
