//! Command-line front end.
//!
//! Every command writes into a fresh run directory together with a
//! `config.txt` snapshot of the resolved configuration.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load_manifest, write_dataset, VideoClip};
use crate::error::{GlitrError, Result};
use crate::glimpse::GlimpseLocation;
use crate::report::{self, MetricsTable};
use crate::strategies::{early_exit_sweep, evaluate_strategy, EvalClip, StrategyRegistry};
use crate::student::{glitr_rollout, GliTrModel};
use crate::teacher::{OfflineOracle, TeacherModel, TeacherTargets};
use crate::train::{self, LogRow, TrainOptions, LOG_HEADER};

pub const CONFIG_FILE: &str = "config.txt";
pub const ORACLE_CKPT: &str = "oracle.ckpt";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";

#[derive(Debug, Parser)]
#[command(name = "glitr", version, about = "Online glimpse-based video classifier trained from a full-frame teacher")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file; defaults to the snapshot of the input run, if any.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set embed_dim=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train and validation manifests of synthetic clips.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the offline clip-level oracle on full frames.
    TrainOracle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the full-frame teacher.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Oracle run, required when the loss includes `dist`.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the glimpse student from a teacher run.
    TrainStudent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss terms, e.g. `cls` or `cls,spatial,temporal`.
        #[arg(long)]
        loss: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-step validation accuracy of a student under several glimpse strategies.
    EvalStrategies {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Teacher run, required by the `teacher` strategy.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated strategy names.
        #[arg(long)]
        strategies: Option<String>,
        /// Number of evaluation seeds.
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Confidence-threshold early exit sweep.
    EvalEarlyExit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated thresholds in [0, 1].
        #[arg(long)]
        gammas: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Pixel budgets and figures rendered from stored CSVs.
    Report {
        /// Print the pixel budget of the configured geometry.
        #[arg(long)]
        pixels: bool,
        /// Metrics CSV to plot.
        #[arg(long, requires = "out")]
        metrics: Option<PathBuf>,
        /// Output SVG for `--metrics`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 usage, 2 runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
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
            2
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, common } => {
            let cfg = resolve_config(&common, None)?;
            gen_data(&cfg, &out, common.force)
        }
        Command::TrainOracle { data, out, common } => {
            let cfg = resolve_config(&common, Some(&data))?;
            train_oracle(&cfg, &data, &out, common.force)
        }
        Command::TrainTeacher {
            data,
            out,
            oracle,
            common,
        } => {
            let cfg = resolve_config(&common, Some(&data))?;
            train_teacher(&cfg, &data, oracle.as_deref(), &out, common.force)
        }
        Command::TrainStudent {
            data,
            teacher,
            out,
            loss,
            common,
        } => {
            let mut cfg = resolve_config(&common, Some(&teacher))?;
            if let Some(l) = loss {
                cfg.set("student_loss", &l)?;
                cfg.validate()?;
            }
            train_student(&cfg, &data, &teacher, &out, common.force)
        }
        Command::EvalStrategies {
            data,
            student,
            teacher,
            out,
            strategies,
            seeds,
            common,
        } => {
            let mut cfg = resolve_config(&common, Some(&student))?;
            if let Some(s) = strategies {
                cfg.strategies = s;
            }
            if let Some(n) = seeds {
                cfg.eval_seeds = n;
            }
            eval_strategies(&cfg, &data, &student, teacher.as_deref(), &out, common.force)
        }
        Command::EvalEarlyExit {
            data,
            student,
            out,
            gammas,
            common,
        } => {
            let mut cfg = resolve_config(&common, Some(&student))?;
            if let Some(g) = gammas {
                cfg.gammas = g;
                cfg.validate()?;
            }
            eval_early_exit(&cfg, &data, &student, &out, common.force)
        }
        Command::Report {
            pixels,
            metrics,
            out,
            common,
        } => {
            let cfg = resolve_config(&common, None)?;
            if !pixels && metrics.is_none() {
                return Err(GlitrError::Config("report needs --pixels or --metrics".into()));
            }
            if pixels {
                print!("{}", report::budget_table(cfg.glimpse_g, cfg.frames, cfg.frame_h, cfg.frame_w)?);
            }
            if let (Some(m), Some(o)) = (metrics, out) {
                let text = fs::read_to_string(&m).map_err(|e| GlitrError::io(&m, e))?;
                let table = MetricsTable::from_csv(&text)?;
                report::write_text(&o, &report::accuracy_curve_svg(&table)?)?;
            }
            Ok(())
        }
    }
}

/// `--config`, else the input run's snapshot, else defaults; then `--set`.
pub fn resolve_config(common: &Common, input_run: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, input_run) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(run)) if run.join(CONFIG_FILE).is_file() => RunConfig::load(&run.join(CONFIG_FILE))?,
        _ => RunConfig::default(),
    };
    cfg.apply_overrides(&common.set)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, refusing to touch a non-empty one unless `force`.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| GlitrError::io(dir, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(GlitrError::RunExists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| GlitrError::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| GlitrError::io(dir, e))
}

fn start_run(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    prepare_run_dir(out, force)?;
    cfg.save(&out.join(CONFIG_FILE))
}

pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    start_run(cfg, out, force)?;
    let (train, val) = write_dataset(out, cfg.n_train, cfg.n_val, &cfg.clip_spec(), cfg.data_seed)?;
    eprintln!("wrote {} train and {} val clips to {}", train.len(), val.len(), out.display());
    Ok(())
}

/// Materializes both splits, checking they match the configured clip spec.
pub fn load_clips(cfg: &RunConfig, data: &Path) -> Result<(Vec<VideoClip>, Vec<VideoClip>)> {
    let mut out = Vec::with_capacity(2);
    for name in ["train.jsonl", "val.jsonl"] {
        let path = data.join(name);
        let manifest = load_manifest(&path)?;
        if manifest.spec != cfg.clip_spec() {
            return Err(GlitrError::Manifest {
                path,
                reason: "clip spec differs from the configuration".into(),
            });
        }
        out.push(manifest.clips()?);
    }
    let val = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, val))
}

fn options(cfg: &RunConfig, epochs: usize, rates: crate::optim::GroupRates, warmup: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: cfg.batch_size,
        rates,
        weight_decay: cfg.weight_decay,
        locator_warmup_epochs: warmup,
        seed: cfg.seed,
    }
}

/// Prints one line per finished epoch with mean losses.
struct Progress {
    label: &'static str,
    epoch: usize,
    sum: crate::losses::LossBreakdown,
    steps: usize,
}

impl Progress {
    fn new(label: &'static str) -> Self {
        Self {
            label,
            epoch: 0,
            sum: Default::default(),
            steps: 0,
        }
    }

    fn step(&mut self, row: &LogRow) {
        if row.epoch != self.epoch {
            self.flush();
            self.epoch = row.epoch;
        }
        self.sum.accumulate(&row.loss);
        self.steps += 1;
    }

    fn flush(&mut self) {
        if self.steps == 0 {
            return;
        }
        let m = self.sum.scaled(1.0 / self.steps as f64);
        eprintln!(
            "{} epoch {:>3}: total {:.4} cls {:.4} spatial {:.4} temporal {:.4} dist {:.4}",
            self.label,
            self.epoch + 1,
            m.total,
            m.cls,
            m.spatial,
            m.temporal,
            m.dist
        );
        self.sum = Default::default();
        self.steps = 0;
    }
}

fn write_log(out: &Path, rows: &[LogRow]) -> Result<()> {
    let mut text = format!("{LOG_HEADER}\n");
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    report::write_text(&out.join("train_log.csv"), &text)
}

fn write_curve(path: &Path, acc: &[f64]) -> Result<()> {
    let mut text = String::from("t,accuracy\n");
    for (t, a) in acc.iter().enumerate() {
        text.push_str(&format!("{},{}\n", t + 1, a));
    }
    report::write_text(path, &text)
}

pub fn load_oracle(cfg: &RunConfig, run: &Path) -> Result<OfflineOracle<f32>> {
    let mut oracle = OfflineOracle::new(&cfg.encoder_config(), &cfg.geometry(), cfg.seed)?;
    checkpoint::load_into(&mut oracle.params, &run.join(ORACLE_CKPT))?;
    Ok(oracle)
}

pub fn load_teacher(cfg: &RunConfig, run: &Path) -> Result<TeacherModel<f32>> {
    let mut teacher = TeacherModel::new(&cfg.encoder_config(), &cfg.geometry(), cfg.seed)?;
    checkpoint::load_into(&mut teacher.net.params, &run.join(TEACHER_CKPT))?;
    Ok(teacher)
}

pub fn load_student(cfg: &RunConfig, run: &Path) -> Result<GliTrModel<f32>> {
    let shell = TeacherModel::new(&cfg.encoder_config(), &cfg.geometry(), cfg.seed)?;
    let mut student = GliTrModel::from_teacher(&shell);
    checkpoint::load_into(&mut student.net.params, &run.join(STUDENT_CKPT))?;
    Ok(student)
}

pub fn train_oracle(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> Result<()> {
    let (train_clips, val_clips) = load_clips(cfg, data)?;
    start_run(cfg, out, force)?;
    let mut oracle = OfflineOracle::new(&cfg.encoder_config(), &cfg.geometry(), cfg.seed)?;
    let opts = options(cfg, cfg.oracle_epochs, crate::optim::GroupRates::uniform(cfg.oracle_lr), 0);
    let mut progress = Progress::new("oracle");
    let rows = train::train_oracle(&mut oracle, &train_clips, &opts, |r| progress.step(r))?;
    progress.flush();
    write_log(out, &rows)?;
    checkpoint::save(&oracle.params, &out.join(ORACLE_CKPT))?;
    let acc = train::oracle_accuracy(&oracle, &val_clips)?;
    report::write_text(&out.join("accuracy.csv"), &format!("split,accuracy\nval,{acc}\n"))?;
    eprintln!("oracle val accuracy {acc:.4}");
    Ok(())
}

pub fn train_teacher(cfg: &RunConfig, data: &Path, oracle_run: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let weights = cfg.teacher_weights()?;
    let (train_clips, val_clips) = load_clips(cfg, data)?;
    let oracle_logits = if weights.dist != 0.0 {
        let run = oracle_run.ok_or_else(|| GlitrError::Missing("--oracle run for the dist loss term".into()))?;
        let oracle = load_oracle(cfg, run)?;
        Some(train::oracle_logits(&oracle, &train_clips)?)
    } else {
        None
    };
    start_run(cfg, out, force)?;
    let mut teacher = TeacherModel::new(&cfg.encoder_config(), &cfg.geometry(), cfg.seed)?;
    let opts = options(cfg, cfg.teacher_epochs, cfg.teacher_rates(), cfg.teacher_locator_warmup);
    let mut progress = Progress::new("teacher");
    let rows = train::train_teacher(
        &mut teacher,
        &train_clips,
        oracle_logits.as_deref(),
        &weights,
        &opts,
        |r| progress.step(r),
    )?;
    progress.flush();
    write_log(out, &rows)?;
    checkpoint::save(&teacher.net.params, &out.join(TEACHER_CKPT))?;
    let acc = train::teacher_accuracy(&teacher, &val_clips)?;
    write_curve(&out.join("accuracy.csv"), &acc)?;
    eprintln!("teacher val accuracy at t=T {:.4}", acc.last().copied().unwrap_or(0.0));
    Ok(())
}

/// Per-step validation accuracy of the student's own policy.
pub fn student_accuracy(student: &GliTrModel<f32>, clips: &[VideoClip]) -> Result<Vec<f64>> {
    let preds: Vec<Vec<usize>> = clips
        .par_iter()
        .map(|c| glitr_rollout(student, &c.frames).map(|t| t.predictions()))
        .collect::<Result<_>>()?;
    let t_len = preds.first().map_or(0, Vec::len);
    let n = clips.len().max(1) as f64;
    Ok((0..t_len)
        .map(|t| preds.iter().zip(clips).filter(|(p, c)| p[t] == c.label).count() as f64 / n)
        .collect())
}

pub fn train_student(cfg: &RunConfig, data: &Path, teacher_run: &Path, out: &Path, force: bool) -> Result<()> {
    let weights = cfg.student_weights()?;
    let (train_clips, val_clips) = load_clips(cfg, data)?;
    let teacher = load_teacher(cfg, teacher_run)?;
    start_run(cfg, out, force)?;
    let targets = train::precompute_targets(&teacher, &train_clips)?;
    let mut student = GliTrModel::from_teacher(&teacher);
    let opts = options(cfg, cfg.student_epochs, cfg.student_rates(), 0);
    let mut progress = Progress::new("student");
    let rows = train::train_student(&mut student, &train_clips, &targets, &weights, &opts, |r| progress.step(r))?;
    progress.flush();
    write_log(out, &rows)?;
    checkpoint::save(&student.net.params, &out.join(STUDENT_CKPT))?;
    let acc = student_accuracy(&student, &val_clips)?;
    write_curve(&out.join("accuracy.csv"), &acc)?;
    eprintln!("student val accuracy at t=T {:.4}", acc.last().copied().unwrap_or(0.0));
    Ok(())
}

fn run_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().replace(',', "_"))
        .unwrap_or_else(|| "run".into())
}

pub fn eval_strategies(
    cfg: &RunConfig,
    data: &Path,
    student_run: &Path,
    teacher_run: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<()> {
    let registry = StrategyRegistry::default();
    let geometry = cfg.geometry();
    let strategies = cfg
        .strategy_names()
        .iter()
        .map(|n| registry.create(n, &geometry))
        .collect::<Result<Vec<_>>>()?;
    if strategies.is_empty() {
        return Err(GlitrError::Config("no strategies requested".into()));
    }
    let seeds = cfg.eval_seed_values();
    let (_, val_clips) = load_clips(cfg, data)?;
    let student = load_student(cfg, student_run)?;
    let targets: Option<Vec<TeacherTargets<f32>>> = if strategies.iter().any(|s| s.needs_teacher()) {
        let run = teacher_run.ok_or_else(|| GlitrError::Missing("--teacher run for the teacher strategy".into()))?;
        let teacher = load_teacher(cfg, run)?;
        Some(train::precompute_targets(&teacher, &val_clips)?)
    } else {
        None
    };
    start_run(cfg, out, force)?;
    let clips: Vec<EvalClip<'_, f32>> = val_clips
        .iter()
        .enumerate()
        .map(|(i, c)| EvalClip {
            frames: &c.frames,
            label: c.label,
            teacher: targets.as_ref().map(|t| t[i].locations.as_slice()),
        })
        .collect();
    let mut curves = Vec::with_capacity(strategies.len());
    for s in &strategies {
        let c = evaluate_strategy(&student, &clips, s.as_ref(), &seeds)?;
        eprintln!(
            "{:<10} accuracy at t=T {:.4} (std {:.4})",
            c.name,
            c.mean.last().copied().unwrap_or(0.0),
            c.std.last().copied().unwrap_or(0.0)
        );
        curves.push(c);
    }
    report::write_text(&out.join("strategies_raw.csv"), &report::raw_curves_csv(&curves))?;
    let table = MetricsTable::from_curves(&run_id(student_run), &curves);
    report::write_text(&out.join("metrics.csv"), &table.to_csv())?;
    report::write_text(&out.join("accuracy_curve.svg"), &report::accuracy_curve_svg(&table)?)?;

    let tracks: Vec<Vec<GlimpseLocation>> = val_clips
        .par_iter()
        .map(|c| glitr_rollout(&student, &c.frames).map(|t| t.locations))
        .collect::<Result<_>>()?;
    let mut loc_csv = String::from("clip,t,y,x\n");
    for (i, track) in tracks.iter().enumerate() {
        for (t, l) in track.iter().enumerate() {
            loc_csv.push_str(&format!("{},{},{},{}\n", i, t + 1, l.y, l.x));
        }
    }
    report::write_text(&out.join("glitr_locations.csv"), &loc_csv)?;
    let hist = report::location_histogram(&tracks, cfg.hist_bins)?;
    report::write_text(&out.join("location_histogram.csv"), &hist.to_csv())?;
    report::write_text(&out.join("location_histogram.svg"), &hist.to_svg())?;
    Ok(())
}

pub fn eval_early_exit(cfg: &RunConfig, data: &Path, student_run: &Path, out: &Path, force: bool) -> Result<()> {
    let gammas = cfg.gamma_values()?;
    let (_, val_clips) = load_clips(cfg, data)?;
    let student = load_student(cfg, student_run)?;
    start_run(cfg, out, force)?;
    let clips: Vec<EvalClip<'_, f32>> = val_clips
        .iter()
        .map(|c| EvalClip {
            frames: &c.frames,
            label: c.label,
            teacher: None,
        })
        .collect();
    let rows = early_exit_sweep(&student, &clips, &gammas)?;
    let full = student_accuracy(&student, &val_clips)?;
    let full_last = full.last().copied().unwrap_or(0.0);
    for r in &rows {
        eprintln!("gamma {:.2}: mean exit step {:.3}, accuracy {:.4}", r.gamma, r.mean_t_stop, r.accuracy);
    }
    report::write_text(&out.join("early_exit.csv"), &report::early_exit_csv(&rows, full_last))?;
    report::write_text(&out.join("early_exit.svg"), &report::early_exit_svg(&rows, cfg.frames)?)?;
    Ok(())
}
