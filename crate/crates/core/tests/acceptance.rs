//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 are the fixture suites shared with the ordinary tests.
//! Criteria 6-9 drive the CLI end to end on the synthetic benchmark with the
//! desk-scale model below. Set `GLITR_ACCEPTANCE_DIR` to keep the outputs and
//! `GLITR_ACCEPTANCE_CONFIG` to append keys to the config (smoke runs only;
//! the verdict then no longer covers the benchmark).

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use glitr::cli::run;
use glitr::report::MetricsTable;

/// Model size and schedule for a single-core run. Data settings are the
/// config defaults: 800/200 clips, 8 classes, 8 frames, 24px glimpses of 64px frames.
const DESK: &str = "\
embed_dim = 32
spatial_depth = 2
spatial_heads = 4
temporal_depth = 1
temporal_heads = 4
mlp_ratio = 2
oracle_epochs = 20
teacher_epochs = 20
student_epochs = 40
";

const VARIANTS: [&str; 4] = ["cls", "cls,spatial", "cls,temporal", "cls,spatial,temporal"];
const STUDENT_SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    n: usize,
    name: &'static str,
    ok: bool,
    detail: String,
}

fn suite(n: usize, name: &'static str, checks: Vec<Check>) -> Outcome {
    let bad: Vec<String> = checks.iter().filter(|c| !c.ok).map(|c| format!("{}: {}", c.name, c.detail)).collect();
    Outcome {
        n,
        name,
        ok: bad.is_empty(),
        detail: if bad.is_empty() {
            format!("{} checks", checks.len())
        } else {
            bad.join("; ")
        },
    }
}

fn glitr(args: &[&str]) -> Result<(), String> {
    let mut all = vec!["glitr".to_string()];
    all.extend(args.iter().map(|s| s.to_string()));
    match run(all) {
        0 => Ok(()),
        code => Err(format!("`glitr {}` exited with {code}", args.join(" "))),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect())
}

/// Validation accuracy at the last step from a run's `accuracy.csv`.
fn final_accuracy(dir: &Path) -> Result<f64, String> {
    let rows = csv_rows(&dir.join("accuracy.csv"))?;
    let last = rows.last().ok_or("empty accuracy.csv")?;
    last[1].parse().map_err(|e| format!("{e}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pts(v: f64) -> f64 {
    100.0 * v
}

struct Runs {
    root: PathBuf,
}

impl Runs {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn student(&self, seed: u64, loss: &str) -> PathBuf {
        self.path(&format!("student_s{seed}_{}", loss.replace(',', "+")))
    }

    fn prepare(&self) -> Result<(), String> {
        let cfg = self.path("desk.txt");
        let mut text = DESK.to_string();
        if let Some(extra) = std::env::var_os("GLITR_ACCEPTANCE_CONFIG") {
            text.push_str(&fs::read_to_string(&extra).map_err(|e| e.to_string())?);
        }
        fs::write(&cfg, text).map_err(|e| e.to_string())?;
        let (data, oracle, teacher) = (self.path("data"), self.path("oracle"), self.path("teacher"));
        glitr(&["gen-data", "--out", s(&data), "--config", s(&cfg), "--force"])?;
        glitr(&["train-oracle", "--data", s(&data), "--out", s(&oracle), "--force"])?;
        glitr(&["train-teacher", "--data", s(&data), "--oracle", s(&oracle), "--out", s(&teacher), "--force"])?;
        for seed in STUDENT_SEEDS {
            for loss in VARIANTS {
                let seed_kv = format!("seed={seed}");
                let out = self.student(seed, loss);
                glitr(&[
                    "train-student", "--data", s(&data), "--teacher", s(&teacher), "--out", s(&out), "--loss", loss,
                    "--set", &seed_kv, "--force",
                ])?;
            }
        }
        let student = self.student(1, "cls,spatial,temporal");
        glitr(&[
            "eval-strategies", "--data", s(&data), "--student", s(&student), "--teacher", s(&teacher), "--out",
            s(&self.path("eval")), "--force",
        ])?;
        glitr(&["eval-early-exit", "--data", s(&data), "--student", s(&student), "--out", s(&self.path("exit")), "--force"])
    }

    fn loss_ablation(&self) -> Result<Outcome, String> {
        let mut means = Vec::new();
        for loss in VARIANTS {
            let accs = STUDENT_SEEDS
                .iter()
                .map(|&seed| final_accuracy(&self.student(seed, loss)))
                .collect::<Result<Vec<_>, _>>()?;
            means.push(mean(&accs));
        }
        let (base, spatial, temporal, full) = (means[0], means[1], means[2], means[3]);
        let lo = base.min(full) - 0.02;
        let hi = base.max(full) + 0.02;
        let between = |v: f64| v >= lo && v <= hi;
        let ok = full - base >= 0.05 && between(spatial) && between(temporal);
        Ok(Outcome {
            n: 6,
            name: "consistency losses beat cross-entropy alone",
            ok,
            detail: format!(
                "t=T mean over {} seeds: cls {:.1}, +spatial {:.1}, +temporal {:.1}, +both {:.1} (gain {:+.1})",
                STUDENT_SEEDS.len(),
                pts(base),
                pts(spatial),
                pts(temporal),
                pts(full),
                pts(full - base)
            ),
        })
    }

    fn strategies(&self) -> Result<(Outcome, String), String> {
        let text = fs::read_to_string(self.path("eval/metrics.csv")).map_err(|e| e.to_string())?;
        let table = MetricsTable::from_csv(&text).map_err(|e| e.to_string())?;
        let last = |name: &str| -> Result<f64, String> {
            table.series(name).last().map(|r| r.accuracy_mean).ok_or(format!("no {name} rows"))
        };
        let (policy, uniform, teacher, center) = (last("glitr")?, last("uniform")?, last("teacher")?, last("center")?);
        let seeds = table.series("glitr").last().map_or(0, |r| r.seeds);
        let ok = policy - uniform >= 0.05 && teacher >= policy - 0.02;
        let outcome = Outcome {
            n: 7,
            name: "learned glimpses beat random ones",
            ok,
            detail: format!(
                "t=T over {seeds} seeds: glitr {:.1}, uniform {:.1}, teacher locations {:.1}",
                pts(policy),
                pts(uniform),
                pts(teacher)
            ),
        };
        let full = final_accuracy(&self.path("teacher"))?;
        let witness = format!(
            "full-frame teacher {:.1} vs center glimpses {:.1} at t=T ({:.1} points)",
            pts(full),
            pts(center),
            pts(full - center)
        );
        Ok((outcome, witness))
    }

    fn early_exit(&self) -> Result<Outcome, String> {
        let rows = csv_rows(&self.path("exit/early_exit.csv"))?;
        let (full_row, sweep) = rows.split_last().ok_or("empty early_exit.csv")?;
        let parse = |v: &str| v.parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
        let full = parse(&full_row[2])?;
        let mut stops = Vec::new();
        let mut at_09 = None;
        for r in sweep {
            let gamma = parse(&r[0])?;
            stops.push(parse(&r[1])?);
            if (gamma - 0.9).abs() < 1e-9 {
                at_09 = Some(parse(&r[2])?);
            }
        }
        let at_09 = at_09.ok_or("no gamma = 0.9 row")?;
        let monotone = stops.windows(2).all(|w| w[0] <= w[1]);
        Ok(Outcome {
            n: 8,
            name: "early exit",
            ok: monotone && (at_09 - full).abs() <= 0.02,
            detail: format!(
                "mean t_stop {} ({}), accuracy at 0.9 {:.1} vs full {:.1}",
                stops.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "),
                if monotone { "non-decreasing" } else { "NOT monotone" },
                pts(at_09),
                pts(full)
            ),
        })
    }

    /// Re-runs every command once more and byte-compares its CSV outputs.
    /// Oracle and teacher training are repeated at one epoch each, in pairs.
    fn determinism(&self) -> Result<Outcome, String> {
        let again = self.path("again");
        let (data, oracle, teacher) = (self.path("data"), self.path("oracle"), self.path("teacher"));
        let student = self.student(1, "cls,spatial,temporal");
        let mut pairs: Vec<(PathBuf, PathBuf)> = Vec::new();
        let mut same = |a: PathBuf, b: PathBuf| pairs.push((a, b));

        let data2 = again.join("data");
        glitr(&["gen-data", "--out", s(&data2), "--config", s(&self.path("desk.txt")), "--force"])?;
        for f in ["train.jsonl", "val.jsonl"] {
            same(data.join(f), data2.join(f));
        }
        for tag in ["a", "b"] {
            let o = again.join(format!("oracle_{tag}"));
            glitr(&["train-oracle", "--data", s(&data), "--out", s(&o), "--set", "oracle_epochs=1", "--force"])?;
            let t = again.join(format!("teacher_{tag}"));
            glitr(&[
                "train-teacher", "--data", s(&data), "--oracle", s(&oracle), "--out", s(&t), "--set", "teacher_epochs=1",
                "--force",
            ])?;
        }
        for (dir, ckpt) in [("oracle", "oracle.ckpt"), ("teacher", "teacher.ckpt")] {
            for f in ["train_log.csv", "accuracy.csv", ckpt] {
                same(again.join(format!("{dir}_a")).join(f), again.join(format!("{dir}_b")).join(f));
            }
        }
        let student2 = again.join("student");
        glitr(&[
            "train-student", "--data", s(&data), "--teacher", s(&teacher), "--out", s(&student2), "--loss",
            "cls,spatial,temporal", "--set", "seed=1", "--force",
        ])?;
        for f in ["train_log.csv", "accuracy.csv", "student.ckpt"] {
            same(student.join(f), student2.join(f));
        }
        let eval2 = again.join("eval");
        glitr(&[
            "eval-strategies", "--data", s(&data), "--student", s(&student), "--teacher", s(&teacher), "--out", s(&eval2),
            "--force",
        ])?;
        for f in ["metrics.csv", "strategies_raw.csv", "glitr_locations.csv", "location_histogram.csv"] {
            same(self.path("eval").join(f), eval2.join(f));
        }
        let exit2 = again.join("exit");
        glitr(&["eval-early-exit", "--data", s(&data), "--student", s(&student), "--out", s(&exit2), "--force"])?;
        same(self.path("exit/early_exit.csv"), exit2.join("early_exit.csv"));

        let mut differ = Vec::new();
        for (a, b) in &pairs {
            let x = fs::read(a).map_err(|e| format!("{}: {e}", a.display()))?;
            let y = fs::read(b).map_err(|e| format!("{}: {e}", b.display()))?;
            if x != y {
                differ.push(b.strip_prefix(&self.root).unwrap_or(b).display().to_string());
            }
        }
        Ok(Outcome {
            n: 9,
            name: "reruns are byte-identical",
            ok: differ.is_empty(),
            detail: if differ.is_empty() {
                format!("{} files compared", pairs.len())
            } else {
                format!("differ: {}", differ.join(", "))
            },
        })
    }
}

fn failed(n: usize, name: &'static str, err: String) -> Outcome {
    Outcome {
        n,
        name,
        ok: false,
        detail: err,
    }
}

fn main() {
    let start = Instant::now();
    let mut outcomes = vec![
        suite(1, "pixel accounting", pixel_accounting_suite()),
        suite(2, "gradients match finite differences", gradient_suite()),
        suite(3, "online contract", causality_suite()),
        suite(4, "gradient routing", routing_suite()),
        suite(5, "loss oracles", loss_oracle_suite()),
    ];

    let _tmp;
    let root = match std::env::var_os("GLITR_ACCEPTANCE_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => {
            _tmp = tempfile::tempdir().expect("temp dir");
            _tmp.path().to_path_buf()
        }
    };
    fs::create_dir_all(&root).expect("acceptance dir");
    let runs = Runs { root };
    let mut info = Vec::new();
    match runs.prepare() {
        Ok(()) => {
            outcomes.push(runs.loss_ablation().unwrap_or_else(|e| failed(6, "loss ablation", e)));
            match runs.strategies() {
                Ok((o, witness)) => {
                    outcomes.push(o);
                    info.push(witness);
                }
                Err(e) => outcomes.push(failed(7, "strategies", e)),
            }
            outcomes.push(runs.early_exit().unwrap_or_else(|e| failed(8, "early exit", e)));
            outcomes.push(runs.determinism().unwrap_or_else(|e| failed(9, "determinism", e)));
            if let (Ok(o), Ok(t)) = (
                fs::read_to_string(runs.path("oracle/accuracy.csv")),
                csv_rows(&runs.path("teacher/accuracy.csv")),
            ) {
                let oracle = o.lines().nth(1).and_then(|l| l.split(',').nth(1)).unwrap_or("?").to_string();
                let first = t.first().map_or("?".to_string(), |r| r[1].clone());
                info.push(format!("offline oracle {oracle} vs teacher at t=1 {first} (validation accuracy)"));
            }
        }
        Err(e) => {
            for (n, name) in [(6, "loss ablation"), (7, "strategies"), (8, "early exit"), (9, "determinism")] {
                outcomes.push(failed(n, name, e.clone()));
            }
        }
    }

    println!();
    for o in &outcomes {
        println!("{} {}. {}: {}", if o.ok { "PASS" } else { "FAIL" }, o.n, o.name, o.detail);
    }
    for line in &info {
        println!("info: {line}");
    }
    println!("elapsed {:.0}s", start.elapsed().as_secs_f64());
    if outcomes.iter().any(|o| !o.ok) {
        std::process::exit(1);
    }
}
