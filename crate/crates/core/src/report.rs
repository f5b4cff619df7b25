//! Pixel budgets, metrics tables and SVG figures.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{GlitrError, Result};
use crate::glimpse::GlimpseLocation;
use crate::strategies::{EarlyExitSummary, StrategyCurves};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBudget {
    pub glimpse_g: usize,
    pub frames_t: usize,
    pub pixels_total: usize,
    pub area_fraction: f64,
}

/// Pixels observed by `T` glimpses of `g x g` on `H x W` frames.
pub fn pixels_sensed(g: usize, t: usize, h: usize, w: usize) -> Result<PixelBudget> {
    if g == 0 || g > h.min(w) {
        return Err(GlitrError::Geometry(format!("glimpse {g} does not fit a {h}x{w} frame")));
    }
    Ok(PixelBudget {
        glimpse_g: g,
        frames_t: t,
        pixels_total: g * g * t,
        area_fraction: (g * g) as f64 / (h * w) as f64,
    })
}

/// Budget table: the glimpse model and, for reference, full frames.
pub fn budget_table(g: usize, t: usize, h: usize, w: usize) -> Result<String> {
    let glimpse = pixels_sensed(g, t, h, w)?;
    let full = h * w * t;
    let mut out = String::from("model,glimpse,frames,pixels,area_fraction\n");
    writeln!(
        out,
        "glimpse,{g}x{g},{t},{},{:.4}",
        glimpse.pixels_total, glimpse.area_fraction
    )
    .expect("string write");
    writeln!(out, "full_frame,{h}x{w},{t},{full},1.0000").expect("string write");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub strategy: String,
    /// 1-based step.
    pub t: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "run_id,strategy,t,accuracy_mean,accuracy_std,seeds";
pub const RAW_HEADER: &str = "strategy,seed,t,accuracy";

impl MetricsTable {
    pub fn from_curves(run_id: &str, curves: &[StrategyCurves]) -> Self {
        let mut rows = Vec::new();
        for c in curves {
            for (i, (&m, &s)) in c.mean.iter().zip(&c.std).enumerate() {
                rows.push(MetricsRow {
                    run_id: run_id.to_string(),
                    strategy: c.name.clone(),
                    t: i + 1,
                    accuracy_mean: m,
                    accuracy_std: s,
                    seeds: c.seeds.len(),
                });
            }
        }
        Self { rows }
    }

    /// Strategies in first-appearance order.
    pub fn strategies(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.strategy) {
                out.push(r.strategy.clone());
            }
        }
        out
    }

    pub fn series(&self, strategy: &str) -> Vec<&MetricsRow> {
        let mut rows: Vec<&MetricsRow> = self.rows.iter().filter(|r| r.strategy == strategy).collect();
        rows.sort_by_key(|r| r.t);
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.run_id, r.strategy, r.t, r.accuracy_mean, r.accuracy_std, r.seeds
            )
            .expect("string write");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_HEADER) {
            return Err(GlitrError::Report(format!("metrics header must be {METRICS_HEADER:?}")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || GlitrError::Report(format!("metrics line {}: {line:?}", n + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            rows.push(MetricsRow {
                run_id: f[0].to_string(),
                strategy: f[1].to_string(),
                t: f[2].parse().map_err(|_| bad())?,
                accuracy_mean: f[3].parse().map_err(|_| bad())?,
                accuracy_std: f[4].parse().map_err(|_| bad())?,
                seeds: f[5].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows })
    }
}

pub fn raw_curves_csv(curves: &[StrategyCurves]) -> String {
    let mut out = format!("{RAW_HEADER}\n");
    for c in curves {
        for (seed, row) in c.seeds.iter().zip(&c.per_seed) {
            for (i, acc) in row.iter().enumerate() {
                writeln!(out, "{},{},{},{}", c.name, seed, i + 1, acc).expect("string write");
            }
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

struct Plot {
    width: f64,
    height: f64,
    margin: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Plot {
    fn x(&self, v: f64) -> f64 {
        let (a, b) = self.x_range;
        let span = if b > a { b - a } else { 1.0 };
        self.margin + (v - a) / span * (self.width - 2.0 * self.margin)
    }

    fn y(&self, v: f64) -> f64 {
        let (a, b) = self.y_range;
        let span = if b > a { b - a } else { 1.0 };
        self.height - self.margin - (v - a) / span * (self.height - 2.0 * self.margin)
    }

    fn open(&self, title: &str, x_label: &str, y_label: &str) -> String {
        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
            w = self.width,
            h = self.height
        )
        .expect("string write");
        writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
        writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            self.width / 2.0,
            escape(title)
        )
        .expect("string write");
        let (x0, x1) = (self.margin, self.width - self.margin);
        let (y0, y1) = (self.height - self.margin, self.margin);
        writeln!(
            s,
            r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#
        )
        .expect("string write");
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            self.width / 2.0,
            self.height - 10.0,
            escape(x_label)
        )
        .expect("string write");
        writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
            self.height / 2.0,
            self.height / 2.0,
            escape(y_label)
        )
        .expect("string write");
        for i in 0..=4 {
            let v = self.y_range.0 + (self.y_range.1 - self.y_range.0) * i as f64 / 4.0;
            writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{:.2}</text>"#,
                self.margin - 4.0,
                self.y(v) + 3.0,
                v
            )
            .expect("string write");
        }
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Accuracy over steps, one line per strategy with a mean +/- 5 std band.
/// Each line carries its exact values in `data-mean` / `data-std`.
pub fn accuracy_curve_svg(table: &MetricsTable) -> Result<String> {
    let names = table.strategies();
    if names.is_empty() {
        return Err(GlitrError::Report("metrics table is empty".into()));
    }
    let t_max = table.rows.iter().map(|r| r.t).max().unwrap_or(1);
    let plot = Plot {
        width: 640.0,
        height: 420.0,
        margin: 50.0,
        x_range: (1.0, t_max.max(2) as f64),
        y_range: (0.0, 1.0),
    };
    let mut s = plot.open("Online accuracy by glimpse strategy", "t", "accuracy");
    for (k, name) in names.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let rows = table.series(name);
        let mean: Vec<f64> = rows.iter().map(|r| r.accuracy_mean).collect();
        let std: Vec<f64> = rows.iter().map(|r| r.accuracy_std).collect();
        let upper: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (plot.x(r.t as f64), plot.y((r.accuracy_mean + 5.0 * r.accuracy_std).min(1.0))))
            .collect();
        let lower: Vec<(f64, f64)> = rows
            .iter()
            .rev()
            .map(|r| (plot.x(r.t as f64), plot.y((r.accuracy_mean - 5.0 * r.accuracy_std).max(0.0))))
            .collect();
        let band: Vec<String> = upper.iter().chain(&lower).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        writeln!(
            s,
            r#"<polygon class="band" data-strategy="{}" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            escape(name),
            band.join(" ")
        )
        .expect("string write");
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", plot.x(r.t as f64), plot.y(r.accuracy_mean)))
            .collect();
        writeln!(
            s,
            r#"<polyline class="curve" data-strategy="{}" data-mean="{}" data-std="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(name),
            join(&mean),
            join(&std),
            pts.join(" ")
        )
        .expect("string write");
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            plot.width - plot.margin + 4.0 - 90.0,
            plot.margin + 14.0 * k as f64,
            escape(name)
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Per-step 2-D counts of glimpse centers over a `bins x bins` grid on `[-1,1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationHistogram {
    pub bins: usize,
    /// `[t][row * bins + col]`, rows along y.
    pub counts: Vec<Vec<usize>>,
}

fn bin_of(v: f64, bins: usize) -> usize {
    let b = ((v + 1.0) / 2.0 * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

/// Histogram of `tracks[clip][t]`; every track must have the same length.
pub fn location_histogram(tracks: &[Vec<GlimpseLocation>], bins: usize) -> Result<LocationHistogram> {
    if bins == 0 {
        return Err(GlitrError::Report("histogram needs at least one bin".into()));
    }
    let t_len = tracks.first().map_or(0, Vec::len);
    if tracks.iter().any(|t| t.len() != t_len) {
        return Err(GlitrError::Report("location tracks differ in length".into()));
    }
    let mut counts = vec![vec![0; bins * bins]; t_len];
    for track in tracks {
        for (t, loc) in track.iter().enumerate() {
            counts[t][bin_of(loc.y, bins) * bins + bin_of(loc.x, bins)] += 1;
        }
    }
    Ok(LocationHistogram { bins, counts })
}

impl LocationHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,row,col,count\n");
        for (t, c) in self.counts.iter().enumerate() {
            for (i, &n) in c.iter().enumerate() {
                writeln!(out, "{},{},{},{}", t + 1, i / self.bins, i % self.bins, n).expect("string write");
            }
        }
        out
    }

    /// One heat map per step, side by side.
    pub fn to_svg(&self) -> String {
        let cell = 12.0;
        let side = cell * self.bins as f64;
        let gap = 16.0;
        let width = (side + gap) * self.counts.len().max(1) as f64 + gap;
        let height = side + 50.0;
        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
        )
        .expect("string write");
        writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
        for (t, c) in self.counts.iter().enumerate() {
            let total = c.iter().sum::<usize>().max(1) as f64;
            let x0 = gap + t as f64 * (side + gap);
            writeln!(
                s,
                r#"<text x="{}" y="16" text-anchor="middle" font-size="11">t={}</text>"#,
                x0 + side / 2.0,
                t + 1
            )
            .expect("string write");
            for (i, &n) in c.iter().enumerate() {
                let shade = 255.0 * (1.0 - n as f64 / total);
                writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="rgb({s},{s},255)" data-count="{n}"/>"#,
                    x0 + (i % self.bins) as f64 * cell,
                    24.0 + (i / self.bins) as f64 * cell,
                    s = shade.round() as u8
                )
                .expect("string write");
            }
            writeln!(
                s,
                r#"<rect x="{x0}" y="24" width="{side}" height="{side}" fill="none" stroke="black"/>"#
            )
            .expect("string write");
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Mean location at each step.
pub fn mean_locations(tracks: &[Vec<GlimpseLocation>]) -> Vec<GlimpseLocation> {
    let t_len = tracks.first().map_or(0, Vec::len);
    let n = tracks.len().max(1) as f64;
    (0..t_len)
        .map(|t| GlimpseLocation {
            y: tracks.iter().map(|tr| tr[t].y).sum::<f64>() / n,
            x: tracks.iter().map(|tr| tr[t].x).sum::<f64>() / n,
        })
        .collect()
}

pub const EARLY_EXIT_HEADER: &str = "gamma,mean_t_stop,accuracy";

pub fn early_exit_csv(rows: &[EarlyExitSummary], full_accuracy: f64) -> String {
    let mut out = format!("{EARLY_EXIT_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.gamma, r.mean_t_stop, r.accuracy).expect("string write");
    }
    writeln!(out, "full,,{full_accuracy}").expect("string write");
    out
}

/// Accuracy against mean stopping step over the threshold sweep.
pub fn early_exit_svg(rows: &[EarlyExitSummary], t_max: usize) -> Result<String> {
    if rows.is_empty() {
        return Err(GlitrError::Report("no early-exit results".into()));
    }
    let plot = Plot {
        width: 520.0,
        height: 400.0,
        margin: 50.0,
        x_range: (1.0, t_max.max(2) as f64),
        y_range: (0.0, 1.0),
    };
    let mut s = plot.open("Early exit", "mean exit step", "accuracy");
    let pts: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", plot.x(r.mean_t_stop), plot.y(r.accuracy)))
        .collect();
    writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
        pts.join(" "),
        PALETTE[0]
    )
    .expect("string write");
    for r in rows {
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" data-gamma="{}"/>"#,
            plot.x(r.mean_t_stop),
            plot.y(r.accuracy),
            PALETTE[0],
            r.gamma
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GlitrError::io(path, e))
}
