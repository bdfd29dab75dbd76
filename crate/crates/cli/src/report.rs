//! Aggregation of generation logs: per-run CSV tables, a cross-run summary and an SVG
//! plot of parent fitness against generation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ecae::evolution::{Fitness, GenerationRecord};
use log::warn;

use crate::{CliError, ReportArgs};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "fitness.svg";

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub name: String,
    pub records: Vec<GenerationRecord>,
}

impl Run {
    /// Highest parent fitness and the architecture that reached it.
    pub fn best(&self) -> Option<(Fitness, &str)> {
        self.records
            .iter()
            .max_by(|a, b| a.parent_psnr.cmp(&b.parent_psnr).then(b.generation.cmp(&a.generation)))
            .map(|r| (r.parent_psnr, r.arch.as_str()))
    }
}

/// `seed-3/log.jsonl` is named after its directory, anything else after its file stem.
fn run_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "log" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    if stem.is_empty() {
        "run".into()
    } else {
        stem
    }
}

/// Parses one log; malformed lines are skipped with a warning.
pub fn parse_log(name: String, text: &str, source: &Path) -> Run {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GenerationRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => warn!("{}:{}: skipping malformed record: {e}", source.display(), i + 1),
        }
    }
    Run { name, records }
}

pub fn load_runs(paths: &[PathBuf]) -> Result<Vec<Run>> {
    let mut used = BTreeSet::new();
    let mut runs = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = run_name(path);
        let mut name = base.clone();
        let mut k = 2;
        while !used.insert(name.clone()) {
            name = format!("{base}-{k}");
            k += 1;
        }
        let run = parse_log(name, &text, path);
        if run.records.is_empty() {
            warn!("{}: no generation records", path.display());
        }
        runs.push(run);
    }
    if runs.iter().all(|r| r.records.is_empty()) {
        return Err(CliError::runtime("data", "no generation records in any log").into());
    }
    Ok(runs)
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn run_csv(run: &Run) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["generation", "parent_psnr", "best_child_psnr", "replaced", "arch", "seconds"])?;
    for r in &run.records {
        w.write_record([
            r.generation.to_string(),
            r.parent_psnr.to_string(),
            r.best_child_psnr.to_string(),
            r.replaced.to_string(),
            r.arch.clone(),
            format!("{:.3}", r.seconds),
        ])?;
    }
    csv_string(w)
}

/// One row per run plus a `mean` row over the runs with a finite best fitness.
pub fn summary_csv(runs: &[Run]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "generations", "best_psnr", "best_arch"])?;
    let mut finite = Vec::new();
    for run in runs {
        let (best, arch) = match run.best() {
            Some((f, a)) => (f, a.to_string()),
            None => (Fitness::Invalid, String::new()),
        };
        if let Some(v) = best.psnr().filter(|v| v.is_finite()) {
            finite.push(v);
        }
        w.write_record([run.name.clone(), run.records.len().to_string(), best.to_string(), arch])?;
    }
    let mean = if finite.is_empty() {
        "invalid".to_string()
    } else {
        format!("{:.4}", finite.iter().sum::<f64>() / finite.len() as f64)
    };
    let gens = runs.iter().map(|r| r.records.len()).sum::<usize>() as f64 / runs.len().max(1) as f64;
    w.write_record(["mean".to_string(), format!("{gens:.1}"), mean, String::new()])?;
    csv_string(w)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_step(span: f64, ticks: f64) -> f64 {
    let raw = span / ticks;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

/// Line plot of parent PSNR per generation, one coloured series per run.
pub fn fitness_svg(runs: &[Run], width: u32, height: u32) -> String {
    let (w, h) = (f64::from(width.max(200)), f64::from(height.max(150)));
    let (left, right, top, bottom) = (60.0, 150.0, 20.0, 45.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let finite = |r: &GenerationRecord| r.parent_psnr.psnr().filter(|v| v.is_finite());
    let values: Vec<f64> = runs.iter().flat_map(|r| r.records.iter().filter_map(finite)).collect();
    let max_gen = runs
        .iter()
        .flat_map(|r| r.records.iter().map(|x| x.generation))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let step = nice_step(hi - lo, 5.0);
    lo = (lo / step).floor() * step;
    hi = (hi / step).ceil() * step;
    let x = |g: f64| left + pw * g / max_gen;
    let y = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let mut v = lo;
    while v <= hi + step * 1e-6 {
        let yy = y(v);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{yy:.1}\" x2=\"{:.1}\" y2=\"{yy:.1}\" stroke=\"#e0e0e0\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>",
            left + pw,
            left - 6.0,
            yy + 4.0
        );
        v += step;
    }
    let gstep = nice_step(max_gen, 6.0).max(1.0);
    let mut g = 0.0;
    while g <= max_gen + 1e-9 {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{g}</text>"#,
            x(g),
            top + ph + 16.0
        );
        g += gstep;
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">generation</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(14 {:.1}) rotate(-90)" text-anchor="middle">parent PSNR (dB)</text>"#,
        top + ph / 2.0
    );
    for (i, run) in runs.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        // Invalid or infinite fitness breaks the line.
        let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for r in &run.records {
            match finite(r) {
                Some(val) => segments.last_mut().expect("non-empty").push((x(r.generation as f64), y(val))),
                None => segments.push(Vec::new()),
            }
        }
        for seg in segments.iter().filter(|seg| !seg.is_empty()) {
            let pts: Vec<String> = seg.iter().map(|(a, b)| format!("{a:.1},{b:.1}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
        }
        let ly = top + 14.0 * i as f64 + 8.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            xml_escape(&run.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn run(args: &ReportArgs) -> Result<()> {
    let runs = load_runs(&args.logs)?;
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let write = |name: &str, body: String| -> Result<()> {
        let p = args.output.join(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    };
    for r in &runs {
        write(&format!("{}.csv", r.name), run_csv(r)?)?;
    }
    write(SUMMARY_FILE, summary_csv(&runs)?)?;
    write(PLOT_FILE, fitness_svg(&runs, args.plot_width, args.plot_height))?;
    for r in &runs {
        let (best, arch) = r.best().unwrap_or((Fitness::Invalid, ""));
        println!("run={} generations={} best_psnr={best} arch={arch}", r.name, r.records.len());
    }
    println!("runs={} dir={}", runs.len(), args.output.display());
    Ok(())
}
