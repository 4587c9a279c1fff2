//! Tables and plot data derived from the metrics CSV and training logs.
//!
//! Reports never train anything: every number comes from files already on disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::distill::{read_log_csv, LogRow, LossVariant};
use crate::downstream::Protocol;
use crate::io::write_atomic;
use crate::models::Family;

use super::metrics::MetricsRow;
use super::HarnessError;

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Absent for a single seed.
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Some(Stat { mean, std, n })
    }

    fn markdown(stat: Option<Stat>) -> String {
        match stat {
            None => "-".into(),
            Some(Stat { mean, std: None, .. }) => format!("{:.1}", 100.0 * mean),
            Some(Stat { mean, std: Some(s), .. }) => format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub backbone: String,
    pub interval: usize,
    pub loss_variant: String,
    pub linear_probe: Option<Stat>,
    pub fine_tune: Option<Stat>,
    pub supervised: Option<Stat>,
    /// `fine_tune.mean − supervised.mean`
    pub improvement: Option<f64>,
}

fn family_rank(name: &str) -> usize {
    Family::ALL.iter().position(|f| f.name() == name).unwrap_or(Family::ALL.len())
}

fn loss_rank(name: &str) -> usize {
    LossVariant::ALL.iter().position(|l| l.name() == name).unwrap_or(LossVariant::ALL.len())
}

type Key = (usize, String, usize, usize, String);

fn aggregate<'a>(rows: impl Iterator<Item = &'a MetricsRow>) -> Vec<TableRow> {
    let mut groups: BTreeMap<Key, BTreeMap<String, Vec<(u64, f64)>>> = BTreeMap::new();
    for r in rows {
        let key = (family_rank(&r.backbone), r.backbone.clone(), r.interval, loss_rank(&r.loss_variant), r.loss_variant.clone());
        groups.entry(key).or_default().entry(r.protocol.clone()).or_default().push((r.seed, r.macro_precision));
    }
    groups
        .into_iter()
        .map(|((_, backbone, interval, _, loss_variant), by_protocol)| {
            let stat = |p: Protocol| {
                by_protocol.get(p.name()).and_then(|v| {
                    let mut v = v.clone();
                    v.sort_by_key(|(seed, _)| *seed);
                    Stat::of(&v.iter().map(|(_, x)| *x).collect::<Vec<_>>())
                })
            };
            let (fine_tune, supervised) = (stat(Protocol::FineTune), stat(Protocol::FullSupervised));
            TableRow {
                backbone,
                interval,
                loss_variant,
                linear_probe: stat(Protocol::LinearProbe),
                improvement: fine_tune.zip(supervised).map(|(f, s)| f.mean - s.mean),
                fine_tune,
                supervised,
            }
        })
        .collect()
}

/// Backbone × interval rows for the primary loss (cosine when present).
pub fn table1(rows: &[MetricsRow]) -> Vec<TableRow> {
    let primary = if rows.iter().any(|r| r.loss_variant == LossVariant::Cosine.name()) {
        LossVariant::Cosine.name().to_string()
    } else {
        rows.first().map(|r| r.loss_variant.clone()).unwrap_or_default()
    };
    aggregate(rows.iter().filter(|r| r.loss_variant == primary))
}

/// Backbone × loss rows (per interval).
pub fn table2(rows: &[MetricsRow]) -> Vec<TableRow> {
    aggregate(rows.iter())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn table_csv(rows: &[TableRow]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| HarnessError::Io(e.to_string());
    w.write_record([
        "backbone",
        "interval",
        "loss_variant",
        "linear_probe",
        "linear_probe_std",
        "fine_tune",
        "fine_tune_std",
        "supervised",
        "supervised_std",
        "improvement",
        "n_seeds",
    ])
    .map_err(to_err)?;
    for r in rows {
        let n = [r.linear_probe, r.fine_tune, r.supervised].iter().flatten().map(|s| s.n).max().unwrap_or(0);
        w.write_record([
            r.backbone.clone(),
            r.interval.to_string(),
            r.loss_variant.clone(),
            opt(r.linear_probe.map(|s| s.mean)),
            opt(r.linear_probe.and_then(|s| s.std)),
            opt(r.fine_tune.map(|s| s.mean)),
            opt(r.fine_tune.and_then(|s| s.std)),
            opt(r.supervised.map(|s| s.mean)),
            opt(r.supervised.and_then(|s| s.std)),
            opt(r.improvement),
            n.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))
}

fn table_markdown(title: &str, rows: &[TableRow], with_loss: bool) -> String {
    let mut out = format!("## {title}\n\nMacro precision (%), mean ± std over seeds.\n\n");
    let loss_col = if with_loss { " Loss |" } else { "" };
    let loss_rule = if with_loss { "---|" } else { "" };
    let _ = writeln!(out, "| Backbone | Interval |{loss_col} Linear probe | Fine-tune | Supervised | Improvement |");
    let _ = writeln!(out, "|---|---|{loss_rule}---|---|---|---|");
    for r in rows {
        let loss = if with_loss { format!(" {} |", r.loss_variant) } else { String::new() };
        let _ = writeln!(
            out,
            "| {} | {} |{loss} {} | {} | {} | {} |",
            r.backbone,
            r.interval,
            Stat::markdown(r.linear_probe),
            Stat::markdown(r.fine_tune),
            Stat::markdown(r.supervised),
            r.improvement.map(|x| format!("{:+.1}", 100.0 * x)).unwrap_or_else(|| "-".into()),
        );
    }
    out
}

/// Renders loss curves as a self-contained SVG line chart.
pub fn loss_curves_svg(curves: &[(String, Vec<LogRow>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
    let points = curves.iter().flat_map(|(_, log)| log.iter());
    let (max_step, max_loss) = points.fold((1usize, 0.0f64), |(s, l), r| (s.max(r.step), if r.loss.is_finite() { l.max(r.loss) } else { l }));
    let max_loss = if max_loss > 0.0 { max_loss } else { 1.0 };
    let x = |step: usize| PAD + (W - 2.0 * PAD) * step as f64 / max_step as f64;
    let y = |loss: f64| H - PAD - (H - 2.0 * PAD) * loss / max_loss;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\">step (max {max_step})</text>\n\
         <text x=\"12\" y=\"{PAD}\" font-size=\"12\">loss (max {max_loss:.4})</text>\n",
        b = H - PAD,
        r = W - PAD,
        cx = W / 2.0,
        ty = H - 15.0,
    );
    for (i, (name, log)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = log
            .iter()
            .filter(|r| r.loss.is_finite())
            .map(|r| format!("{:.2},{:.2}", x(r.step), y(r.loss)))
            .collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>",
            W - PAD - 180.0,
            PAD + 14.0 * i as f64,
            xml_escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads every pretraining log CSV in `dir`, sorted by file name.
pub fn collect_logs(dir: &Path) -> Result<Vec<(String, Vec<LogRow>)>, HarnessError> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(Vec::new());
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            read_log_csv(&p).map(|log| (name, log)).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Files written by [`write_report`].
pub const REPORT_FILES: [&str; 6] = ["table1.md", "table1.csv", "table2.md", "table2.csv", "loss_curves.csv", "loss_curves.svg"];

pub fn write_report(rows: &[MetricsRow], logs: &[(String, Vec<LogRow>)], out: &Path) -> Result<(), HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyMetrics);
    }
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| HarnessError::Io(format!("{}: {e}", p.display()))
    };
    let put = |name: &str, bytes: &[u8]| {
        let path = out.join(name);
        write_atomic(&path, bytes).map_err(io(&path))
    };
    let t1 = table1(rows);
    put("table1.md", table_markdown("Backbone and interval under three protocols", &t1, false).as_bytes())?;
    put("table1.csv", &table_csv(&t1)?)?;
    let t2 = table2(rows);
    put("table2.md", table_markdown("Distillation loss comparison", &t2, true).as_bytes())?;
    put("table2.csv", &table_csv(&t2)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "step", "loss", "momentum", "embed_std"]).map_err(|e| HarnessError::Io(e.to_string()))?;
    for (name, log) in logs {
        for r in log {
            w.write_record([name.clone(), r.step.to_string(), r.loss.to_string(), r.momentum.to_string(), r.embed_std.to_string()])
                .map_err(|e| HarnessError::Io(e.to_string()))?;
        }
    }
    put("loss_curves.csv", &w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?)?;
    put("loss_curves.svg", loss_curves_svg(logs).as_bytes())?;
    Ok(())
}
