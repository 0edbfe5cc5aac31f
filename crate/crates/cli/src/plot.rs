//! Static SVG charts for decile tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deepcox::metrics::{CalibrationRow, DiscriminationRow};
use serde::Serialize;

use crate::commands::Common;
use crate::output::{files_under, Manifest, Staging};
use crate::report::{parse_calibration, parse_discrimination};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 64.0;
const INNER: f64 = SIZE - 2.0 * MARGIN;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="28" text-anchor="middle" font-size="14">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A round upper limit for an axis covering `max`.
fn nice_max(max: f64) -> f64 {
    if max <= 0.0 {
        return 1.0;
    }
    let step = 10f64.powf(max.log10().floor());
    for m in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if m * step >= max {
            return m * step;
        }
    }
    10.0 * step
}

fn y_axis(s: &mut String, max: f64, label: &str, percent: bool) {
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>"#,
        MARGIN + INNER
    );
    for k in 0..=5 {
        let v = max * k as f64 / 5.0;
        let y = MARGIN + INNER - INNER * k as f64 / 5.0;
        let text = if percent { format!("{:.1}%", 100.0 * v) } else { format!("{v:.2}") };
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{MARGIN}" y2="{y:.2}" stroke="black"/>"#, MARGIN - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{text}</text>"#, MARGIN - 7.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        SIZE / 2.0,
        escape(label)
    );
}

/// Observed against mean predicted risk per decile, with whiskers of three
/// binomial standard errors around each point and the identity line.
pub fn calibration_svg(rows: &[CalibrationRow], title: &str) -> Result<String> {
    if rows.is_empty() {
        bail!("calibration table is empty");
    }
    let max = nice_max(
        rows.iter()
            .map(|r| r.observed.max(r.mean_predicted + 3.0 * r.binomial_se()))
            .fold(0.0, f64::max),
    );
    let px = |v: f64| MARGIN + INNER * v / max;
    let py = |v: f64| MARGIN + INNER - INNER * v.clamp(0.0, max) / max;
    let mut s = header(title);
    y_axis(&mut s, max, "Observed risk", true);
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        MARGIN + INNER,
        MARGIN + INNER
    );
    for k in 0..=5 {
        let v = max * k as f64 / 5.0;
        let x = px(v);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{0}" x2="{x:.2}" y2="{1}" stroke="black"/>"#,
            MARGIN + INNER,
            MARGIN + INNER + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{:.1}%</text>"#,
            MARGIN + INNER + 18.0,
            100.0 * v
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Mean predicted risk</text>"#,
        SIZE / 2.0,
        SIZE - 16.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="grey" stroke-dasharray="4 4"/>"#,
        px(0.0),
        py(0.0),
        px(max),
        py(max)
    );
    for r in rows {
        let se = r.binomial_se();
        let x = px(r.mean_predicted);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="steelblue"/>"#,
            py(r.mean_predicted - 3.0 * se),
            py(r.mean_predicted + 3.0 * se)
        );
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{:.2}" r="4" fill="black"><title>decile {}</title></circle>"#,
            py(r.observed),
            r.decile
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Share of observed events per decile of predicted risk.
pub fn discrimination_svg(rows: &[DiscriminationRow], title: &str) -> Result<String> {
    if rows.is_empty() {
        bail!("discrimination table is empty");
    }
    let max = nice_max(rows.iter().map(|r| r.share).fold(0.0, f64::max));
    let slot = INNER / rows.len() as f64;
    let py = |v: f64| MARGIN + INNER - INNER * v / max;
    let mut s = header(title);
    y_axis(&mut s, max, "Share of observed events", true);
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        MARGIN + INNER,
        MARGIN + INNER
    );
    for (i, r) in rows.iter().enumerate() {
        let x = MARGIN + slot * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="lightgrey"/>"#,
            py(0.0),
            py(r.share)
        );
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{:.2}" r="4" fill="black"/>"#, py(r.share));
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN + INNER + 18.0,
            r.decile
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Decile of predicted risk</text>"#,
        SIZE / 2.0,
        SIZE - 16.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct PlotArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory of `evaluate`.
    #[arg(long)]
    pub report: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn cmd_plot(args: &PlotArgs) -> Result<PathBuf> {
    let cfg = crate::config::RunConfig::load_or_default(args.common.config.as_deref())?;
    let root = &args.report;
    if !root.join("calibration.csv").is_file() {
        bail!("no calibration.csv in {}", root.display());
    }
    // Every directory holding a calibration table gets a pair of charts.
    let mut dirs: Vec<String> = files_under(root)?
        .into_iter()
        .filter_map(|(rel, _)| rel.strip_suffix("calibration.csv").map(str::to_owned))
        .collect();
    dirs.sort();
    let stage = Staging::new(&args.common.out, args.common.force)?;
    let mut manifest = Manifest::new("plot", args.common.seed, serde_json::to_value(args)?, &cfg);
    for prefix in &dirs {
        let name = prefix.trim_end_matches('/');
        let suffix = if name.is_empty() { String::new() } else { format!(" ({})", name.replace("strata/", "").replace('/', " = ")) };
        let cal_path = root.join(format!("{prefix}calibration.csv"));
        let disc_path = root.join(format!("{prefix}discrimination.csv"));
        let cal = parse_calibration(&read(&cal_path)?)?;
        let disc = parse_discrimination(&read(&disc_path)?)?;
        stage.write(&format!("{prefix}calibration.svg"), calibration_svg(&cal, &format!("Calibration{suffix}"))?)?;
        stage.write(&format!("{prefix}discrimination.svg"), discrimination_svg(&disc, &format!("Discrimination{suffix}"))?)?;
        manifest.input(&cal_path)?;
        manifest.input(&disc_path)?;
    }
    stage.finish(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<CalibrationRow> {
        (1..=10)
            .map(|d| CalibrationRow {
                decile: d,
                n: 1000,
                events: 4 * d,
                mean_predicted: 0.004 * d as f64,
                observed: 0.004 * d as f64,
            })
            .collect()
    }

    #[test]
    fn svg_is_deterministic() {
        let a = calibration_svg(&rows(), "t").unwrap();
        assert_eq!(a, calibration_svg(&rows(), "t").unwrap());
        assert_eq!(a.matches("<circle").count(), 10);
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }

    #[test]
    fn empty_tables_are_errors() {
        assert!(calibration_svg(&[], "t").is_err());
        assert!(discrimination_svg(&[], "t").is_err());
    }

    #[test]
    fn axis_limits() {
        assert_eq!(nice_max(0.043), 0.05);
        assert_eq!(nice_max(0.2), 0.2);
        assert_eq!(nice_max(0.21), 0.25);
        assert_eq!(nice_max(0.0), 1.0);
    }
}
