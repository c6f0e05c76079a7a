use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::distortion::Kind;
use crate::Result;

use super::evaluate::{EvaluationReport, ValidationRecord};
use super::train::StepRecord;

pub const REPORT_JSON: &str = "report.json";

pub fn write_trace_csv(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_validation_csv(path: &Path, log: &[ValidationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Writes `report.json` plus one CSV per table; returns the files written.
pub fn write_evaluation(dir: &Path, report: &EvaluationReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let json = dir.join(REPORT_JSON);
    fs::write(&json, serde_json::to_string_pretty(report)?)?;
    written.push(json);

    let path = dir.join("robustness.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["kind", "level", "parameter", "mean_ber", "accuracy"])?;
    for c in &report.robustness {
        w.write_record([
            c.kind.name().to_string(),
            c.level.to_string(),
            c.parameter.to_string(),
            format!("{:.6}", c.mean_ber),
            format!("{:.6}", c.accuracy),
        ])?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("detection.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for d in &report.detection {
        w.serialize(d)?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("samples.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &report.records {
        w.serialize(r)?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["metric", "value"])?;
    let f = &report.fidelity;
    let mut rows = vec![
        ("psnr_db".to_string(), f.psnr),
        ("ssim".into(), f.ssim),
        ("clean_ber".into(), report.clean_ber),
        ("tau".into(), report.calibration.tau),
        ("false_positive_rate".into(), report.false_positive_rate),
    ];
    for m in &report.manipulations {
        rows.push((format!("{}_mean_ber", m.spec.kind), m.mean_ber));
        rows.push((format!("{}_above_tau", m.spec.kind), m.above_tau));
    }
    for (k, v) in rows {
        w.write_record([k, format!("{v:.6}")])?;
    }
    w.flush()?;
    written.push(path);

    let path = dir.join("robustness.svg");
    fs::write(&path, robustness_svg(report))?;
    written.push(path);
    Ok(written)
}

pub fn read_evaluation(dir: &Path) -> Result<EvaluationReport> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(REPORT_JSON))?)?)
}

const PALETTE: [&str; 5] = ["#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182"];

struct Plot {
    svg: String,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xmax: f64,
    ymax: f64,
}

impl Plot {
    fn new(title: &str, xlabel: &str, ylabel: &str, xmax: f64, ymax: f64) -> Self {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="560" height="360" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="560" height="360" fill="white"/>"#);
        let _ = writeln!(svg, r#"<text x="280" y="20" text-anchor="middle" font-size="14">{title}</text>"#);
        let _ = writeln!(svg, r#"<text x="250" y="350" text-anchor="middle">{xlabel}</text>"#);
        let _ = writeln!(
            svg,
            r#"<text x="14" y="180" text-anchor="middle" transform="rotate(-90 14 180)">{ylabel}</text>"#
        );
        let p = Plot {
            svg,
            x0: 60.0,
            y0: 310.0,
            w: 380.0,
            h: 270.0,
            xmax: xmax.max(1e-9),
            ymax: ymax.max(1e-9),
        };
        let mut p = p;
        let _ = writeln!(
            p.svg,
            r#"<path d="M{x0} {top} V{y0} H{right}" stroke="black" fill="none"/>"#,
            x0 = p.x0,
            top = p.y0 - p.h,
            y0 = p.y0,
            right = p.x0 + p.w
        );
        for i in 0..=4 {
            let v = p.ymax * i as f64 / 4.0;
            let y = p.py(v);
            let _ = writeln!(p.svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, p.x0 - 4.0, y + 4.0);
        }
        for i in 0..=5 {
            let v = p.xmax * i as f64 / 5.0;
            let _ = writeln!(
                p.svg,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                p.px(v),
                p.y0 + 16.0,
                if p.xmax >= 10.0 { format!("{v:.0}") } else { format!("{v:.1}") }
            );
        }
        p
    }

    fn px(&self, x: f64) -> f64 {
        self.x0 + self.w * x / self.xmax
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 - self.h * (y / self.ymax).clamp(0.0, 1.0)
    }

    fn series(&mut self, k: usize, name: &str, points: &[(f64, f64)]) {
        let colour = PALETTE[k % PALETTE.len()];
        let d: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| format!("{}{:.1} {:.1}", if i == 0 { 'M' } else { 'L' }, self.px(x), self.py(y)))
            .collect();
        let _ = writeln!(self.svg, r#"<path d="{}" stroke="{colour}" stroke-width="2" fill="none"/>"#, d.join(" "));
        let ly = 50.0 + 18.0 * k as f64;
        let _ = writeln!(
            self.svg,
            r#"<rect x="455" y="{:.0}" width="12" height="12" fill="{colour}"/><text x="472" y="{:.0}">{name}</text>"#,
            ly - 10.0,
            ly
        );
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

/// Mean BER against perturbation level, one line per kind.
pub fn robustness_svg(report: &EvaluationReport) -> String {
    let ymax = report.robustness.iter().map(|c| c.mean_ber).fold(0.5f64, f64::max);
    let mut p = Plot::new("BER under benign perturbations", "level", "mean BER", 5.0, ymax);
    for (k, kind) in Kind::ALL.into_iter().enumerate() {
        let pts: Vec<(f64, f64)> = report
            .robustness
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| (c.level as f64, c.mean_ber))
            .collect();
        p.series(k, kind.name(), &pts);
    }
    p.finish()
}

/// Training loss terms against step, smoothed over `window` steps.
pub fn trace_svg(trace: &[StepRecord], window: usize) -> String {
    let window = window.max(1);
    let smooth = |f: &dyn Fn(&StepRecord) -> f64| -> Vec<(f64, f64)> {
        trace
            .chunks(window)
            .map(|c| (c[c.len() - 1].step as f64, c.iter().map(f).sum::<f64>() / c.len() as f64))
            .collect()
    };
    let series: [(&str, Vec<(f64, f64)>); 4] = [
        ("recon", smooth(&|r| r.recon)),
        ("noise", smooth(&|r| r.noise)),
        ("fragile", smooth(&|r| r.fragile)),
        ("ber", smooth(&|r| r.ber)),
    ];
    let ymax = series.iter().flat_map(|(_, v)| v.iter().map(|p| p.1)).fold(0.0f64, f64::max);
    let xmax = trace.last().map_or(1.0, |r| r.step as f64);
    let mut p = Plot::new("training", "step", "value", xmax, ymax);
    for (k, (name, pts)) in series.iter().enumerate() {
        p.series(k, name, pts);
    }
    p.finish()
}

/// Markdown tables for a report, for terminals and READMEs.
pub fn markdown_summary(report: &EvaluationReport) -> String {
    let mut s = String::new();
    let f = &report.fidelity;
    let _ = writeln!(s, "| PSNR (dB) | SSIM | clean BER | tau | FPR |\n|---|---|---|---|---|");
    let _ = writeln!(
        s,
        "| {:.2} | {:.4} | {:.4} | {:.4} | {:.3} |\n",
        f.psnr, f.ssim, report.clean_ber, report.calibration.tau, report.false_positive_rate
    );
    let _ = writeln!(s, "| kind | L1 | L2 | L3 | L4 | L5 |\n|---|---|---|---|---|---|");
    for kind in Kind::ALL {
        let row: Vec<String> = (1..=5)
            .map(|l| report.cell(kind, l).map_or("-".into(), |c| format!("{:.4}", c.mean_ber)))
            .collect();
        let _ = writeln!(s, "| {kind} | {} |", row.join(" | "));
    }
    let _ = writeln!(s, "\n| manipulation | protocol | tau | ACC | AUC |\n|---|---|---|---|---|");
    for d in &report.detection {
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.2} | {:.2} |",
            d.manipulation,
            d.protocol,
            d.tau,
            100.0 * d.acc,
            100.0 * d.auc
        );
    }
    s
}
