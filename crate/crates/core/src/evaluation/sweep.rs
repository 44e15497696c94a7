//! Privacy-utility trade-off points, Pareto dominance and their CSV and
//! scatter-plot outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: String,
    pub parameter: String,
    /// Mean face identification accuracy (lower is more private).
    pub privacy_accuracy: f64,
    pub utility_ap: f64,
    pub pareto_dominated: bool,
}

impl SweepPoint {
    pub fn new(
        method: impl Into<String>,
        parameter: impl Into<String>,
        privacy_accuracy: f64,
        utility_ap: f64,
    ) -> Self {
        Self {
            method: method.into(),
            parameter: parameter.into(),
            privacy_accuracy,
            utility_ap,
            pareto_dominated: false,
        }
    }
}

/// At least as private and as useful, strictly better in one of the two.
pub fn dominates(a: &SweepPoint, b: &SweepPoint) -> bool {
    a.privacy_accuracy <= b.privacy_accuracy
        && a.utility_ap >= b.utility_ap
        && (a.privacy_accuracy < b.privacy_accuracy || a.utility_ap > b.utility_ap)
}

pub fn mark_pareto(points: &mut [SweepPoint]) {
    let flags: Vec<bool> = points
        .iter()
        .map(|p| points.iter().any(|q| dominates(q, p)))
        .collect();
    for (p, f) in points.iter_mut().zip(flags) {
        p.pareto_dominated = f;
    }
}

/// Evaluates every config and flags dominated points. Output order follows
/// `configs`.
pub fn tradeoff_sweep<C>(
    configs: &[C],
    evaluate: &mut dyn FnMut(&C) -> Result<SweepPoint>,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(configs.len());
    for c in configs {
        let p = evaluate(c)?;
        for (name, v) in [("privacy_accuracy", p.privacy_accuracy), ("utility_ap", p.utility_ap)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!(
                    "{} {}: {name} = {v} outside [0, 1]",
                    p.method, p.parameter
                )));
            }
        }
        log::info!(
            "sweep {} {}: accuracy {:.3}, AP {:.3}",
            p.method,
            p.parameter,
            p.privacy_accuracy,
            p.utility_ap
        );
        points.push(p);
    }
    mark_pareto(&mut points);
    Ok(points)
}

pub fn write_sweep_csv(points: &[SweepPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "parameter", "privacy_accuracy", "utility_ap", "pareto_dominated"])?;
    for p in points {
        w.write_record([
            p.method.clone(),
            p.parameter.clone(),
            p.privacy_accuracy.to_string(),
            p.utility_ap.to_string(),
            p.pareto_dominated.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Scatter plot with accuracy on x and AP on y, one color per method.
pub fn write_sweep_svg(points: &[SweepPoint], path: impl AsRef<Path>) -> Result<()> {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let sx = |v: f64| m + v * (w - 2.0 * m);
    let sy = |v: f64| h - m - v * (h - 2.0 * m);
    let mut methods: Vec<&str> = Vec::new();
    for p in points {
        if !methods.contains(&p.method.as_str()) {
            methods.push(&p.method);
        }
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.2}</text>"#, sx(v), h - m + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, m - 6.0, sy(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">face identification accuracy</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">detection AP</text>"#,
        h / 2.0,
        h / 2.0
    );
    for p in points {
        let i = methods.iter().position(|m| *m == p.method).unwrap_or(0);
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"><title>{} {}</title></circle>"#,
            sx(p.privacy_accuracy.clamp(0.0, 1.0)),
            sy(p.utility_ap.clamp(0.0, 1.0)),
            p.method,
            p.parameter
        );
    }
    for (i, method) in methods.iter().enumerate() {
        let y = m + 14.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="4" fill="{color}"/>"#, w - m - 110.0, y - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{method}</text>"#, w - m - 100.0);
    }
    s.push_str("</svg>\n");
    let path = path.as_ref();
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
