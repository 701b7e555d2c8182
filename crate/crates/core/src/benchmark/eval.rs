//! Cumulative relocalization-error curves.

use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::RelocCandidate;
use crate::alignment::TrackResult;

/// Fraction of candidates with error at most each threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub thresholds: Vec<f64>,
    pub fraction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub failures: usize,
    /// Trapezoidal area under the curve over the threshold range, normalised to `[0, 1]`.
    pub auc: f64,
    pub success_at_0_1: f64,
    pub success_at_0_5: f64,
    pub success_at_1_0: f64,
}

/// Translation error of a tracking result; failures count as infinite.
pub fn relocalization_error(candidate: &RelocCandidate, result: &TrackResult) -> f64 {
    if !result.converged {
        return f64::INFINITY;
    }
    let e = (result.pose.translation - candidate.gt_relative.translation).norm();
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Thresholds `0, 0.01, ..., 1.0`.
pub fn threshold_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

pub fn evaluate_relocalization(errors: &[f64]) -> (EvalCurve, EvalSummary) {
    let thresholds = threshold_grid();
    let mut sorted: Vec<f64> = errors.iter().map(|e| if e.is_nan() { f64::INFINITY } else { *e }).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    let frac = |t: f64| sorted.partition_point(|e| *e <= t) as f64 / n;
    let fraction: Vec<f64> = thresholds.iter().map(|t| frac(*t)).collect();
    let mut auc = 0.0;
    for i in 1..thresholds.len() {
        auc += 0.5 * (fraction[i] + fraction[i - 1]) * (thresholds[i] - thresholds[i - 1]);
    }
    let span = thresholds[thresholds.len() - 1] - thresholds[0];
    let summary = EvalSummary {
        count: errors.len(),
        failures: sorted.iter().filter(|e| e.is_infinite()).count(),
        auc: auc / span,
        success_at_0_1: frac(0.1),
        success_at_0_5: frac(0.5),
        success_at_1_0: frac(1.0),
    };
    (EvalCurve { thresholds, fraction }, summary)
}

pub fn write_curve_csv<W: Write>(mut w: W, curve: &EvalCurve) -> io::Result<()> {
    writeln!(w, "threshold,fraction")?;
    for (t, f) in curve.thresholds.iter().zip(&curve.fraction) {
        writeln!(w, "{t:.2},{f}")?;
    }
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Self-contained SVG line plot of named curves.
pub fn render_svg(curves: &[(String, EvalCurve)]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let sx = |t: f64| m + t * (w - 2.0 * m);
    let sy = |f: f64| h - m - f * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<polyline points="{},{} {},{} {},{}" fill="none" stroke="black"/>"#,
        sx(0.0),
        sy(1.0),
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(0.0)
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#, sx(v), sy(0.0) + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, sx(0.0) - 6.0, sy(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">translation error threshold</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">fraction tracked</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (k, (name, c)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = c
            .thresholds
            .iter()
            .zip(&c.fraction)
            .map(|(t, f)| format!("{:.2},{:.2}", sx(*t), sy(*f)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let ly = m + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - m - 110.0,
            w - m - 90.0,
            w - m - 85.0,
            ly + 4.0,
            name.replace('&', "&amp;").replace('<', "&lt;")
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_errors_give_unit_curve() {
        let (c, s) = evaluate_relocalization(&[0.0; 5]);
        assert!(c.fraction.iter().all(|f| *f == 1.0));
        assert_eq!(s.auc, 1.0);
    }

    #[test]
    fn counting_example() {
        let (c, s) = evaluate_relocalization(&[0.05, 0.5, 2.0]);
        let at = |t: f64| c.fraction[c.thresholds.iter().position(|x| *x == t).unwrap()];
        assert_eq!(at(0.1), 1.0 / 3.0);
        assert_eq!(at(0.6), 2.0 / 3.0);
        assert_eq!(at(1.0), 2.0 / 3.0);
        assert_eq!(s.success_at_0_5, 2.0 / 3.0);
    }

    #[test]
    fn failures_never_count() {
        let (c, s) = evaluate_relocalization(&[f64::INFINITY, f64::NAN, 0.2]);
        assert_eq!(c.fraction[100], 1.0 / 3.0);
        assert_eq!(s.failures, 2);
    }

    #[test]
    fn csv_and_svg_render() {
        let (c, _) = evaluate_relocalization(&[0.3]);
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &c).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("threshold,fraction\n0.00,0\n"));
        assert_eq!(text.lines().count(), 102);
        let svg = render_svg(&[("a".into(), c)]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
