//! Plain SVG plots and a text summary of a run.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::eval::EvalReport;
use super::model::LogRow;
use crate::autodiff::Tensor;
use crate::error::Result;

const W: f64 = 640.0;
const PANEL_H: f64 = 120.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn open(out: &mut String, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{h}" viewBox="0 0 {W} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{h}" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(v: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = v
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if lo > hi {
        None
    } else if hi - lo < 1e-12 {
        Some((lo - 0.5, hi + 0.5))
    } else {
        Some((lo, hi))
    }
}

/// Polyline segments through the finite points of `ys`.
fn polylines(out: &mut String, ys: &[Option<f64>], x: impl Fn(usize) -> f64, y: impl Fn(f64) -> f64, color: &str, dash: &str) {
    let mut seg = String::new();
    let flush = |seg: &mut String, out: &mut String| {
        if !seg.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.2"{dash} points="{}"/>"#,
                seg.trim_end()
            );
            seg.clear();
        }
    };
    for (i, v) in ys.iter().enumerate() {
        match v {
            Some(v) if v.is_finite() => {
                let _ = write!(seg, "{:.2},{:.2} ", x(i), y(*v));
            }
            _ => flush(&mut seg, out),
        }
    }
    flush(&mut seg, out);
}

/// One panel per logged term, steps on the x axis.
pub fn loss_curves_svg(log: &[LogRow]) -> String {
    let mut terms: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for r in log {
        terms.entry(&r.term).or_default().push((r.step, r.value));
    }
    let h = PAD + PANEL_H * terms.len().max(1) as f64;
    let mut out = String::new();
    open(&mut out, h);
    if terms.is_empty() {
        let _ = writeln!(out, r#"<text x="{PAD}" y="{PAD}">no training log rows</text>"#);
    }
    for (k, (term, pts)) in terms.iter().enumerate() {
        let top = PAD / 2.0 + k as f64 * PANEL_H;
        let (s0, s1) = range(pts.iter().map(|p| p.0 as f64)).unwrap_or((0.0, 1.0));
        let (v0, v1) = range(pts.iter().map(|p| p.1)).unwrap_or((0.0, 1.0));
        let ph = PANEL_H - 30.0;
        let _ = writeln!(
            out,
            r##"<rect x="{PAD}" y="{top}" width="{}" height="{ph}" fill="none" stroke="#999"/>"##,
            W - 2.0 * PAD
        );
        let _ = writeln!(
            out,
            r#"<text x="{PAD}" y="{}">{} (min {v0:.4}, max {v1:.4})</text>"#,
            top - 4.0,
            escape(term)
        );
        let ys: Vec<Option<f64>> = pts.iter().map(|p| Some(p.1)).collect();
        polylines(
            &mut out,
            &ys,
            |i| PAD + (pts[i].0 as f64 - s0) / (s1 - s0) * (W - 2.0 * PAD),
            |v| top + ph - (v - v0) / (v1 - v0) * ph,
            COLORS[k % COLORS.len()],
            "",
        );
    }
    out.push_str("</svg>\n");
    out
}

/// A pitch contour: Hz per frame and its voicing.
#[derive(Clone, Copy, Debug)]
pub struct Contour<'a> {
    pub label: &'a str,
    pub f0: &'a [f64],
    pub voiced: &'a [bool],
}

/// Contours over frames, unvoiced frames left as gaps. Frames voiced in the
/// first contour get a shaded background.
pub fn f0_overlay_svg(contours: &[Contour]) -> String {
    let h = 260.0;
    let mut out = String::new();
    open(&mut out, h);
    let frames = contours.iter().map(|c| c.f0.len()).max().unwrap_or(0).max(1);
    let voiced_hz = |c: &Contour| -> Vec<Option<f64>> {
        c.f0.iter().zip(c.voiced).map(|(&f, &v)| (v && f > 0.0).then_some(f)).collect()
    };
    let all: Vec<f64> = contours.iter().flat_map(voiced_hz).flatten().collect();
    let (lo, hi) = range(all.iter().copied()).unwrap_or((100.0, 400.0));
    let (top, ph) = (PAD / 2.0, h - PAD * 1.5);
    let fw = (W - 2.0 * PAD) / frames as f64;
    let x = |i: usize| PAD + (i as f64 + 0.5) * fw;
    let y = |v: f64| top + ph - (v - lo) / (hi - lo) * ph;
    if let Some(r) = contours.first() {
        let mut j = 0;
        while j < r.voiced.len() {
            if r.voiced[j] {
                let start = j;
                while j < r.voiced.len() && r.voiced[j] {
                    j += 1;
                }
                let _ = writeln!(
                    out,
                    r##"<rect class="voiced" x="{:.2}" y="{top}" width="{:.2}" height="{ph}" fill="#e8e8e8"/>"##,
                    PAD + start as f64 * fw,
                    (j - start) as f64 * fw
                );
            } else {
                j += 1;
            }
        }
    }
    let _ = writeln!(
        out,
        r##"<rect x="{PAD}" y="{top}" width="{}" height="{ph}" fill="none" stroke="#999"/>"##,
        W - 2.0 * PAD
    );
    for (k, c) in contours.iter().enumerate() {
        let dash = if k == 0 { "" } else { r#" stroke-dasharray="4 2""# };
        polylines(&mut out, &voiced_hz(c), x, y, COLORS[k % COLORS.len()], dash);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{}">{}</text>"#,
            PAD + 110.0 * k as f64,
            h - 8.0,
            COLORS[k % COLORS.len()],
            escape(c.label)
        );
    }
    let _ = writeln!(out, r#"<text x="4" y="{}">{hi:.0} Hz</text>"#, top + 10.0);
    let _ = writeln!(out, r#"<text x="4" y="{}">{lo:.0} Hz</text>"#, top + ph);
    out.push_str("</svg>\n");
    out
}

/// `[M × T]` heatmap, low bands at the bottom, darker is louder.
pub fn mel_heatmap_svg(mel: &Tensor, title: &str) -> Result<String> {
    let (m, t) = mel.dims2()?;
    let h = 2.0 * PAD + 6.0 * m as f64;
    let mut out = String::new();
    open(&mut out, h);
    let _ = writeln!(out, r#"<text x="{PAD}" y="{}">{}</text>"#, PAD - 8.0, escape(title));
    let (lo, hi) = range(mel.data().iter().copied()).unwrap_or((0.0, 1.0));
    let cw = (W - 2.0 * PAD) / t.max(1) as f64;
    for b in 0..m {
        for j in 0..t {
            let v = (mel.at(b, j) - lo) / (hi - lo);
            let g = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.1}" width="{:.2}" height="6" fill="rgb({g},{g},{g})"/>"#,
                PAD + j as f64 * cw,
                PAD + 6.0 * (m - 1 - b) as f64,
                cw + 0.05
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// First and last value of every logged term plus the metric summary.
pub fn text_summary(log: &[LogRow], metrics: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    let mut terms: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in log {
        let e = terms.entry(&r.term).or_insert((r.value, r.value, r.step));
        e.1 = r.value;
        e.2 = r.step;
    }
    if terms.is_empty() {
        out.push_str("training log: empty\n");
    } else {
        let steps = terms.values().map(|e| e.2).max().unwrap_or(0);
        let _ = writeln!(out, "training log: {steps} steps");
        for (t, (first, last, _)) in &terms {
            let _ = writeln!(out, "  {t:<16} {first:>12.5} -> {last:>12.5}");
        }
    }
    for (label, m) in metrics {
        let _ = writeln!(out, "{label}: {}", m.summary());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::MetricRow;

    fn log() -> Vec<LogRow> {
        (1..=5)
            .flat_map(|s| {
                [("total", 10.0 / s as f64), ("mel", 1.0)].map(|(t, v)| LogRow {
                    step: s,
                    term: t.into(),
                    value: v,
                })
            })
            .collect()
    }

    #[test]
    fn empty_log_is_valid_svg() {
        let s = loss_curves_svg(&[]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(!s.contains("polyline"));
        assert_eq!(text_summary(&[], &[]), "training log: empty\n");
    }

    #[test]
    fn plots_are_deterministic() {
        assert_eq!(loss_curves_svg(&log()), loss_curves_svg(&log()));
        assert_eq!(loss_curves_svg(&log()).matches("<polyline").count(), 2);
        let mel = Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let a = mel_heatmap_svg(&mel, "m").unwrap();
        assert_eq!(a, mel_heatmap_svg(&mel, "m").unwrap());
        assert_eq!(a.matches("<rect").count(), 1 + 6);
    }

    #[test]
    fn f0_overlay_shades_voiced_runs() {
        let f0 = [0.0, 220.0, 221.0, 0.0, 230.0];
        let v = [false, true, true, false, true];
        let g = [200.0; 5];
        let c = [
            Contour { label: "reference", f0: &f0, voiced: &v },
            Contour { label: "refined", f0: &g, voiced: &[true; 5] },
        ];
        let s = f0_overlay_svg(&c);
        assert_eq!(s.matches(r#"class="voiced""#).count(), 2);
        assert_eq!(s.matches("<polyline").count(), 3);
        assert_eq!(s, f0_overlay_svg(&c));
    }

    #[test]
    fn summary_lists_terms_and_metrics() {
        let row = MetricRow {
            utterance: "a".into(),
            mcd_db: 1.0,
            f0_rmse_cents: 2.0,
            f0_rmse_hz: 0.5,
            voiced_frames: 3,
            mel_l1: 0.1,
        };
        let rep = EvalReport::new(vec![row]).unwrap();
        let s = text_summary(&log(), &[("refined", &rep)]);
        assert!(s.contains("5 steps"));
        assert!(s.contains("total") && s.contains("10.00000 ->      2.00000"));
        assert!(s.contains("refined: utterances 1  MCD 1.000 dB"));
    }
}
