//! CSV tables and an SVG line chart of per-step accuracy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use incgan::learner::{MetricsReport, StepReport};
use incgan::model::Variant;
use incgan::{Error, Result};

/// Fixed four-decimal rendering used in every CSV cell.
pub fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn table(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Usage(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Usage(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `text` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One row per step. Per-architecture columns cover all `archs` of the
/// stream and stay empty until that architecture has been seen.
pub fn metrics_csv(rows: &[(StepReport, MetricsReport)], archs: usize, variant: Variant) -> Result<String> {
    let aux = variant == Variant::MtMc;
    let mut header: Vec<String> = vec!["step".into(), "seen_architectures".into(), "detection_acc".into()];
    header.extend((0..archs).map(|a| format!("detection_arch{a}")));
    header.push("classification_acc".into());
    if aux {
        header.push("aux_detector_acc".into());
    }
    header.push("epochs_run".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(step, m)| {
            let mut r = vec![
                m.step.to_string(),
                m.architectures.len().to_string(),
                fmt4(m.detection_acc),
            ];
            for a in 0..archs {
                r.push(
                    m.architectures
                        .iter()
                        .position(|&x| x == a)
                        .map(|i| fmt4(m.per_arch_detection[i]))
                        .unwrap_or_default(),
                );
            }
            r.push(fmt4(m.classification_acc));
            if aux {
                r.push(m.aux_detector_acc.map(fmt4).unwrap_or_default());
            }
            r.push(step.epochs_run.to_string());
            r
        })
        .collect();
    table(&header, &body)
}

/// Square count matrix, true architecture by row.
pub fn confusion_csv(m: &MetricsReport) -> Result<String> {
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(m.architectures.iter().map(|a| format!("arch{a}")));
    let body: Vec<Vec<String>> = m
        .architectures
        .iter()
        .zip(&m.confusion)
        .map(|(a, row)| {
            let mut r = vec![format!("arch{a}")];
            r.extend(row.iter().map(usize::to_string));
            r
        })
        .collect();
    table(&header, &body)
}

/// Per-epoch losses of every step.
pub fn epochs_csv(steps: &[StepReport]) -> Result<String> {
    let header: Vec<String> = ["step", "epoch", "train_loss", "val_loss"].map(String::from).to_vec();
    let mut body = Vec::new();
    for s in steps {
        for (i, (t, v)) in s.train_losses.iter().zip(&s.val_losses).enumerate() {
            body.push(vec![s.step.to_string(), (i + 1).to_string(), fmt4(*t), fmt4(*v)]);
        }
    }
    table(&header, &body)
}

/// `variant` rows by budget columns of final detection accuracy.
pub fn sweep_csv(budgets: &[String], rows: &[(Variant, Vec<f64>)]) -> Result<String> {
    let mut header = vec!["variant".to_string()];
    header.extend(budgets.iter().map(|b| format!("M={b}")));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(v, accs)| {
            let mut r = vec![v.to_string()];
            r.extend(accs.iter().map(|a| fmt4(*a)));
            r
        })
        .collect();
    table(&header, &body)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub variant: Variant,
    pub lambda: f64,
    pub temperature: f64,
    pub detection_acc: f64,
    pub best: bool,
}

/// Flags the first highest-accuracy cell of each variant.
pub fn mark_best(cells: &mut [AblationCell]) {
    let variants: Vec<Variant> = cells.iter().map(|c| c.variant).collect();
    for v in variants {
        let mut best: Option<usize> = None;
        for (i, c) in cells.iter().enumerate() {
            if c.variant == v && best.is_none_or(|b| c.detection_acc > cells[b].detection_acc) {
                best = Some(i);
            }
        }
        for (i, c) in cells.iter_mut().enumerate() {
            if c.variant == v {
                c.best = Some(i) == best;
            }
        }
    }
}

pub fn ablation_csv(cells: &[AblationCell]) -> Result<String> {
    let header: Vec<String> = ["variant", "lambda", "temperature", "detection_acc", "best"]
        .map(String::from)
        .to_vec();
    let body: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.variant.to_string(),
                fmt4(c.lambda),
                fmt4(c.temperature),
                fmt4(c.detection_acc),
                if c.best { "*".into() } else { String::new() },
            ]
        })
        .collect();
    table(&header, &body)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(step, accuracy)` points.
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Accuracy-versus-step chart; the y axis spans `[0, 1]`.
pub fn emit_svg_curve(series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::Usage("emit_svg_curve needs at least one non-empty series".into()));
    }
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (56.0, 16.0, 16.0, 48.0);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if x1 - x0 < 1.0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (ax0, ax1, ay0, ay1) = (px(x0), px(x1), py(0.0), py(1.0));
    let _ = writeln!(
        s,
        r#"<path d="M{ax0:.1},{ay1:.1} V{ay0:.1} H{ax1:.1}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.2}</text>"#,
            left - 6.0,
            py(y) + 4.0
        );
    }
    let first = x0.ceil() as i64;
    let last = x1.floor() as i64;
    for step in first..=last {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{step}</text>"#,
            px(step as f64),
            ay0 + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        (ax0 + ax1) / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(14,{:.1}) rotate(-90)" text-anchor="middle">detection accuracy</text>"#,
        (ay0 + ay1) / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
        }
        for &(x, y) in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                px(x),
                py(y)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            w - right - 120.0,
            top + 14.0 * (i as f64 + 1.0),
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(label: &str, pts: &[(f64, f64)]) -> Series {
        Series {
            label: label.into(),
            points: pts.to_vec(),
        }
    }

    #[test]
    fn empty_input_is_a_usage_error() {
        assert!(matches!(emit_svg_curve(&[]), Err(Error::Usage(_))));
        assert!(matches!(emit_svg_curve(&[series("a", &[])]), Err(Error::Usage(_))));
    }

    #[test]
    fn single_point_draws_one_marker() {
        let svg = emit_svg_curve(&[series("a", &[(1.0, 0.9)])]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 0);
    }

    #[test]
    fn one_polyline_per_series() {
        let svg = emit_svg_curve(&[
            series("a<b", &[(1.0, 1.0), (2.0, 0.8)]),
            series("c", &[(1.0, 0.5), (2.0, 0.6)]),
        ])
        .unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn best_cell_is_first_maximum_per_variant() {
        let cell = |v, a| AblationCell {
            variant: v,
            lambda: 1.0,
            temperature: 1.0,
            detection_acc: a,
            best: false,
        };
        let mut cells = vec![
            cell(Variant::MtSc, 0.5),
            cell(Variant::MtSc, 0.9),
            cell(Variant::MtSc, 0.9),
            cell(Variant::MtMc, 0.7),
        ];
        mark_best(&mut cells);
        let flags: Vec<bool> = cells.iter().map(|c| c.best).collect();
        assert_eq!(flags, [false, true, false, true]);
    }

    #[test]
    fn numbers_have_four_decimals() {
        assert_eq!(fmt4(0.5), "0.5000");
        assert_eq!(fmt4(1.0 / 3.0), "0.3333");
        let csv = sweep_csv(&["inf".into(), "0".into()], &[(Variant::MtSc, vec![1.0, 0.25])]).unwrap();
        assert_eq!(csv, "variant,M=inf,M=0\nmt_sc,1.0000,0.2500\n");
    }
}
