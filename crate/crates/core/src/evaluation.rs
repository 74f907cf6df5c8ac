//! Frame- and pixel-level ROC analysis and ROC plot rendering.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VccError};
use crate::image_ops::resize_bilinear_2d;
use crate::roi::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Decision thresholds, decreasing; a sample is positive when its score
    /// is `>=` the threshold. The first entry is `+inf` (the origin),
    /// stored as `null` in JSON.
    #[serde(with = "inf_as_null")]
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
    pub eer: f64,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&x| x.is_finite().then_some(x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// ROC over per-frame scores: thresholds sweep the unique scores, AUC by
/// the trapezoid rule, EER by linear interpolation of `FPR = 1 - TPR`.
pub fn frame_level_roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(VccError::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(k) = scores.iter().position(|s| s.is_nan()) {
        return Err(VccError::InvalidInput(format!("score {k} is NaN")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(VccError::Undefined(
            "ROC needs both normal and anomalous frames".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let mut k = 0;
    while k < order.len() {
        let thr = scores[order[k]];
        while k < order.len() && scores[order[k]] == thr {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        thresholds.push(thr);
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
    }
    let auc = fpr
        .windows(2)
        .zip(tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) * 0.5)
        .sum();
    let eer = equal_error_rate(&fpr, &tpr);
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        auc,
        eer,
    })
}

/// Crossing of `FPR` with the miss rate `1 - TPR` along the curve.
fn equal_error_rate(fpr: &[f64], tpr: &[f64]) -> f64 {
    let gap = |k: usize| fpr[k] - (1.0 - tpr[k]);
    for k in 1..fpr.len() {
        let (g0, g1) = (gap(k - 1), gap(k));
        if g1 >= 0.0 {
            if g1 == g0 {
                return fpr[k];
            }
            let t = -g0 / (g1 - g0);
            return fpr[k - 1] + t * (fpr[k] - fpr[k - 1]);
        }
    }
    1.0
}

/// Largest threshold at which a frame still counts as detected under the
/// pixel-level criterion, with pixels flagged when `error >= threshold`.
///
/// Anomalous frame: more than 40% of its ground-truth pixels must be
/// flagged, i.e. the threshold must not exceed the `m`-th largest error on
/// those pixels with `m = floor(0.4 n) + 1`. Normal frame: one flagged pixel
/// makes a false positive, so the critical value is the map maximum.
pub fn pixel_critical_value(map: &Array2<f32>, mask: Option<&Array2<bool>>, label: bool) -> Result<f64> {
    if !label {
        return Ok(map.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64);
    }
    let mask = mask.ok_or_else(|| VccError::InvalidInput("anomalous frame has no pixel mask".into()))?;
    if mask.dim() != map.dim() {
        return Err(VccError::shape(map.dim(), mask.dim()));
    }
    let mut vals: Vec<f32> = map.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let n = vals.len();
    if n == 0 {
        return Err(VccError::InvalidInput("anomalous frame has an empty pixel mask".into()));
    }
    // count > 0.4 n  <=>  5 count > 2 n
    let m = 2 * n / 5 + 1;
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals[m - 1] as f64)
}

/// Pixel-level ROC over full-frame error maps.
pub fn pixel_level_roc(maps: &[Array2<f32>], masks: Option<&[Array2<bool>]>, labels: &[bool]) -> Result<RocCurve> {
    if maps.len() != labels.len() {
        return Err(VccError::InvalidInput(format!("{} maps for {} labels", maps.len(), labels.len())));
    }
    if masks.is_none() && labels.iter().any(|&l| l) {
        return Err(VccError::InvalidInput("pixel-level evaluation needs ground-truth masks".into()));
    }
    let critical = maps
        .iter()
        .enumerate()
        .map(|(k, m)| pixel_critical_value(m, masks.map(|ms| &ms[k]), labels[k]))
        .collect::<Result<Vec<f64>>>()?;
    frame_level_roc(&critical, labels)
}

/// Full-frame error map: each event's `h x w` map is resized to its box
/// and written in, keeping the maximum where boxes overlap.
pub fn assemble_error_map<'a>(
    height: usize,
    width: usize,
    events: impl IntoIterator<Item = (BoundingBox, &'a Array2<f32>)>,
) -> Result<Array2<f32>> {
    let mut out = Array2::<f32>::zeros((height, width));
    for (b, map) in events {
        if !b.fits(width, height) {
            return Err(VccError::InvalidInput(format!("box {b:?} outside a {width}x{height} frame")));
        }
        let resized = resize_bilinear_2d(map.view(), b.height(), b.width());
        out.slice_mut(s![b.y1..b.y2, b.x1..b.x2])
            .zip_mut_with(&resized, |o, &v| *o = o.max(v));
    }
    Ok(out)
}

/// Full-frame map where each box carries one score (maximum on overlap)
/// and pixels outside every box are `-inf`, i.e. never flagged.
pub fn assemble_box_score_map(
    height: usize,
    width: usize,
    boxes: impl IntoIterator<Item = (BoundingBox, f32)>,
) -> Result<Array2<f32>> {
    let mut out = Array2::<f32>::from_elem((height, width), f32::NEG_INFINITY);
    for (b, v) in boxes {
        if !b.fits(width, height) {
            return Err(VccError::InvalidInput(format!("box {b:?} outside a {width}x{height} frame")));
        }
        out.slice_mut(s![b.y1..b.y2, b.x1..b.x2]).mapv_inplace(|o| o.max(v));
    }
    Ok(out)
}

pub fn write_roc_csv(curve: &RocCurve, header: &str, path: &Path) -> Result<()> {
    let mut s = String::new();
    for line in header.lines() {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str("threshold,fpr,tpr\n");
    for k in 0..curve.fpr.len() {
        let _ = writeln!(s, "{},{},{}", curve.thresholds[k], curve.fpr[k], curve.tpr[k]);
    }
    std::fs::write(path, s).map_err(|e| VccError::io(path, e))
}

/// Renders ROC curves as a standalone SVG document.
pub fn roc_svg(curves: &[(&str, &RocCurve)], title: &str) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let (size, margin) = (400.0, 60.0);
    let px = |x: f64| margin + x * size;
    let py = |y: f64| margin + (1.0 - y) * size;
    let total = size + 2.0 * margin;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#, total / 2.0, margin / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{margin}" y="{margin}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#, px(v), py(0.0) + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, px(0.0) - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">False positive rate</text>"#, total / 2.0, total - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">True positive rate</text>"#,
        total / 2.0,
        total / 2.0
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for (k, (label, c)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = c.fpr.iter().zip(&c.tpr).map(|(&f, &t)| format!("{:.2},{:.2}", px(f), py(t))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = py(0.0) - 15.0 - 18.0 * (curves.len() - 1 - k) as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, px(0.55), px(0.62));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{} (AUC {:.3})</text>"#,
            px(0.64),
            ly + 4.0,
            escape(label),
            c.auc
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Concatenates per-clip series into one global series.
pub fn concat<T: Clone>(parts: &[Vec<T>]) -> Vec<T> {
    parts.iter().flatten().cloned().collect()
}
