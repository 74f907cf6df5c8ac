//! Anomaly scores: per-type completion metrics, type and modality
//! ensembles, frame aggregation and temporal rectification.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VccError};
use crate::events::VideoEvent;
use crate::nn::Modality;
use crate::roi::{BoundingBox, RoiSource};
use crate::training::{MeanStd, ModelSet, ScoreStats};
use crate::vct::{make_vct, Vct};

/// Rectification weighting over the causal window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RectifyScheme {
    None,
    Decay,
    Average,
    Gaussian,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Weight of `(1 - SSIM)` added to MSE.
    pub ssim_weight: f64,
    /// SSIM dynamic range `L`; `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`.
    #[serde(default = "one")]
    pub ssim_range: f64,
    pub w_a: f64,
    pub w_m: f64,
    pub rectify: RectifyScheme,
    pub window: usize,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn one() -> f64 {
    1.0
}
fn default_q() -> f64 {
    0.8
}
fn default_sigma() -> f64 {
    2.0
}
fn default_batch() -> usize {
    256
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            ssim_weight: 1.0,
            ssim_range: 1.0,
            w_a: 1.0,
            w_m: 1.0,
            rectify: RectifyScheme::Average,
            window: 5,
            q: default_q(),
            sigma: default_sigma(),
            batch_size: default_batch(),
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ssim_weight >= 0.0) || !(self.ssim_range > 0.0) {
            return Err(VccError::Config("SSIM weight must be >= 0 and its range > 0".into()));
        }
        if !(self.w_a >= 0.0 && self.w_m >= 0.0) || self.w_a + self.w_m == 0.0 {
            return Err(VccError::Config("fusion weights must be >= 0 and not both zero".into()));
        }
        if !(self.q > 0.0) || !(self.sigma > 0.0) || self.batch_size == 0 {
            return Err(VccError::Config("q, sigma and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn ssim_constants(&self) -> (f64, f64) {
        ((0.01 * self.ssim_range).powi(2), (0.03 * self.ssim_range).powi(2))
    }

    pub fn rectifier(&self) -> Rectifier {
        match self.rectify {
            RectifyScheme::None => Rectifier::Average { window: 0 },
            RectifyScheme::Average => Rectifier::Average { window: self.window },
            RectifyScheme::Decay => Rectifier::Decay {
                q: self.q,
                window: self.window,
            },
            RectifyScheme::Gaussian => Rectifier::Gaussian {
                sigma: self.sigma,
                window: self.window,
            },
            RectifyScheme::Median => Rectifier::Median { window: self.window },
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

fn check_len(a: &[f32], b: &[f32]) {
    assert_eq!(a.len(), b.len(), "metric inputs differ in size");
    assert!(!a.is_empty(), "metric on empty input");
}

/// Mean squared error.
pub fn mse(pred: &[f32], target: &[f32]) -> f64 {
    check_len(pred, target);
    pred.iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64
}

/// SSIM from global statistics of the two inputs (one window covering the
/// whole patch), with population variances and covariance.
pub fn ssim(pred: &[f32], target: &[f32], c1: f64, c2: f64) -> f64 {
    check_len(pred, target);
    let n = pred.len() as f64;
    let mu_a = pred.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mu_b = target.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in pred.iter().zip(target) {
        let (da, db) = (a as f64 - mu_a, b as f64 - mu_b);
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2))
}

/// `MSE + lambda * (1 - SSIM)`: grows with the completion error.
pub fn mixed_score(pred: &[f32], target: &[f32], cfg: &ScoreConfig) -> f64 {
    let m = mse(pred, target);
    if cfg.ssim_weight == 0.0 {
        return m;
    }
    let (c1, c2) = cfg.ssim_constants();
    m + cfg.ssim_weight * (1.0 - ssim(pred, target, c1, c2))
}

/// Mean of the per-type scores.
pub fn type_ensemble(per_type: &[f64]) -> f64 {
    assert!(!per_type.is_empty(), "ensemble of zero scores");
    per_type.iter().sum::<f64>() / per_type.len() as f64
}

/// `w_a * (S_a - mean_a) / std_a + w_m * (S_m - mean_m) / std_m`.
pub fn modality_fuse(s_a: f64, s_m: f64, a: &MeanStd, m: &MeanStd, w_a: f64, w_m: f64) -> f64 {
    let mut s = 0.0;
    if w_a != 0.0 {
        s += w_a * a.standardize(s_a);
    }
    if w_m != 0.0 {
        s += w_m * m.standardize(s_m);
    }
    s
}

// ---------------------------------------------------------------------------
// Event scoring
// ---------------------------------------------------------------------------

/// Per-type completion scores of one event, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEventScore {
    pub frame_idx: usize,
    pub bbox: BoundingBox,
    pub block: usize,
    pub source: RoiSource,
    /// Appearance score per trained type, in type order.
    pub appearance: Vec<f64>,
    pub motion: Vec<f64>,
    /// Squared appearance error averaged over channels and types, `h x w`,
    /// in unit intensity range.
    pub error_map: Array2<f32>,
}

impl RawEventScore {
    pub fn s_a(&self) -> f64 {
        type_ensemble(&self.appearance)
    }

    pub fn s_m(&self) -> f64 {
        type_ensemble(&self.motion)
    }
}

/// Which scores a fused event score is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Type ensemble of both modalities (the full method).
    Ensemble,
    /// Both modalities, a single VCT type (position in the type list).
    SingleType(usize),
    AppearanceOnly,
    MotionOnly,
}

/// Fused event score under `variant`, standardized with training statistics.
pub fn fuse_event(raw: &RawEventScore, stats: &ScoreStats, types: &[usize], cfg: &ScoreConfig, variant: Variant) -> f64 {
    match variant {
        Variant::Ensemble => modality_fuse(raw.s_a(), raw.s_m(), &stats.appearance, &stats.motion, cfg.w_a, cfg.w_m),
        Variant::SingleType(k) => {
            let t = types[k];
            modality_fuse(
                raw.appearance[k],
                raw.motion[k],
                &stats.appearance_by_type[&t],
                &stats.motion_by_type[&t],
                cfg.w_a,
                cfg.w_m,
            )
        }
        Variant::AppearanceOnly => stats.appearance.standardize(raw.s_a()),
        Variant::MotionOnly => stats.motion.standardize(raw.s_m()),
    }
}

fn flat(a: ArrayView3<f32>) -> Vec<f32> {
    a.iter().copied().collect()
}

/// Scores every event with every trained type, in both modalities.
/// Events whose block has no networks (and no fallback) are an error.
pub fn score_events(models: &ModelSet, events: &[VideoEvent], types: &[usize], cfg: &ScoreConfig) -> Result<Vec<RawEventScore>> {
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (k, e) in events.iter().enumerate() {
        let key = models.resolve(e.stc.block_idx).ok_or_else(|| {
            VccError::Config(format!(
                "block {} has no trained networks and no global fallback was trained",
                e.stc.block_idx
            ))
        })?;
        groups.entry(key).or_default().push(k);
    }
    let mut out: Vec<RawEventScore> = events
        .iter()
        .map(|e| {
            let (_, h, w, _) = e.stc.patches.dim();
            RawEventScore {
                frame_idx: e.stc.frame_idx,
                bbox: e.stc.source_box,
                block: e.stc.block_idx,
                source: e.source,
                appearance: vec![0.0; types.len()],
                motion: vec![0.0; types.len()],
                error_map: Array2::zeros((h, w)),
            }
        })
        .collect();
    for (key, idx) in &groups {
        for (ti, &t) in types.iter().enumerate() {
            let net_a = models.nets.get(&(*key, Modality::Appearance, t));
            let net_m = models.nets.get(&(*key, Modality::Motion, t));
            let (Some(net_a), Some(net_m)) = (net_a, net_m) else {
                return Err(VccError::MissingPrerequisite {
                    stage: "score".into(),
                    detail: format!("no type-{t} networks for block {key:?}"),
                });
            };
            for chunk in idx.chunks(cfg.batch_size) {
                let vcts = chunk.iter().map(|&k| make_vct(&events[k], t)).collect::<Result<Vec<Vct>>>()?;
                let refs: Vec<&Vct> = vcts.iter().collect();
                let pa = net_a.predict(&refs)?;
                let pm = net_m.predict(&refs)?;
                for (j, &k) in chunk.iter().enumerate() {
                    let target_a = vcts[j].target_patch.mapv(|v| v as f32 / 255.0);
                    let pred_a = pa.index_axis(Axis(0), j);
                    out[k].appearance[ti] = mixed_score(&flat(pred_a), &flat(target_a.view()), cfg);
                    let pred_m = pm.index_axis(Axis(0), j);
                    out[k].motion[ti] = mixed_score(&flat(pred_m), &flat(vcts[j].target_flow.view()), cfg);
                    let nc = target_a.dim().2 as f32;
                    Zip::from(&mut out[k].error_map)
                        .and(pred_a.lanes(Axis(2)))
                        .and(target_a.lanes(Axis(2)))
                        .for_each(|e, p, q| {
                            let se: f32 = p.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                            *e += se / nc;
                        });
                }
            }
        }
    }
    let nt = types.len() as f32;
    for r in &mut out {
        r.error_map.mapv_inplace(|v| v / nt);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Frame scores
// ---------------------------------------------------------------------------

/// Per-frame maximum of event scores. Frames without events (from `D - 1`
/// on) get the clip's minimum over event-bearing frames; the first `D - 1`
/// frames, which cannot carry events, inherit the score of frame `D - 1`.
/// A clip with no events at all scores 0 everywhere.
pub fn frame_scores(n_frames: usize, events: &[(usize, f64)], depth: usize) -> Vec<f64> {
    let mut best: Vec<Option<f64>> = vec![None; n_frames];
    for &(t, s) in events {
        if t < n_frames {
            best[t] = Some(best[t].map_or(s, |b: f64| b.max(s)));
        }
    }
    let baseline = best.iter().flatten().copied().reduce(f64::min).unwrap_or(0.0);
    let mut out: Vec<f64> = best.iter().map(|b| b.unwrap_or(baseline)).collect();
    let first = depth.saturating_sub(1);
    if first < n_frames {
        let v = out[first];
        for s in out.iter_mut().take(first) {
            *s = v;
        }
    }
    out
}

/// Causal smoothing `S'_l = (1/Z) sum_{m=0..W} w_m S_{l-m}` with `Z` the sum
/// of the weights actually inside the clip; the median variant is the
/// plain median of the same window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rectifier {
    Decay { q: f64, window: usize },
    Average { window: usize },
    Gaussian { sigma: f64, window: usize },
    Median { window: usize },
}

impl Rectifier {
    fn weight(&self, m: usize) -> f64 {
        match *self {
            Rectifier::Decay { q, .. } => q.powi(m as i32),
            Rectifier::Average { .. } => 1.0,
            Rectifier::Gaussian { sigma, .. } => (-((m * m) as f64) / (2.0 * sigma * sigma)).exp(),
            Rectifier::Median { .. } => unreachable!("median has no weights"),
        }
    }

    fn window(&self) -> usize {
        match *self {
            Rectifier::Decay { window, .. }
            | Rectifier::Average { window }
            | Rectifier::Gaussian { window, .. }
            | Rectifier::Median { window } => window,
        }
    }
}

pub fn rectify(series: &[f64], r: Rectifier) -> Vec<f64> {
    let w = r.window();
    (0..series.len())
        .map(|l| {
            let span = w.min(l);
            if let Rectifier::Median { .. } = r {
                let mut win: Vec<f64> = series[l - span..=l].to_vec();
                win.sort_by(f64::total_cmp);
                let n = win.len();
                return if n % 2 == 1 {
                    win[n / 2]
                } else {
                    0.5 * (win[n / 2 - 1] + win[n / 2])
                };
            }
            // Accumulated relative to the current value so that a constant
            // window reproduces it exactly.
            let anchor = series[l];
            let (mut num, mut z) = (0.0, 0.0);
            for m in 0..=span {
                let wm = r.weight(m);
                num += wm * (series[l - m] - anchor);
                z += wm;
            }
            anchor + num / z
        })
        .collect()
}

/// Raw and rectified frame scores of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub raw: Vec<f64>,
    pub rectified: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(raw: Vec<f64>, r: Rectifier) -> Self {
        let rectified = rectify(&raw, r);
        ScoreSeries { raw, rectified }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let a = [0.25f32, 0.5, 0.75];
        assert_eq!(mse(&a, &a), 0.0);
        let b: Vec<f32> = a.iter().map(|v| v + 0.5).collect();
        assert!((mse(&a, &b) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_single_item_loss() {
        use crate::training::lp_loss;
        let a = ndarray::Array4::from_shape_fn((3, 1, 2, 2), |(c, _, y, x)| (c + y * 2 + x) as f64 * 0.1);
        let b = a.mapv(|v| v * 0.5);
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        assert!((mse(&af, &bf) - lp_loss(&a, &b, 2.0) / 12.0).abs() < 1e-7);
    }

    #[test]
    fn ssim_identity_and_negative_covariance() {
        let a: Vec<f32> = (0..64).map(|k| (k as f32 * 0.37).sin() * 0.5 + 0.5).collect();
        assert!((ssim(&a, &a, 1e-4, 9e-4) - 1.0).abs() < 1e-12);
        let b: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&a, &b, 1e-4, 9e-4) < 0.0);
        assert!((ssim(&a, &b, 1e-4, 9e-4) - ssim(&b, &a, 1e-4, 9e-4)).abs() < 1e-15);
    }

    #[test]
    fn mixed_score_rule() {
        let a: Vec<f32> = (0..16).map(|k| k as f32 / 16.0).collect();
        let b: Vec<f32> = a.iter().rev().copied().collect();
        let cfg0 = ScoreConfig {
            ssim_weight: 0.0,
            ..ScoreConfig::default()
        };
        assert_eq!(mixed_score(&a, &b, &cfg0), mse(&a, &b));
        assert_eq!(mixed_score(&a, &a, &ScoreConfig::default()), 0.0);
        let cfg = ScoreConfig::default();
        let (c1, c2) = cfg.ssim_constants();
        let expect = mse(&a, &b) + (1.0 - ssim(&a, &b, c1, c2));
        assert!((mixed_score(&a, &b, &cfg) - expect).abs() < 1e-15);
        // The 0.5 + 1 * (1 - 0.8) arithmetic of the combination rule.
        assert!((0.5 + 1.0 * (1.0 - 0.8) - 0.7f64).abs() < 1e-15);
    }

    #[test]
    fn ensemble_and_fusion() {
        assert_eq!(type_ensemble(&[1.0, 2.0, 3.0, 4.0, 5.0]), 3.0);
        assert_eq!(type_ensemble(&[0.4; 5]), 0.4);
        assert_eq!(type_ensemble(&[0.9]), 0.9);
        let a = MeanStd { mean: 2.0, std: 0.5 };
        let m = MeanStd { mean: 10.0, std: 4.0 };
        assert_eq!(modality_fuse(2.0, 10.0, &a, &m, 0.5, 1.0), 0.0);
        assert_eq!(modality_fuse(3.0, 99.0, &a, &m, 1.0, 0.0), 2.0);
        assert_eq!(modality_fuse(3.0, 14.0, &a, &m, 0.5, 1.0), 2.0);
    }

    #[test]
    fn frame_score_examples() {
        assert_eq!(frame_scores(6, &[(4, 0.2), (4, 0.9)], 5)[4], 0.9);
        assert_eq!(frame_scores(6, &[(5, 0.3)], 5)[5], 0.3);
        // Frame 5 has no event: clip minimum over event-bearing frames.
        let s = frame_scores(8, &[(4, 0.6), (6, 0.4), (7, 0.8)], 5);
        assert_eq!(s, vec![0.6, 0.6, 0.6, 0.6, 0.6, 0.4, 0.4, 0.8]);
        assert_eq!(frame_scores(3, &[], 5), vec![0.0; 3]);
    }

    #[test]
    fn rectify_examples() {
        let avg = rectify(&[1.0, 1.0, 4.0], Rectifier::Average { window: 2 });
        assert_eq!(avg[2], 2.0);
        let dec = rectify(&[0.0, 1.0], Rectifier::Decay { q: 0.8, window: 1 });
        assert!((dec[1] - 1.0 / 1.8).abs() < 1e-12);
        let med = rectify(&[5.0, 1.0, 3.0, 100.0], Rectifier::Median { window: 2 });
        assert_eq!(med, vec![5.0, 3.0, 3.0, 3.0]);
        let none = rectify(&[3.0, 1.0, 2.0], ScoreConfig { rectify: RectifyScheme::None, ..ScoreConfig::default() }.rectifier());
        assert_eq!(none, vec![3.0, 1.0, 2.0]);
    }

    fn schemes(w: usize) -> Vec<Rectifier> {
        vec![
            Rectifier::Decay { q: 0.8, window: w },
            Rectifier::Average { window: w },
            Rectifier::Gaussian { sigma: 1.5, window: w },
            Rectifier::Median { window: w },
        ]
    }

    proptest! {
        #[test]
        fn rectified_constant_series_is_unchanged(c in -1e3f64..1e3, n in 1usize..40, w in 0usize..12) {
            for r in schemes(w) {
                prop_assert!(rectify(&vec![c; n], r).iter().all(|&v| v == c));
            }
        }

        #[test]
        fn rectified_value_within_window_envelope(s in proptest::collection::vec(-10.0f64..10.0, 1..40), w in 0usize..8) {
            for r in schemes(w) {
                let out = rectify(&s, r);
                for (l, v) in out.iter().enumerate() {
                    let win = &s[l.saturating_sub(w)..=l];
                    let lo = win.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = win.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
                }
            }
        }

        #[test]
        fn ensemble_and_fusion_are_linear(v in proptest::collection::vec(-5.0f64..5.0, 1..8), c in -3.0f64..3.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((type_ensemble(&scaled) - c * type_ensemble(&v)).abs() < 1e-9);
            let a = MeanStd { mean: 0.0, std: 2.0 };
            let m = MeanStd { mean: 0.0, std: 0.5 };
            let f = modality_fuse(v[0], 1.0, &a, &m, 0.7, 0.3);
            let g = modality_fuse(v[0] * c, c, &a, &m, 0.7, 0.3);
            prop_assert!((g - c * f).abs() < 1e-9);
        }

        #[test]
        fn ssim_bounded_and_symmetric(a in proptest::collection::vec(0.0f32..1.0, 16), b in proptest::collection::vec(0.0f32..1.0, 16)) {
            let s = ssim(&a, &b, 1e-4, 9e-4);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
            prop_assert!((s - ssim(&b, &a, 1e-4, 9e-4)).abs() < 1e-12);
        }
    }
}
