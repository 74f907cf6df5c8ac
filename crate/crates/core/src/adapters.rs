//! Object detection and motion-cue adapters.
//!
//! Pretrained detectors and flow networks stay out of process: they hand
//! their results over as array files (see [`crate::array_file`]) named
//! `<dir>/<clip>/<frame_idx:06>.det` and `<dir>/<clip>/<frame_idx:06>.flow`.
//!
//! * `.det`: f32 array of shape `(N, 6)`, rows `x1 y1 x2 y2 confidence class_id`.
//! * `.flow`: f32 array of shape `(H, W, 2)`, channels `dx dy` in pixels.
//!
//! A built-in block-matching estimator and the temporal-gradient map let the
//! whole pipeline run without any pretrained model.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::array_file::{self, AnyArray};
use crate::datasets::{Frame, VideoSequence};
use crate::error::{Result, VccError};
use crate::roi::{BoundingBox, ScoredBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f32,
    /// Carried through from the detector and ignored downstream.
    pub class_id: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    Gradient,
    Flow,
}

/// Per-pixel motion cue of one frame.
#[derive(Debug, Clone, PartialEq)]
pub enum MotionMap {
    /// Absolute temporal difference, `H x W`.
    Gradient(Array2<f32>),
    /// Displacement field `(dx, dy)`, `H x W x 2`.
    Flow(Array3<f32>),
}

impl MotionMap {
    pub fn gradient(values: Array2<f32>) -> Self {
        MotionMap::Gradient(values)
    }

    pub fn flow(values: Array3<f32>) -> Self {
        MotionMap::Flow(values)
    }

    pub fn mode(&self) -> MotionMode {
        match self {
            MotionMap::Gradient(_) => MotionMode::Gradient,
            MotionMap::Flow(_) => MotionMode::Flow,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        match self {
            MotionMap::Gradient(a) => a.dim(),
            MotionMap::Flow(a) => (a.dim().0, a.dim().1),
        }
    }

    /// The scalar used for binarization: the difference itself in gradient
    /// mode, the flow magnitude in flow mode.
    pub fn scalar(&self) -> Array2<f32> {
        match self {
            MotionMap::Gradient(a) => a.clone(),
            MotionMap::Flow(a) => flow_magnitude(a),
        }
    }
}

pub fn flow_magnitude(flow: &Array3<f32>) -> Array2<f32> {
    let dx = flow.index_axis(Axis(2), 0);
    let dy = flow.index_axis(Axis(2), 1);
    Zip::from(&dx).and(&dy).map_collect(|&a, &b| (a * a + b * b).sqrt())
}

pub trait ObjectDetector: Send + Sync {
    fn detect(&self, frame: &Frame, frame_idx: usize) -> Result<Vec<Detection>>;
}

pub trait FlowEstimator: Send + Sync {
    /// Dense displacement from `current` to `next`, shape `H x W x 2`.
    fn estimate(&self, current: &Frame, next: &Frame, frame_idx: usize) -> Result<Array3<f32>>;
}

/// Keeps detections with confidence above `t_s`, in detector order, and
/// drops class labels.
pub fn detect_objects(
    frame: &Frame,
    frame_idx: usize,
    detector: &dyn ObjectDetector,
    t_s: f64,
) -> Result<Vec<ScoredBox>> {
    let (h, w, _) = frame.dim();
    let detections = detector.detect(frame, frame_idx)?;
    let mut out = Vec::with_capacity(detections.len());
    for d in detections {
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(VccError::InvalidInput(format!(
                "detection confidence {} outside [0, 1]",
                d.confidence
            )));
        }
        if !d.bbox.fits(w, h) {
            return Err(VccError::InvalidInput(format!(
                "detection {:?} outside a {w}x{h} frame",
                d.bbox
            )));
        }
        if f64::from(d.confidence) > t_s {
            out.push(ScoredBox {
                bbox: d.bbox,
                confidence: d.confidence,
            });
        }
    }
    Ok(out)
}

/// Channel-maxed absolute difference of two consecutive frames.
pub fn temporal_gradient_map(current: &Frame, previous: &Frame) -> Result<MotionMap> {
    if current.dim() != previous.dim() {
        return Err(VccError::shape(current.dim(), previous.dim()));
    }
    let (h, w, c) = current.dim();
    let out = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c)
            .map(|ch| current[[y, x, ch]].abs_diff(previous[[y, x, ch]]))
            .max()
            .unwrap_or(0) as f32
    });
    Ok(MotionMap::Gradient(out))
}

pub fn flow_map(
    current: &Frame,
    next: &Frame,
    frame_idx: usize,
    estimator: &dyn FlowEstimator,
) -> Result<MotionMap> {
    if current.dim() != next.dim() {
        return Err(VccError::shape(current.dim(), next.dim()));
    }
    let flow = estimator.estimate(current, next, frame_idx)?;
    let (h, w, _) = current.dim();
    if flow.dim() != (h, w, 2) {
        return Err(VccError::shape((h, w, 2), flow.dim()));
    }
    Ok(MotionMap::Flow(flow))
}

/// Flow for every frame of a clip. Frame `t` is paired with `t + 1`; the
/// last frame reuses the flow of the previous pair, and a single-frame clip
/// gets zero flow.
pub fn flow_sequence(seq: &VideoSequence, estimator: &dyn FlowEstimator) -> Result<Vec<Array3<f32>>> {
    let n = seq.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n.saturating_sub(1) {
        match flow_map(&seq.frames[t], &seq.frames[t + 1], t, estimator)? {
            MotionMap::Flow(f) => out.push(f),
            MotionMap::Gradient(_) => unreachable!("flow_map returns flow"),
        }
    }
    match out.last() {
        Some(last) => out.push(last.clone()),
        None => out.push(Array3::zeros((seq.height(), seq.width(), 2))),
    }
    Ok(out)
}

/// Per pixel, whichever of the flows leaving frames `t - 1` and `t` is
/// smaller. Background that a mover is about to cover inherits a spurious
/// displacement in the forward flow alone; for steady motion the supports of
/// two consecutive flows intersect exactly on the object at `t`.
pub fn occlusion_suppressed_flow(prev: Option<&Array3<f32>>, cur: &Array3<f32>) -> Result<Array3<f32>> {
    let Some(prev) = prev else {
        return Ok(cur.clone());
    };
    if prev.dim() != cur.dim() {
        return Err(VccError::InvalidInput(format!("flow shapes differ: {:?} vs {:?}", prev.dim(), cur.dim())));
    }
    let (h, w, _) = cur.dim();
    let mut out = cur.clone();
    for y in 0..h {
        for x in 0..w {
            let m = |f: &Array3<f32>| f[[y, x, 0]].hypot(f[[y, x, 1]]);
            if m(prev) < m(cur) {
                out[[y, x, 0]] = prev[[y, x, 0]];
                out[[y, x, 1]] = prev[[y, x, 1]];
            }
        }
    }
    Ok(out)
}

/// Gradient maps for every frame; frame 0 has no predecessor and gets zeros.
pub fn gradient_sequence(seq: &VideoSequence) -> Result<Vec<MotionMap>> {
    let mut out = Vec::with_capacity(seq.len());
    out.push(MotionMap::Gradient(Array2::zeros((seq.height(), seq.width()))));
    for t in 1..seq.len() {
        out.push(temporal_gradient_map(&seq.frames[t], &seq.frames[t - 1])?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Built-in block matching flow
// ---------------------------------------------------------------------------

/// Exhaustive block matching on grayscale intensities with parabolic
/// sub-pixel refinement.
///
/// For each pixel the displacement within `search_radius` minimizing the
/// windowed sum of squared differences plus `smoothness * |d|^2` is kept, so
/// textureless regions resolve to zero motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockMatchingFlow {
    pub search_radius: usize,
    pub window_radius: usize,
    pub smoothness: f32,
}

impl Default for BlockMatchingFlow {
    fn default() -> Self {
        BlockMatchingFlow {
            search_radius: 8,
            window_radius: 1,
            smoothness: 1.0,
        }
    }
}

fn grayscale(frame: &Frame) -> Array2<f32> {
    frame.map_axis(Axis(2), |px| px.iter().map(|&v| f32::from(v)).sum::<f32>() / px.len() as f32)
}

/// Sum of `img` over a `(2r+1)^2` window, with the window clipped at borders.
fn box_sum(img: &Array2<f32>, r: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    // Integral image with a zero row/column in front.
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0f64;
        for x in 0..w {
            row += f64::from(img[[y, x]]);
            integral[[y + 1, x + 1]] = integral[[y, x + 1]] + row;
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
        (integral[[y1, x1]] - integral[[y0, x1]] - integral[[y1, x0]] + integral[[y0, x0]]) as f32
    })
}

impl BlockMatchingFlow {
    pub fn compute(&self, current: &Frame, next: &Frame) -> Result<Array3<f32>> {
        if current.dim() != next.dim() {
            return Err(VccError::shape(current.dim(), next.dim()));
        }
        let a = grayscale(current);
        let b = grayscale(next);
        let (h, w) = a.dim();
        let r = self.search_radius as isize;
        let mut best_cost = Array2::<f32>::from_elem((h, w), f32::INFINITY);
        let mut best = Array2::<(isize, isize)>::from_elem((h, w), (0, 0));
        let mut diff = Array2::<f32>::zeros((h, w));
        // Smallest displacements first so equal costs resolve toward zero motion.
        let mut displacements: Vec<(isize, isize)> =
            (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
        displacements.sort_by_key(|&(dx, dy)| dx * dx + dy * dy);
        for &(dx, dy) in &displacements {
            for y in 0..h {
                let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for x in 0..w {
                    let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let d = a[[y, x]] - b[[ny, nx]];
                    diff[[y, x]] = d * d;
                }
            }
            let penalty = self.smoothness * (dx * dx + dy * dy) as f32;
            let cost = box_sum(&diff, self.window_radius);
            Zip::from(&mut best_cost)
                .and(&mut best)
                .and(&cost)
                .for_each(|bc, bd, &c| {
                    if c + penalty < *bc {
                        *bc = c + penalty;
                        *bd = (dx, dy);
                    }
                });
        }

        let wr = self.window_radius;
        let ssd = |y: usize, x: usize, dx: isize, dy: isize| -> f32 {
            let mut s = 0.0f32;
            for yy in y.saturating_sub(wr)..(y + wr + 1).min(h) {
                let ny = (yy as isize + dy).clamp(0, h as isize - 1) as usize;
                for xx in x.saturating_sub(wr)..(x + wr + 1).min(w) {
                    let nx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                    let d = a[[yy, xx]] - b[[ny, nx]];
                    s += d * d;
                }
            }
            s
        };
        let mut flow = Array3::<f32>::zeros((h, w, 2));
        for y in 0..h {
            for x in 0..w {
                let (bx, by) = best[[y, x]];
                let c0 = ssd(y, x, bx, by);
                // Parabola through the costs at d - 1, d, d + 1; exact matches stay integral.
                let refine = |lo: Option<f32>, hi: Option<f32>| -> f32 {
                    match (lo, hi) {
                        (Some(cl), Some(ch)) if c0 > 0.0 => {
                            let denom = cl - 2.0 * c0 + ch;
                            if denom > 0.0 {
                                (0.5 * (cl - ch) / denom).clamp(-0.5, 0.5)
                            } else {
                                0.0
                            }
                        }
                        _ => 0.0,
                    }
                };
                let at = |dx: isize, dy: isize| (dx.abs() <= r && dy.abs() <= r).then(|| ssd(y, x, dx, dy));
                flow[[y, x, 0]] = bx as f32 + refine(at(bx - 1, by), at(bx + 1, by));
                flow[[y, x, 1]] = by as f32 + refine(at(bx, by - 1), at(bx, by + 1));
            }
        }
        Ok(flow)
    }
}

impl FlowEstimator for BlockMatchingFlow {
    fn estimate(&self, current: &Frame, next: &Frame, _frame_idx: usize) -> Result<Array3<f32>> {
        self.compute(current, next)
    }
}

// ---------------------------------------------------------------------------
// File handoff and in-memory adapters
// ---------------------------------------------------------------------------

fn handoff_path(dir: &std::path::Path, clip: &str, frame_idx: usize, ext: &str) -> PathBuf {
    dir.join(clip).join(format!("{frame_idx:06}.{ext}"))
}

/// Reads detections written by an external detector.
#[derive(Debug, Clone)]
pub struct FileDetector {
    pub dir: PathBuf,
    pub clip: String,
}

impl FileDetector {
    pub fn for_clip(dir: impl Into<PathBuf>, clip: impl Into<String>) -> Self {
        FileDetector {
            dir: dir.into(),
            clip: clip.into(),
        }
    }
}

impl ObjectDetector for FileDetector {
    fn detect(&self, frame: &Frame, frame_idx: usize) -> Result<Vec<Detection>> {
        let path = handoff_path(&self.dir, &self.clip, frame_idx, "det");
        if !path.is_file() {
            return Err(VccError::AdapterUnavailable(format!(
                "no detector output at {}; motion cues alone cannot supply appearance RoIs, \
                 so either run the detector to produce it or set `detector = \"none\"` explicitly",
                path.display()
            )));
        }
        let arr = array_file::load(&path)?.into_f32();
        if arr.ndim() != 2 || (arr.shape()[0] > 0 && arr.shape()[1] != 6) {
            return Err(VccError::format(&path, format!("expected (N, 6), got {:?}", arr.shape())));
        }
        let (h, w, _) = frame.dim();
        let mut out = Vec::new();
        for row in arr.outer_iter() {
            let Some(bbox) = BoundingBox::from_float_clipped(
                f64::from(row[0]),
                f64::from(row[1]),
                f64::from(row[2]),
                f64::from(row[3]),
                w,
                h,
            ) else {
                continue;
            };
            out.push(Detection {
                bbox,
                confidence: row[4],
                class_id: row[5] as i64,
            });
        }
        Ok(out)
    }
}

pub fn save_detections(dir: &std::path::Path, clip: &str, frame_idx: usize, dets: &[Detection]) -> Result<()> {
    let mut arr = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[dets.len(), 6]));
    for (i, d) in dets.iter().enumerate() {
        let b = d.bbox;
        let row = [b.x1 as f32, b.y1 as f32, b.x2 as f32, b.y2 as f32, d.confidence, d.class_id as f32];
        for (j, v) in row.into_iter().enumerate() {
            arr[[i, j]] = v;
        }
    }
    array_file::save(&handoff_path(dir, clip, frame_idx, "det"), &AnyArray::F32(arr))
}

/// Reads flow fields written by an external estimator.
#[derive(Debug, Clone)]
pub struct FileFlow {
    pub dir: PathBuf,
    pub clip: String,
}

impl FileFlow {
    pub fn for_clip(dir: impl Into<PathBuf>, clip: impl Into<String>) -> Self {
        FileFlow {
            dir: dir.into(),
            clip: clip.into(),
        }
    }
}

impl FlowEstimator for FileFlow {
    fn estimate(&self, current: &Frame, _next: &Frame, frame_idx: usize) -> Result<Array3<f32>> {
        let path = handoff_path(&self.dir, &self.clip, frame_idx, "flow");
        if !path.is_file() {
            return Err(VccError::AdapterUnavailable(format!(
                "no flow file at {}; use the built-in estimator or gradient motion cues",
                path.display()
            )));
        }
        let arr = array_file::load(&path)?.into_f32();
        let (h, w, _) = current.dim();
        arr.into_dimensionality::<ndarray::Ix3>()
            .ok()
            .filter(|a| a.dim() == (h, w, 2))
            .ok_or_else(|| VccError::format(&path, format!("expected ({h}, {w}, 2) flow")))
    }
}

pub fn save_flow(dir: &std::path::Path, clip: &str, frame_idx: usize, flow: &Array3<f32>) -> Result<()> {
    array_file::save(
        &handoff_path(dir, clip, frame_idx, "flow"),
        &AnyArray::F32(flow.clone().into_dyn()),
    )
}

/// Detections supplied up front, keyed by frame index.
#[derive(Debug, Clone, Default)]
pub struct StaticDetector {
    pub detections: HashMap<usize, Vec<Detection>>,
}

impl ObjectDetector for StaticDetector {
    fn detect(&self, _frame: &Frame, frame_idx: usize) -> Result<Vec<Detection>> {
        Ok(self.detections.get(&frame_idx).cloned().unwrap_or_default())
    }
}
