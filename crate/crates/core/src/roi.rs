//! Region-of-interest extraction from appearance and motion cues.
//!
//! Appearance RoIs come from an object detector and are filtered by an area
//! threshold and an overlap rule. Motion RoIs come from the binarized motion
//! map, after erasing every appearance RoI, via outer-border contour
//! following. The final set is the union of both.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adapters::{detect_objects, MotionMap, ObjectDetector};
use crate::datasets::Frame;
use crate::error::{Result, VccError};

/// Axis-aligned box in pixel coordinates. The box covers columns
/// `x1..x2` and rows `y1..y2` (half-open), so `(x1, y1)` is the top-left
/// vertex and `(x2, y2)` the bottom-right vertex of the covered rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BoundingBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(VccError::InvalidInput(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    /// Rounds outward to whole pixels and clips to a `width x height` frame.
    /// Returns `None` if nothing is left after clipping.
    pub fn from_float_clipped(
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: usize,
        height: usize,
    ) -> Option<Self> {
        let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64) as usize;
        let b = BoundingBox {
            x1: clip(x1.floor(), width),
            y1: clip(y1.floor(), height),
            x2: clip(x2.ceil(), width),
            y2: clip(y2.ceil(), height),
        };
        (b.x1 < b.x2 && b.y1 < b.y2).then_some(b)
    }

    pub fn full_frame(width: usize, height: usize) -> Self {
        BoundingBox {
            x1: 0,
            y1: 0,
            x2: width,
            y2: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Width over height.
    pub fn aspect_ratio(&self) -> f64 {
        self.width() as f64 / self.height() as f64
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        w * h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        inter as f64 / (self.area() + other.area() - inter) as f64
    }

    /// Intersection over the area of the smaller box.
    pub fn overlap_ratio(&self, other: &BoundingBox) -> f64 {
        self.intersection_area(other) as f64 / self.area().min(other.area()) as f64
    }

    /// Twice the geometric center, so that centers stay integral.
    pub fn doubled_center(&self) -> (usize, usize) {
        (self.x1 + self.x2, self.y1 + self.y2)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x2 <= width && self.y2 <= height
    }
}

/// A detector box with its confidence; class labels are already stripped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub confidence: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiThresholds {
    /// Detector confidence threshold.
    pub t_s: f64,
    /// Minimum RoI area in pixels (strict).
    pub t_a: f64,
    /// Overlap ratio at which a smaller box is dropped.
    pub t_o: f64,
    /// Motion binarization threshold.
    pub t_b: f64,
    /// Maximum aspect ratio (strict, symmetric).
    pub t_ar: f64,
}

impl Default for RoiThresholds {
    fn default() -> Self {
        RoiThresholds {
            t_s: 0.5,
            t_a: 144.0,
            t_o: 0.6,
            t_b: 1.0,
            t_ar: 10.0,
        }
    }
}

impl RoiThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_s > 0.0
            && self.t_a > 0.0
            && self.t_o > 0.0
            && self.t_o <= 1.0
            && self.t_b > 0.0
            && self.t_ar > 1.0;
        if ok {
            Ok(())
        } else {
            Err(VccError::Config(format!("invalid RoI thresholds {self:?}")))
        }
    }
}

/// `H x W` map of pixels flagged as moving.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap(pub Array2<bool>);

impl BinaryMap {
    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Applies the area and overlap rules to detector boxes.
///
/// Boxes are ranked by area (descending), then confidence (descending), then
/// input order. A box survives when its area exceeds `t_a` and its overlap
/// ratio with every higher-ranked surviving box stays below `t_o`. The rule
/// only ever compares a box with larger-or-equal boxes, so re-applying it to
/// its own output changes nothing.
pub fn filter_appearance_rois(boxes: &[ScoredBox], t_a: f64, t_o: f64) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ba, bb) = (&boxes[a], &boxes[b]);
        bb.bbox
            .area()
            .cmp(&ba.bbox.area())
            .then(bb.confidence.total_cmp(&ba.confidence))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<BoundingBox> = Vec::new();
    for idx in order {
        let b = boxes[idx].bbox;
        if b.area() as f64 <= t_a {
            continue;
        }
        if kept.iter().all(|k| b.overlap_ratio(k) < t_o) {
            kept.push(b);
        }
    }
    kept
}

pub fn binarize(motion: &MotionMap, t_b: f64) -> BinaryMap {
    BinaryMap(motion.scalar().mapv(|v| f64::from(v) > t_b))
}

/// Clears every pixel covered by any of `boxes`.
pub fn subtract_rois(map: &BinaryMap, boxes: &[BoundingBox]) -> BinaryMap {
    let mut out = map.0.clone();
    let (h, w) = out.dim();
    for b in boxes {
        for y in b.y1..b.y2.min(h) {
            for x in b.x1..b.x2.min(w) {
                out[[y, x]] = false;
            }
        }
    }
    BinaryMap(out)
}

/// Clockwise neighbor offsets `(drow, dcol)` starting east, with rows
/// growing downward.
const NEIGHBORS: [(isize, isize); 8] = [
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
];

fn direction_of(dr: isize, dc: isize) -> usize {
    NEIGHBORS
        .iter()
        .position(|&d| d == (dr, dc))
        .expect("offset is a neighbor")
}

/// Bounding boxes of all outer borders of 8-connected foreground regions,
/// found by topological border following (Suzuki and Abe). Hole borders are
/// traced too, so that pixels next to holes are never mistaken for the start
/// of a new outer border, but only outer borders produce boxes.
pub fn outer_contour_boxes(map: &BinaryMap) -> Vec<BoundingBox> {
    let (h, w) = map.dim();
    let (ph, pw) = (h + 2, w + 2);
    let mut f = vec![0i32; ph * pw];
    for ((y, x), &v) in map.0.indexed_iter() {
        if v {
            f[(y + 1) * pw + x + 1] = 1;
        }
    }
    let at = |r: usize, c: usize| r * pw + c;
    let mut nbd = 1i32;
    let mut boxes = Vec::new();

    for i in 1..ph - 1 {
        for j in 1..pw - 1 {
            let v = f[at(i, j)];
            if v == 0 {
                continue;
            }
            let (outer, from) = if v == 1 && f[at(i, j - 1)] == 0 {
                (true, (i, j - 1))
            } else if v >= 1 && f[at(i, j + 1)] == 0 {
                (false, (i, j + 1))
            } else {
                continue;
            };
            nbd += 1;
            let bounds = follow_border(&mut f, pw, (i, j), from, nbd);
            if outer {
                let (r0, c0, r1, c1) = bounds;
                boxes.push(BoundingBox {
                    x1: c0 - 1,
                    y1: r0 - 1,
                    x2: c1,
                    y2: r1,
                });
            }
        }
    }
    boxes
}

/// Traces one border starting at `start`, entered from the zero pixel
/// `from`; labels border pixels with `nbd` / `-nbd` and returns the
/// inclusive padded bounds `(row_min, col_min, row_max, col_max)`.
fn follow_border(
    f: &mut [i32],
    pw: usize,
    start: (usize, usize),
    from: (usize, usize),
    nbd: i32,
) -> (usize, usize, usize, usize) {
    let at = |(r, c): (usize, usize)| r * pw + c;
    let step = |(r, c): (usize, usize), d: usize| {
        let (dr, dc) = NEIGHBORS[d];
        ((r as isize + dr) as usize, (c as isize + dc) as usize)
    };
    let mut bounds = (start.0, start.1, start.0, start.1);

    // Clockwise search around `start` for the first nonzero neighbor.
    let d0 = direction_of(from.0 as isize - start.0 as isize, from.1 as isize - start.1 as isize);
    let first = (0..8)
        .map(|k| (d0 + k) % 8)
        .map(|d| step(start, d))
        .find(|&p| f[at(p)] != 0);
    let Some(p1) = first else {
        f[at(start)] = -nbd;
        return bounds;
    };

    let mut prev = p1;
    let mut cur = start;
    loop {
        // Counterclockwise search around `cur`, beginning just after `prev`.
        let dp = direction_of(prev.0 as isize - cur.0 as isize, prev.1 as isize - cur.1 as isize);
        let mut east_zero_examined = false;
        let mut next = cur;
        for k in 1..=8 {
            let d = (dp + 8 - k) % 8;
            let p = step(cur, d);
            if f[at(p)] != 0 {
                next = p;
                break;
            }
            if d == 0 {
                east_zero_examined = true;
            }
        }
        if east_zero_examined {
            f[at(cur)] = -nbd;
        } else if f[at(cur)] == 1 {
            f[at(cur)] = nbd;
        }
        bounds.0 = bounds.0.min(cur.0);
        bounds.1 = bounds.1.min(cur.1);
        bounds.2 = bounds.2.max(cur.0);
        bounds.3 = bounds.3.max(cur.1);
        if next == start && cur == p1 {
            return bounds;
        }
        prev = cur;
        cur = next;
    }
}

/// Motion RoIs: contour boxes whose area exceeds `t_a` and whose aspect
/// ratio lies strictly inside `(1 / t_ar, t_ar)`.
pub fn detect_motion_rois(map: &BinaryMap, t_a: f64, t_ar: f64) -> Vec<BoundingBox> {
    outer_contour_boxes(map)
        .into_iter()
        .filter(|b| {
            let ar = b.aspect_ratio();
            b.area() as f64 > t_a && ar > 1.0 / t_ar && ar < t_ar
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoiSource {
    Appearance,
    Motion,
}

impl RoiSource {
    pub fn tag(self) -> char {
        match self {
            RoiSource::Appearance => 'a',
            RoiSource::Motion => 'm',
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "a" => Some(RoiSource::Appearance),
            "m" => Some(RoiSource::Motion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoiSet {
    pub appearance: Vec<BoundingBox>,
    pub motion: Vec<BoundingBox>,
}

impl RoiSet {
    /// `B = B_a ∪ B_m`, appearance boxes first; a motion box identical to an
    /// appearance box is listed once.
    pub fn union(&self) -> Vec<(BoundingBox, RoiSource)> {
        let mut out: Vec<(BoundingBox, RoiSource)> = self
            .appearance
            .iter()
            .map(|&b| (b, RoiSource::Appearance))
            .collect();
        for &b in &self.motion {
            if !out.iter().any(|(o, _)| *o == b) {
                out.push((b, RoiSource::Motion));
            }
        }
        out
    }
}

/// Full RoI extraction for one frame.
pub fn extract_rois(
    frame: &Frame,
    frame_idx: usize,
    motion: &MotionMap,
    detector: Option<&dyn ObjectDetector>,
    thresholds: &RoiThresholds,
) -> Result<RoiSet> {
    let (h, w, _) = frame.dim();
    if motion.dim() != (h, w) {
        return Err(VccError::shape((h, w), motion.dim()));
    }
    let appearance = match detector {
        Some(det) => {
            let candidates = detect_objects(frame, frame_idx, det, thresholds.t_s)?;
            filter_appearance_rois(&candidates, thresholds.t_a, thresholds.t_o)
        }
        None => Vec::new(),
    };
    let binary = subtract_rois(&binarize(motion, thresholds.t_b), &appearance);
    let motion_boxes = detect_motion_rois(&binary, thresholds.t_a, thresholds.t_ar);
    Ok(RoiSet {
        appearance,
        motion: motion_boxes,
    })
}
