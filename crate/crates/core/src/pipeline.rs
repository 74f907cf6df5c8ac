//! In-memory pipeline: event extraction for a clip, per-block grouping,
//! training-set score statistics and per-clip frame scores.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::adapters::{flow_sequence, gradient_sequence, occlusion_suppressed_flow, FlowEstimator, MotionMap, ObjectDetector};
use crate::datasets::VideoSequence;
use crate::error::{Result, VccError};
use crate::events::{assign_block, build_flow_stack, build_stc, BlockGrid, StcShape, VideoEvent};
use crate::roi::{extract_rois, BoundingBox, RoiSource, RoiThresholds};
use crate::scoring::{frame_scores, fuse_event, score_events, RawEventScore, ScoreConfig, Variant};
use crate::training::{compute_score_stats, ModelSet, StatsSet};

/// Motion cue used to find motion RoIs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionCue {
    /// Absolute temporal difference of consecutive frames (intensity units).
    Gradient,
    /// Optical-flow magnitude (pixels per frame).
    Flow,
}

/// How video events are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventMode {
    /// One event per extracted RoI.
    Roi,
    /// One event per frame covering the whole frame; this turns type-`D`
    /// completion into plain frame prediction.
    WholeFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractOptions {
    pub thresholds: RoiThresholds,
    pub motion_cue: MotionCue,
    pub event_mode: EventMode,
    pub shape: StcShape,
    pub rows: usize,
    pub cols: usize,
}

/// RoIs and events of one clip.
#[derive(Debug, Clone)]
pub struct ClipEvents {
    pub clip: String,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    /// RoIs per frame, appearance first.
    pub rois: Vec<Vec<(BoundingBox, RoiSource)>>,
    /// Events in frame order; frames before `D - 1` yield none.
    pub events: Vec<VideoEvent>,
}

impl ClipEvents {
    pub fn grid(&self, rows: usize, cols: usize) -> Result<BlockGrid> {
        BlockGrid::new(self.height, self.width, rows, cols)
    }
}

/// Extracts RoIs on every frame and builds their STCs and flow stacks.
/// Whole-frame events are tagged as motion-sourced.
pub fn extract_clip(
    seq: &VideoSequence,
    opts: &ExtractOptions,
    detector: Option<&dyn ObjectDetector>,
    flow: &dyn FlowEstimator,
) -> Result<ClipEvents> {
    opts.shape.validate()?;
    let grid = BlockGrid::new(seq.height(), seq.width(), opts.rows, opts.cols)?;
    let flows: Vec<Array3<f32>> = flow_sequence(seq, flow)?;
    let gradients = match (opts.event_mode, opts.motion_cue) {
        (EventMode::Roi, MotionCue::Gradient) => Some(gradient_sequence(seq)?),
        _ => None,
    };
    let mut rois = Vec::with_capacity(seq.len());
    let mut events = Vec::new();
    for t in 0..seq.len() {
        let boxes = match opts.event_mode {
            EventMode::WholeFrame => vec![(BoundingBox::full_frame(seq.width(), seq.height()), RoiSource::Motion)],
            EventMode::Roi => {
                let motion = match &gradients {
                    Some(g) => g[t].clone(),
                    None => MotionMap::flow(occlusion_suppressed_flow(t.checked_sub(1).map(|p| &flows[p]), &flows[t])?),
                };
                extract_rois(&seq.frames[t], t, &motion, detector, &opts.thresholds)?.union()
            }
        };
        for &(bbox, source) in &boxes {
            let Some(mut stc) = build_stc(seq, bbox, t, opts.shape)? else {
                continue;
            };
            let flow = build_flow_stack(&flows, bbox, t, opts.shape)?.expect("same geometry as the STC");
            stc.block_idx = assign_block(&bbox, &grid);
            events.push(VideoEvent { stc, flow, source });
        }
        rois.push(boxes);
    }
    Ok(ClipEvents {
        clip: seq.id.clone(),
        n_frames: seq.len(),
        height: seq.height(),
        width: seq.width(),
        rois,
        events,
    })
}

/// Groups events of several clips by block, preserving order.
pub fn events_by_block(clips: &[ClipEvents], n_blocks: usize) -> Result<Vec<Vec<VideoEvent>>> {
    let mut out = vec![Vec::new(); n_blocks];
    for c in clips {
        for e in &c.events {
            let b = e.stc.block_idx;
            if b >= n_blocks {
                return Err(VccError::InvalidInput(format!("event block {b} outside a grid of {n_blocks}")));
            }
            out[b].push(e.clone());
        }
    }
    Ok(out)
}

/// Training-set statistics of the per-type scores, computed by scoring the
/// training events with the networks that serve them.
pub fn training_stats(
    models: &ModelSet,
    by_block: &[Vec<VideoEvent>],
    types: &[usize],
    cfg: &ScoreConfig,
) -> Result<StatsSet> {
    let collect = |raws: &[RawEventScore]| -> Vec<Vec<(f64, f64)>> {
        raws.iter()
            .map(|r| r.appearance.iter().copied().zip(r.motion.iter().copied()).collect())
            .collect()
    };
    let mut stats = StatsSet::default();
    for (b, events) in by_block.iter().enumerate() {
        if events.is_empty() || !models.has_block(b) {
            continue;
        }
        let raws = score_events(models, events, types, cfg)?;
        stats.blocks.insert(b, compute_score_stats(types, &collect(&raws)));
    }
    if models.has_fallback() {
        // Score pooled events with the fallback nets by relabeling them to a
        // block that has no networks of its own.
        let spare = (0..).find(|b| !models.has_block(*b)).expect("finitely many blocks");
        let pooled: Vec<VideoEvent> = by_block
            .iter()
            .flatten()
            .map(|e| {
                let mut e = e.clone();
                e.stc.block_idx = spare;
                e
            })
            .collect();
        let raws = score_events(models, &pooled, types, cfg)?;
        stats.fallback = Some(compute_score_stats(types, &collect(&raws)));
    }
    Ok(stats)
}

/// Fused event scores of a clip and its raw (unrectified) frame scores.
pub fn clip_frame_scores(
    raws: &[RawEventScore],
    stats: &StatsSet,
    n_frames: usize,
    depth: usize,
    types: &[usize],
    cfg: &ScoreConfig,
    variant: Variant,
) -> Result<Vec<f64>> {
    let mut fused = Vec::with_capacity(raws.len());
    for r in raws {
        let s = stats
            .get(r.block)
            .ok_or_else(|| VccError::Config(format!("no score statistics for block {}", r.block)))?;
        fused.push((r.frame_idx, fuse_event(r, s, types, cfg, variant)));
    }
    Ok(frame_scores(n_frames, &fused, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::BlockMatchingFlow;
    use crate::datasets::{generate_synthetic, presets};

    fn opts(mode: EventMode) -> ExtractOptions {
        ExtractOptions {
            thresholds: RoiThresholds {
                t_b: 20.0,
                ..RoiThresholds::default()
            },
            motion_cue: MotionCue::Gradient,
            event_mode: mode,
            shape: StcShape {
                depth: 3,
                height: 8,
                width: 8,
            },
            rows: 2,
            cols: 2,
        }
    }

    #[test]
    fn whole_frame_events_cover_every_frame() {
        let (seq, _) = generate_synthetic(&presets::training_clip(0, 6)).unwrap();
        let c = extract_clip(&seq, &opts(EventMode::WholeFrame), None, &BlockMatchingFlow::default()).unwrap();
        assert_eq!(c.events.len(), 4);
        assert!(c.events.iter().all(|e| e.stc.source_box == BoundingBox::full_frame(seq.width(), seq.height())));
        assert_eq!(c.events[0].stc.frame_idx, 2);
    }

    #[test]
    fn roi_events_are_grouped_by_block() {
        let (seq, _) = generate_synthetic(&presets::training_clip(1, 30)).unwrap();
        let c = extract_clip(&seq, &opts(EventMode::Roi), None, &BlockMatchingFlow::default()).unwrap();
        assert!(!c.events.is_empty());
        let groups = events_by_block(std::slice::from_ref(&c), 4).unwrap();
        assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), c.events.len());
        for (b, g) in groups.iter().enumerate() {
            assert!(g.iter().all(|e| e.stc.block_idx == b));
        }
        assert!(events_by_block(&[c], 1).is_err() || groups.iter().skip(1).all(Vec::is_empty));
    }
}
