//! Video events: spatio-temporal cubes (STCs), their flow stacks, and the
//! block grid used to model events per spatial region.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::datasets::{Frame, VideoSequence};
use crate::error::{Result, VccError};
use crate::image_ops::{crop_resize_f32, crop_resize_u8};
use crate::roi::{BoundingBox, RoiSource};

/// Temporal depth and patch size of an STC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StcShape {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for StcShape {
    fn default() -> Self {
        StcShape {
            depth: 5,
            height: 32,
            width: 32,
        }
    }
}

impl StcShape {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.height == 0 || self.width == 0 {
            return Err(VccError::Config(format!("invalid STC shape {self:?}")));
        }
        Ok(())
    }
}

/// `D` resized patches of one RoI, `D x h x w x 3`. Patch `d` comes from
/// frame `frame_idx + 1 - D + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stc {
    pub patches: Array4<u8>,
    pub source_box: BoundingBox,
    pub frame_idx: usize,
    pub block_idx: usize,
}

impl Stc {
    pub fn depth(&self) -> usize {
        self.patches.dim().0
    }

    /// Frame index of every patch, oldest first.
    pub fn frame_indices(&self) -> Vec<usize> {
        let d = self.depth();
        (0..d).map(|k| self.frame_idx + 1 + k - d).collect()
    }
}

/// Flow patches aligned 1:1 with an STC, `D x h x w x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    pub patches: Array4<f32>,
}

/// One extracted event: its cube, its flow, and which cue found it.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEvent {
    pub stc: Stc,
    pub flow: FlowStack,
    pub source: RoiSource,
}

fn check_box(b: &BoundingBox, w: usize, h: usize) -> Result<()> {
    if b.fits(w, h) {
        Ok(())
    } else {
        Err(VccError::InvalidInput(format!("box {b:?} exceeds a {w}x{h} frame")))
    }
}

/// Builds the STC ending at `frame_idx`, cropping the same box in all `D`
/// frames. Returns `Ok(None)` when fewer than `D - 1` frames precede
/// `frame_idx`; such events are skipped rather than padded.
pub fn build_stc(
    seq: &VideoSequence,
    bbox: BoundingBox,
    frame_idx: usize,
    shape: StcShape,
) -> Result<Option<Stc>> {
    let d = shape.depth;
    if frame_idx + 1 < d {
        return Ok(None);
    }
    if frame_idx >= seq.len() {
        return Err(VccError::InvalidInput(format!(
            "frame {frame_idx} beyond clip of {} frames",
            seq.len()
        )));
    }
    check_box(&bbox, seq.width(), seq.height())?;
    let mut patches = Array4::<u8>::zeros((d, shape.height, shape.width, 3));
    for k in 0..d {
        let frame: &Frame = &seq.frames[frame_idx + 1 + k - d];
        let p = crop_resize_u8(frame.view(), &bbox, shape.height, shape.width);
        patches.slice_mut(s![k, .., .., ..]).assign(&p);
    }
    Ok(Some(Stc {
        patches,
        source_box: bbox,
        frame_idx,
        block_idx: 0,
    }))
}

/// Flow counterpart of [`build_stc`] with identical geometry. Flow values are
/// not rescaled with the patch: displacements stay in source pixels.
pub fn build_flow_stack(
    flows: &[Array3<f32>],
    bbox: BoundingBox,
    frame_idx: usize,
    shape: StcShape,
) -> Result<Option<FlowStack>> {
    let d = shape.depth;
    if frame_idx + 1 < d {
        return Ok(None);
    }
    if frame_idx >= flows.len() {
        return Err(VccError::InvalidInput(format!(
            "frame {frame_idx} beyond {} flow maps",
            flows.len()
        )));
    }
    let (h, w, _) = flows[frame_idx].dim();
    check_box(&bbox, w, h)?;
    let mut patches = Array4::<f32>::zeros((d, shape.height, shape.width, 2));
    for k in 0..d {
        let p = crop_resize_f32(flows[frame_idx + 1 + k - d].view(), &bbox, shape.height, shape.width);
        patches.slice_mut(s![k, .., .., ..]).assign(&p);
    }
    Ok(Some(FlowStack { patches }))
}

/// Uniform partition of a frame into `rows x cols` blocks, indexed row-major.
/// Boundaries sit at `floor(k * H / rows)`, so block sizes differ by at most
/// one pixel when the frame size is not divisible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows > height || cols > width {
            return Err(VccError::Config(format!(
                "cannot divide a {height}x{width} frame into {rows}x{cols} blocks"
            )));
        }
        Ok(BlockGrid {
            height,
            width,
            rows,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row_edge(&self, k: usize) -> usize {
        k * self.height / self.rows
    }

    fn col_edge(&self, k: usize) -> usize {
        k * self.width / self.cols
    }

    pub fn block_rect(&self, idx: usize) -> BoundingBox {
        let (r, c) = (idx / self.cols, idx % self.cols);
        BoundingBox {
            x1: self.col_edge(c),
            y1: self.row_edge(r),
            x2: self.col_edge(c + 1),
            y2: self.row_edge(r + 1),
        }
    }
}

/// Block with maximal overlap area with the box.
///
/// On a grid whose blocks are all the same size this is the block holding
/// the box center. When the frame size is not divisible by the grid, block
/// sizes differ by one pixel and the center rule can pick a neighbor of the
/// true argmax, so overlaps are compared exactly. Overlap area factors into
/// a row term and a column term, so each axis is resolved on its own. Ties
/// go to the center block, whose boundary rule sends a center lying exactly
/// on an edge to the lower index.
pub fn assign_block(bbox: &BoundingBox, grid: &BlockGrid) -> usize {
    let (cx2, cy2) = bbox.doubled_center();
    let center_row = (1..grid.rows).filter(|&k| 2 * grid.row_edge(k) < cy2).count();
    let center_col = (1..grid.cols).filter(|&k| 2 * grid.col_edge(k) < cx2).count();
    let row = axis_argmax(grid.rows, center_row, |k| {
        overlap_1d(bbox.y1, bbox.y2, grid.row_edge(k), grid.row_edge(k + 1))
    });
    let col = axis_argmax(grid.cols, center_col, |k| {
        overlap_1d(bbox.x1, bbox.x2, grid.col_edge(k), grid.col_edge(k + 1))
    });
    row * grid.cols + col
}

fn overlap_1d(a0: usize, a1: usize, b0: usize, b1: usize) -> usize {
    a1.min(b1).saturating_sub(a0.max(b0))
}

fn axis_argmax(n: usize, preferred: usize, overlap: impl Fn(usize) -> usize) -> usize {
    let mut best = preferred;
    let mut best_v = overlap(preferred);
    for k in 0..n {
        let v = overlap(k);
        if v > best_v {
            (best, best_v) = (k, v);
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Archives
// ---------------------------------------------------------------------------

/// Header of an event archive file.
///
/// Layout: magic `VCCE`, u32 LE header length, JSON header, then `count`
/// records of: u32 frame_idx, 4 x u32 box (x1 y1 x2 y2), u8 source
/// (0 = appearance, 1 = motion), `D*h*w*3` u8 patches, `D*h*w*2` f32 LE flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub clip: String,
    pub block: usize,
    pub shape: StcShape,
    pub count: usize,
    pub config_hash: String,
}

const ARCHIVE_MAGIC: &[u8; 4] = b"VCCE";

pub fn write_archive(path: &Path, header: &ArchiveHeader, events: &[VideoEvent]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| VccError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let io = |e| VccError::io(&tmp, e);
    let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
    let json = serde_json::to_vec(header).expect("header serializes");
    w.write_all(ARCHIVE_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(json.len() as u32).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let expect_p = (header.shape.depth, header.shape.height, header.shape.width, 3);
    for ev in events {
        if ev.stc.patches.dim() != expect_p {
            return Err(VccError::shape(expect_p, ev.stc.patches.dim()));
        }
        let b = ev.stc.source_box;
        w.write_u32::<LittleEndian>(ev.stc.frame_idx as u32).map_err(io)?;
        for v in [b.x1, b.y1, b.x2, b.y2] {
            w.write_u32::<LittleEndian>(v as u32).map_err(io)?;
        }
        w.write_u8(match ev.source {
            RoiSource::Appearance => 0,
            RoiSource::Motion => 1,
        })
        .map_err(io)?;
        let bytes: Vec<u8> = ev.stc.patches.iter().copied().collect();
        w.write_all(&bytes).map_err(io)?;
        for &v in ev.flow.patches.iter() {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| VccError::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<(ArchiveHeader, Vec<VideoEvent>)> {
    let fmt = |reason: String| VccError::format(path, reason);
    let mut r = BufReader::new(File::open(path).map_err(|e| VccError::io(path, e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| fmt(e.to_string()))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(fmt("not an event archive".into()));
    }
    let len = r.read_u32::<LittleEndian>().map_err(|e| fmt(e.to_string()))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| fmt(e.to_string()))?;
    let header: ArchiveHeader = serde_json::from_slice(&json).map_err(|e| fmt(e.to_string()))?;
    let StcShape { depth, height, width } = header.shape;
    let mut events = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let mut read = || -> std::io::Result<VideoEvent> {
            let frame_idx = r.read_u32::<LittleEndian>()? as usize;
            let mut c = [0usize; 4];
            for v in c.iter_mut() {
                *v = r.read_u32::<LittleEndian>()? as usize;
            }
            let source = if r.read_u8()? == 0 {
                RoiSource::Appearance
            } else {
                RoiSource::Motion
            };
            let mut bytes = vec![0u8; depth * height * width * 3];
            r.read_exact(&mut bytes)?;
            let mut flow = vec![0f32; depth * height * width * 2];
            r.read_f32_into::<LittleEndian>(&mut flow)?;
            Ok(VideoEvent {
                stc: Stc {
                    patches: Array4::from_shape_vec((depth, height, width, 3), bytes).expect("sized"),
                    source_box: BoundingBox {
                        x1: c[0],
                        y1: c[1],
                        x2: c[2],
                        y2: c[3],
                    },
                    frame_idx,
                    block_idx: header.block,
                },
                flow: FlowStack {
                    patches: Array4::from_shape_vec((depth, height, width, 2), flow).expect("sized"),
                },
                source,
            })
        };
        events.push(read().map_err(|e| fmt(format!("truncated record: {e}")))?);
    }
    Ok((header, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(d: usize, h: usize, w: usize) -> StcShape {
        StcShape {
            depth: d,
            height: h,
            width: w,
        }
    }

    fn ramp_sequence(n: usize, h: usize, w: usize) -> VideoSequence {
        let frames = (0..n)
            .map(|t| Frame::from_shape_fn((h, w, 3), |(y, x, c)| ((t * 40 + y * 3 + x + c) % 256) as u8))
            .collect();
        VideoSequence::new("ramp", frames).unwrap()
    }

    fn bx(x1: usize, y1: usize, x2: usize, y2: usize) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn default_shape_is_32x32x3x5() {
        let seq = ramp_sequence(6, 64, 64);
        let stc = build_stc(&seq, bx(3, 5, 50, 40), 5, StcShape::default()).unwrap().unwrap();
        assert_eq!(stc.patches.dim(), (5, 32, 32, 3));
        assert_eq!(stc.frame_indices(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn static_scene_patches_identical() {
        let f = Frame::from_shape_fn((40, 40, 3), |(y, x, c)| (y * 5 + x * 2 + c) as u8);
        let seq = VideoSequence::new("s", vec![f; 5]).unwrap();
        let stc = build_stc(&seq, bx(2, 4, 30, 33), 4, shape(5, 16, 16)).unwrap().unwrap();
        for k in 1..5 {
            assert_eq!(stc.patches.slice(s![k, .., .., ..]), stc.patches.slice(s![0, .., .., ..]));
        }
    }

    #[test]
    fn exact_size_crop_is_bit_exact() {
        let seq = ramp_sequence(5, 40, 50);
        let b = bx(7, 3, 39, 35);
        let stc = build_stc(&seq, b, 4, shape(5, 32, 32)).unwrap().unwrap();
        for k in 0..5 {
            let crop = seq.frames[k].slice(s![3..35, 7..39, ..]);
            assert_eq!(stc.patches.slice(s![k, .., .., ..]), crop);
        }
    }

    #[test]
    fn early_frames_are_skipped() {
        let seq = ramp_sequence(5, 20, 20);
        assert!(build_stc(&seq, bx(0, 0, 10, 10), 3, shape(5, 8, 8)).unwrap().is_none());
        assert!(build_stc(&seq, bx(0, 0, 30, 10), 4, shape(5, 8, 8)).is_err());
    }

    #[test]
    fn flow_stack_geometry() {
        let zero = vec![Array3::<f32>::zeros((20, 30, 2)); 6];
        let fs = build_flow_stack(&zero, bx(1, 1, 19, 13), 5, shape(5, 8, 8)).unwrap().unwrap();
        assert!(fs.patches.iter().all(|&v| v == 0.0));

        let mut constant = Array3::<f32>::zeros((20, 30, 2));
        constant.slice_mut(s![.., .., 0]).fill(2.0);
        let flows = vec![constant; 6];
        let fs = build_flow_stack(&flows, bx(4, 2, 27, 19), 5, shape(5, 32, 32)).unwrap().unwrap();
        for p in fs.patches.slice(s![.., .., .., 0]).iter() {
            assert!((p - 2.0).abs() < 1e-6);
        }
        assert!(fs.patches.slice(s![.., .., .., 1]).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn flow_stack_aligns_with_stc_frames() {
        let flows: Vec<Array3<f32>> = (0..8).map(|t| Array3::from_elem((10, 10, 2), t as f32)).collect();
        let fs = build_flow_stack(&flows, bx(0, 0, 10, 10), 6, shape(5, 4, 4)).unwrap().unwrap();
        for k in 0..5 {
            assert_eq!(fs.patches[[k, 0, 0, 0]], (2 + k) as f32);
        }
    }

    #[test]
    fn block_assignment_examples() {
        let grid = BlockGrid::new(240, 320, 2, 1).unwrap();
        // Box centered at (x=100, y=60).
        assert_eq!(assign_block(&bx(90, 50, 110, 70), &grid), 0);
        assert_eq!(assign_block(&bx(90, 150, 110, 190), &grid), 1);
        let single = BlockGrid::new(240, 320, 1, 1).unwrap();
        assert_eq!(assign_block(&bx(0, 0, 320, 240), &single), 0);
        // Center exactly on the boundary y = 120 goes to the lower index.
        assert_eq!(assign_block(&bx(0, 100, 10, 140), &grid), 0);
    }

    #[test]
    fn uneven_blocks_use_true_overlap() {
        // Column edges at 0 32 64 97 129 ...: the center x = 114.5 lies in
        // column 3, but column 2 (64..97) overlaps the box by 33 > 32.
        let grid = BlockGrid::new(99, 259, 2, 8).unwrap();
        assert_eq!(assign_block(&bx(43, 91, 186, 93), &grid), 10);
    }

    proptest! {
        #[test]
        fn assignment_maximizes_overlap(
            h in 1usize..200, w in 1usize..200, r in 1usize..7, c in 1usize..7,
            a in 0.0f64..1.0, b in 0.0f64..1.0, e in 0.0f64..1.0, f in 0.0f64..1.0,
        ) {
            let grid = BlockGrid::new(h, w, r.min(h), c.min(w)).unwrap();
            let x1 = (a * w as f64) as usize % w;
            let y1 = (b * h as f64) as usize % h;
            let x2 = x1 + 1 + (e * (w - x1 - 1) as f64) as usize;
            let y2 = y1 + 1 + (f * (h - y1 - 1) as f64) as usize;
            let bb = bx(x1, y1, x2, y2);
            let best = (0..grid.len()).map(|k| bb.intersection_area(&grid.block_rect(k))).max().unwrap();
            prop_assert_eq!(bb.intersection_area(&grid.block_rect(assign_block(&bb, &grid))), best);
        }
    }

    #[test]
    fn blocks_tile_frame() {
        let grid = BlockGrid::new(158, 238, 4, 3).unwrap();
        let mut covered = ndarray::Array2::<u8>::zeros((158, 238));
        for k in 0..grid.len() {
            let r = grid.block_rect(k);
            assert!(r.height().abs_diff(158 / 4) <= 1 && r.width().abs_diff(238 / 3) <= 1);
            covered.slice_mut(s![r.y1..r.y2, r.x1..r.x2]).mapv_inplace(|v| v + 1);
        }
        assert!(covered.iter().all(|&v| v == 1));
    }

    #[test]
    fn archive_round_trip() {
        let seq = ramp_sequence(6, 20, 24);
        let flows: Vec<Array3<f32>> = (0..6).map(|t| Array3::from_elem((20, 24, 2), t as f32 * 0.5)).collect();
        let sh = shape(3, 4, 4);
        let events: Vec<VideoEvent> = [(bx(0, 0, 8, 8), 4), (bx(5, 5, 20, 18), 5)]
            .iter()
            .map(|&(b, t)| VideoEvent {
                stc: build_stc(&seq, b, t, sh).unwrap().unwrap(),
                flow: build_flow_stack(&flows, b, t, sh).unwrap().unwrap(),
                source: RoiSource::Motion,
            })
            .collect();
        let header = ArchiveHeader {
            clip: "ramp".into(),
            block: 0,
            shape: sh,
            count: events.len(),
            config_hash: "abc".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.b0.vcce");
        write_archive(&path, &header, &events).unwrap();
        let (h2, e2) = read_archive(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(e2, events);
    }

    proptest! {
        #[test]
        fn stc_frame_indices_increase(t in 4usize..20) {
            let seq = ramp_sequence(20, 12, 12);
            let stc = build_stc(&seq, bx(0, 0, 12, 12), t, shape(5, 4, 4)).unwrap().unwrap();
            let idx = stc.frame_indices();
            prop_assert!(idx.windows(2).all(|w| w[1] == w[0] + 1));
            prop_assert_eq!(*idx.last().unwrap(), t);
        }
    }
}
