//! Video ingestion, ground truth, and the synthetic moving-shapes dataset.
//!
//! On-disk layout (fixed):
//!
//! ```text
//! <root>/<split>/<clip_id>/000000.png ...   frames, lexicographic = temporal order
//! <root>/gt/<clip_id>.labels                one 0/1 per line, one line per frame
//! <root>/gt/<clip_id>/000000.png ...        optional per-frame masks (nonzero = anomalous)
//! ```
//!
//! Frame names must be zero-padded so that lexicographic order is temporal
//! order. Grayscale inputs are replicated to three channels at load time.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VccError};

/// One `H x W x 3` frame with 8-bit intensities.
pub type Frame = Array3<u8>;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub frame_rate: Option<f64>,
}

impl VideoSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| VccError::InvalidInput("video sequence has no frames".into()))?;
        let dim = first.dim();
        if dim.2 != 3 {
            return Err(VccError::shape((dim.0, dim.1, 3), dim));
        }
        if let Some((idx, f)) = frames.iter().enumerate().find(|(_, f)| f.dim() != dim) {
            return Err(VccError::InvalidInput(format!(
                "frame {idx} has shape {:?}, expected {:?}",
                f.dim(),
                dim
            )));
        }
        Ok(VideoSequence {
            id: id.into(),
            frames,
            frame_rate: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].dim().0
    }

    pub fn width(&self) -> usize {
        self.frames[0].dim().1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub frame_labels: Vec<bool>,
    pub pixel_masks: Option<Vec<Array2<bool>>>,
}

impl GroundTruth {
    pub fn new(frame_labels: Vec<bool>, pixel_masks: Option<Vec<Array2<bool>>>) -> Result<Self> {
        if let Some(masks) = &pixel_masks {
            if masks.len() != frame_labels.len() {
                return Err(VccError::InvalidInput(format!(
                    "{} masks for {} frame labels",
                    masks.len(),
                    frame_labels.len()
                )));
            }
            for (idx, (m, &label)) in masks.iter().zip(&frame_labels).enumerate() {
                if !label && m.iter().any(|&p| p) {
                    return Err(VccError::InvalidInput(format!(
                        "frame {idx} has a nonempty mask but label 0"
                    )));
                }
            }
        }
        Ok(GroundTruth {
            frame_labels,
            pixel_masks,
        })
    }

    pub fn len(&self) -> usize {
        self.frame_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_labels.is_empty()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| VccError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|source| VccError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
        .expect("rgb buffer matches its dimensions"))
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w, _) = frame.dim();
    let data: Vec<u8> = frame.iter().copied().collect();
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, data)
        .expect("frame buffer matches its dimensions");
    img.save(path).map_err(|source| VccError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes a video container into frames. Codecs are never implemented
/// in-process; see [`FfmpegDecoder`].
pub trait VideoDecoder {
    fn decode(&self, path: &Path) -> Result<Vec<Frame>>;
}

/// Delegates decoding to an `ffmpeg` binary on `PATH`, extracting PNG frames
/// into a temporary directory.
#[derive(Debug, Default, Clone)]
pub struct FfmpegDecoder;

impl VideoDecoder for FfmpegDecoder {
    fn decode(&self, path: &Path) -> Result<Vec<Frame>> {
        let tmp = std::env::temp_dir().join(format!("vcc-decode-{}", std::process::id()));
        fs::create_dir_all(&tmp).map_err(|e| VccError::io(&tmp, e))?;
        let status = Command::new("ffmpeg")
            .arg("-loglevel")
            .arg("error")
            .arg("-i")
            .arg(path)
            .arg(tmp.join("%06d.png"))
            .status()
            .map_err(|e| {
                VccError::AdapterUnavailable(format!(
                    "cannot run ffmpeg to decode {}: {e}; extract frames to a directory instead",
                    path.display()
                ))
            })?;
        if !status.success() {
            let _ = fs::remove_dir_all(&tmp);
            return Err(VccError::AdapterUnavailable(format!(
                "ffmpeg failed to decode {} ({status})",
                path.display()
            )));
        }
        let frames = sorted_images(&tmp)?
            .iter()
            .map(|p| load_frame(p))
            .collect::<Result<Vec<_>>>();
        let _ = fs::remove_dir_all(&tmp);
        frames
    }
}

/// Loads a clip from a directory of images or, failing that, a video file.
pub fn load_sequence(path: &Path) -> Result<VideoSequence> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let frames = if path.is_dir() {
        let files = sorted_images(path)?;
        if files.is_empty() {
            return Err(VccError::InvalidInput(format!(
                "no image files in {}",
                path.display()
            )));
        }
        files.iter().map(|p| load_frame(p)).collect::<Result<Vec<_>>>()?
    } else if path.is_file() {
        FfmpegDecoder.decode(path)?
    } else {
        return Err(VccError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    };
    VideoSequence::new(id, frames)
}

pub fn frame_file_name(idx: usize) -> String {
    format!("{idx:06}.png")
}

pub fn save_sequence(seq: &VideoSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VccError::io(dir, e))?;
    for (idx, frame) in seq.frames.iter().enumerate() {
        save_frame(frame, &dir.join(frame_file_name(idx)))?;
    }
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| VccError::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| match l {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(VccError::format(
                path,
                format!("line {}: expected 0 or 1, got {other:?}", i + 1),
            )),
        })
        .collect()
}

pub fn save_labels(labels: &[bool], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 2);
    for &l in labels {
        text.push_str(if l { "1\n" } else { "0\n" });
    }
    fs::write(path, text).map_err(|e| VccError::io(path, e))
}

fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|source| VccError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .expect("mask buffer matches its dimensions")
        .mapv(|v| v > 0))
}

fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let data: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("mask buffer matches dimensions");
    img.save(path).map_err(|source| VccError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Paths of a dataset stored in the fixed layout.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn clip_dir(&self, split: &str, clip: &str) -> PathBuf {
        self.root.join(split).join(clip)
    }

    pub fn labels_path(&self, clip: &str) -> PathBuf {
        self.root.join("gt").join(format!("{clip}.labels"))
    }

    pub fn mask_dir(&self, clip: &str) -> PathBuf {
        self.root.join("gt").join(clip)
    }

    /// Clip ids of a split, sorted.
    pub fn clips(&self, split: &str) -> Result<Vec<String>> {
        let dir = self.root.join(split);
        let mut clips: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| VccError::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        clips.sort();
        Ok(clips)
    }

    pub fn load_clip(&self, split: &str, clip: &str) -> Result<VideoSequence> {
        let mut seq = load_sequence(&self.clip_dir(split, clip))?;
        seq.id = clip.to_string();
        Ok(seq)
    }

    /// Labels are required; masks are loaded when the mask directory exists.
    pub fn load_ground_truth(&self, clip: &str, n_frames: usize) -> Result<GroundTruth> {
        let path = self.labels_path(clip);
        let labels = load_labels(&path)?;
        if labels.len() != n_frames {
            return Err(VccError::format(
                &path,
                format!("{} labels for {n_frames} frames", labels.len()),
            ));
        }
        let mask_dir = self.mask_dir(clip);
        let masks = if mask_dir.is_dir() {
            let files = sorted_images(&mask_dir)?;
            if files.len() != n_frames {
                return Err(VccError::format(
                    &mask_dir,
                    format!("{} masks for {n_frames} frames", files.len()),
                ));
            }
            Some(files.iter().map(|p| load_mask(p)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        GroundTruth::new(labels, masks)
    }

    pub fn save_clip(
        &self,
        split: &str,
        seq: &VideoSequence,
        gt: Option<&GroundTruth>,
    ) -> Result<()> {
        save_sequence(seq, &self.clip_dir(split, &seq.id))?;
        if let Some(gt) = gt {
            let gt_dir = self.root.join("gt");
            fs::create_dir_all(&gt_dir).map_err(|e| VccError::io(&gt_dir, e))?;
            save_labels(&gt.frame_labels, &self.labels_path(&seq.id))?;
            if let Some(masks) = &gt.pixel_masks {
                let dir = self.mask_dir(&seq.id);
                fs::create_dir_all(&dir).map_err(|e| VccError::io(&dir, e))?;
                for (idx, m) in masks.iter().enumerate() {
                    save_mask(m, &dir.join(frame_file_name(idx)))?;
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic moving shapes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disc,
}

/// A moving textured shape. With `period` set, a fresh instance (with a
/// fresh texture) is spawned every `period` frames from `first_frame` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub shape: Shape,
    /// Side length (square) or diameter (disc) in pixels.
    pub size: usize,
    /// Displacement in pixels per frame, `(dx, dy)`.
    pub velocity: (i32, i32),
    /// Top-left corner at the instance's spawn frame; may lie off-canvas.
    pub start: (i32, i32),
    pub first_frame: usize,
    /// Last rendered frame (inclusive); `None` means until the clip ends.
    pub last_frame: Option<usize>,
    pub period: Option<usize>,
}

impl Motif {
    fn kind(&self) -> (Shape, usize, (i32, i32)) {
        (self.shape, self.size, self.velocity)
    }

    fn covers(&self, dy: usize, dx: usize) -> bool {
        match self.shape {
            Shape::Square => dy < self.size && dx < self.size,
            Shape::Disc => {
                let r = self.size as f64 / 2.0;
                let cy = dy as f64 + 0.5 - r;
                let cx = dx as f64 + 0.5 - r;
                cy * cy + cx * cx <= r * r
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: u8,
    /// Inclusive intensity range of object textures.
    pub texture_range: (u8, u8),
    /// Side of the square texture cells in pixels.
    pub texture_cell: usize,
    /// Uniform per-pixel sensor noise amplitude (0 disables).
    pub noise: u8,
    pub normal: Vec<Motif>,
    pub anomalies: Vec<Motif>,
    pub seed: u64,
}

struct Instance<'a> {
    motif: &'a Motif,
    spawn: usize,
    texture: Array2<u8>,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(VccError::InvalidInput("empty synthetic canvas".into()));
        }
        for m in self.normal.iter().chain(&self.anomalies) {
            if m.size == 0 || m.size > self.height.min(self.width) {
                return Err(VccError::InvalidInput(format!(
                    "motif of size {} does not fit a {}x{} canvas",
                    m.size, self.height, self.width
                )));
            }
            if m.period == Some(0) {
                return Err(VccError::InvalidInput("motif period must be positive".into()));
            }
        }
        for a in &self.anomalies {
            if self.normal.iter().any(|n| n.kind() == a.kind()) {
                return Err(VccError::InvalidInput(format!(
                    "anomaly motif {:?} duplicates a normal motif",
                    a.kind()
                )));
            }
        }
        if self.texture_cell == 0 || self.texture_range.0 > self.texture_range.1 {
            return Err(VccError::InvalidInput("invalid texture parameters".into()));
        }
        Ok(())
    }

    fn instances<'a>(&self, motifs: &'a [Motif], rng: &mut ChaCha8Rng) -> Vec<Instance<'a>> {
        let mut out = Vec::new();
        for m in motifs {
            let last = m.last_frame.unwrap_or(self.frames - 1).min(self.frames - 1);
            let mut spawn = m.first_frame;
            while spawn <= last {
                let cells = m.size.div_ceil(self.texture_cell);
                let (lo, hi) = self.texture_range;
                let grid = Array2::from_shape_fn((cells, cells), |_| rng.random_range(lo..=hi));
                let cell = self.texture_cell;
                let texture = Array2::from_shape_fn((m.size, m.size), |(y, x)| grid[[y / cell, x / cell]]);
                out.push(Instance {
                    motif: m,
                    spawn,
                    texture,
                });
                match m.period {
                    Some(p) => spawn += p,
                    None => break,
                }
            }
        }
        out
    }
}

/// Draws the instance into `frame` at time `t`; returns whether any pixel
/// landed on the canvas. Covered pixels are recorded in `mask` if given.
fn draw(
    inst: &Instance,
    t: usize,
    last: usize,
    frame: &mut Frame,
    mut mask: Option<&mut Array2<bool>>,
) -> bool {
    if t < inst.spawn || t > last {
        return false;
    }
    let m = inst.motif;
    let dt = (t - inst.spawn) as i32;
    let x0 = m.start.0 + m.velocity.0 * dt;
    let y0 = m.start.1 + m.velocity.1 * dt;
    let (h, w, _) = frame.dim();
    let mut visible = false;
    for dy in 0..m.size {
        for dx in 0..m.size {
            if !m.covers(dy, dx) {
                continue;
            }
            let (y, x) = (y0 + dy as i32, x0 + dx as i32);
            if y < 0 || x < 0 || y >= h as i32 || x >= w as i32 {
                continue;
            }
            let (y, x) = (y as usize, x as usize);
            let v = inst.texture[[dy, dx]];
            for c in 0..3 {
                frame[[y, x, c]] = v;
            }
            if let Some(mask) = mask.as_deref_mut() {
                mask[[y, x]] = true;
            }
            visible = true;
        }
    }
    visible
}

/// Renders the synthetic clip and its exact ground truth.
///
/// A frame is labeled anomalous exactly when some anomaly instance has at
/// least one visible pixel on it; its mask is the set of those pixels.
/// Anomalies are drawn on top of normal motifs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(VideoSequence, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = spec.instances(&spec.normal, &mut rng);
    let anomalies = spec.instances(&spec.anomalies, &mut rng);
    let last_of = |inst: &Instance| {
        inst.motif
            .last_frame
            .unwrap_or(spec.frames - 1)
            .min(spec.frames - 1)
    };

    let mut frames = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut frame = Frame::from_elem((spec.height, spec.width, 3), spec.background);
        if spec.noise > 0 {
            let a = spec.noise as i16;
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let v = (spec.background as i16 + rng.random_range(-a..=a)).clamp(0, 255) as u8;
                    for c in 0..3 {
                        frame[[y, x, c]] = v;
                    }
                }
            }
        }
        for inst in &normal {
            draw(inst, t, last_of(inst), &mut frame, None);
        }
        let mut mask = Array2::from_elem((spec.height, spec.width), false);
        let mut anomalous = false;
        for inst in &anomalies {
            anomalous |= draw(inst, t, last_of(inst), &mut frame, Some(&mut mask));
        }
        frames.push(frame);
        labels.push(anomalous);
        masks.push(mask);
    }
    let seq = VideoSequence::new(spec.id.clone(), frames)?;
    let gt = GroundTruth::new(labels, Some(masks))?;
    Ok((seq, gt))
}

/// Presets used by the shipped synthetic configuration and the acceptance
/// suite: horizontal streams of slowly moving textured squares; anomalies
/// are fast squares crossing the scene.
pub mod presets {
    use super::*;

    pub const HEIGHT: usize = 64;
    pub const WIDTH: usize = 96;
    pub const OBJECT: usize = 16;

    fn stream(lane_y: i32, speed: i32, period: usize, phase: usize) -> Motif {
        let start_x = if speed > 0 { -(OBJECT as i32) } else { WIDTH as i32 };
        Motif {
            shape: Shape::Square,
            size: OBJECT,
            velocity: (speed, 0),
            start: (start_x, lane_y),
            first_frame: phase,
            last_frame: None,
            period: Some(period),
        }
    }

    fn base(id: &str, frames: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            id: id.to_string(),
            height: HEIGHT,
            width: WIDTH,
            frames,
            background: 30,
            texture_range: (90, 250),
            texture_cell: 2,
            noise: 0,
            normal: vec![stream(4, 2, 48, 0), stream(44, -2, 56, 20)],
            anomalies: Vec::new(),
            seed,
        }
    }

    /// Normal-only training clip.
    pub fn training_clip(index: usize, frames: usize) -> SyntheticSpec {
        let mut spec = base(&format!("train_{index:02}"), frames, 1000 + index as u64);
        // Shift stream phases so clips differ in layout as well as texture.
        for (k, m) in spec.normal.iter_mut().enumerate() {
            m.first_frame = (m.first_frame + 13 * index * (k + 1)) % m.period.unwrap_or(1);
        }
        spec
    }

    /// Frames between consecutive fast crossers of a test clip.
    pub const CROSSER_SPACING: usize = 14;

    /// Test clip in which `crossers` fast squares cross the middle lane one
    /// after another, the first spawned at `anomaly_start`. Consecutive
    /// crossers overlap in time, so the anomaly forms one contiguous stretch.
    pub fn test_clip(index: usize, frames: usize, anomaly_start: usize, crossers: usize) -> SyntheticSpec {
        let mut spec = base(&format!("test_{index:02}"), frames, 5000 + index as u64);
        for k in 0..crossers {
            spec.anomalies.push(Motif {
                shape: Shape::Square,
                size: OBJECT,
                velocity: (6, 0),
                start: (-(OBJECT as i32), 24),
                first_frame: anomaly_start + k * CROSSER_SPACING,
                last_frame: None,
                period: None,
            });
        }
        spec
    }
}
