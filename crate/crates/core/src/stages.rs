//! On-disk pipeline stages: extract → train → score → evaluate → plot.
//!
//! Every stage writes into `<output>/<stage>/`, starting from an empty
//! directory, and finishes by writing `manifest.json` with the stage's
//! config hash. A stage refuses to run unless the manifest of the stage
//! before it exists and carries the hash the current config implies, and
//! every artifact it reads must carry that hash as well.
//!
//! Artifacts (under `<output>/`):
//!
//! - `extract/<split>/<clip>.rois` — text, `frame x1 y1 x2 y2 a|m` per RoI.
//! - `extract/<split>/<clip>/block_<k>.vcce` — event archives.
//! - `train/models/<block>_<modality>_t<i>.ckpt` — one network each.
//! - `train/train_log.jsonl` — per-epoch losses.
//! - `score/score_stats.json` — training-set statistics per block.
//! - `score/<clip>.scores`, `score/<clip>.raw.scores` — one frame score per
//!   line (rectified and raw).
//! - `score/<clip>.events` — per-event scores and error maps.
//! - `evaluate/metrics.json`, `evaluate/roc_frame.csv`,
//!   `evaluate/roc_pixel.csv`, `evaluate/curves.json`, `evaluate/roc.svg`.
//! - `plot/roc.svg`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{FileDetector, FileFlow, FlowEstimator, ObjectDetector};
use crate::array_file;
use crate::config::{AdapterSource, PipelineConfig, PixelMap, Stage};
use crate::datasets::{generate_synthetic, presets, DatasetLayout, GroundTruth};
use crate::error::{Result, VccError};
use crate::evaluation::{assemble_box_score_map, assemble_error_map, frame_level_roc, pixel_critical_value, roc_svg, write_roc_csv, RocCurve};
use crate::events::{read_archive, write_archive, ArchiveHeader, VideoEvent};
use crate::nn::{load_checkpoint, save_checkpoint, Modality};
use crate::pipeline::{clip_frame_scores, events_by_block, extract_clip, training_stats, ClipEvents};
use crate::roi::{BoundingBox, RoiSource};
use crate::scoring::{fuse_event, rectify, RawEventScore, Variant};
use crate::training::{train_all, write_training_log, ModelSet, StatsSet};

/// Stage manifest, written last so that its presence marks completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub config_hash: String,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipInfo {
    pub clip: String,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Number of events per block.
    pub events: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExtractDetail {
    train: Vec<ClipInfo>,
    test: Vec<ClipInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointEntry {
    file: String,
    block: Option<usize>,
    modality: Modality,
    type_i: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainDetail {
    checkpoints: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StatsFile {
    config_hash: String,
    stats: StatsSet,
}

/// Frame-level summary printed by `vcc evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_hash: String,
    pub frames: usize,
    pub anomalous_frames: usize,
    pub frame_auc: f64,
    pub frame_eer: f64,
    pub pixel_auc: Option<f64>,
    pub pixel_eer: Option<f64>,
    /// Frame-level AUC of ablation variants, raw and rectified.
    pub ablations: BTreeMap<String, AblationAuc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationAuc {
    pub raw: f64,
    pub rectified: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Curves {
    config_hash: String,
    frame: RocCurve,
    pixel: Option<RocCurve>,
}

/// A configured run: the config plus its artifact directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: PipelineConfig,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> VccError + '_ {
    move |e| VccError::io(path, e)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| VccError::format(path, e.to_string()))
}

fn check_hash(artifact: &Path, found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(VccError::StaleArtifact {
            artifact: artifact.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

fn block_name(block: Option<usize>) -> String {
    block.map_or_else(|| "global".to_string(), |b| format!("b{b}"))
}

impl Run {
    pub fn new(cfg: PipelineConfig) -> Self {
        Run { cfg }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.cfg.dataset.output.join(stage.name())
    }

    fn layout(&self) -> DatasetLayout {
        DatasetLayout::new(&self.cfg.dataset.root)
    }

    fn n_blocks(&self) -> usize {
        self.cfg.grid.rows * self.cfg.grid.cols
    }

    /// Empties the stage directory before a (re)run.
    fn fresh_dir(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    fn finish(&self, stage: Stage, detail: serde_json::Value) -> Result<()> {
        let m = Manifest {
            stage,
            config_hash: self.cfg.stage_hash(stage),
            detail,
        };
        write_json(&self.stage_dir(stage).join("manifest.json"), &m)
    }

    /// Manifest of a completed prerequisite stage, checked against the
    /// current configuration.
    pub fn prerequisite(&self, needed: Stage, by: Stage) -> Result<Manifest> {
        let path = self.stage_dir(needed).join("manifest.json");
        if !path.is_file() {
            return Err(VccError::MissingPrerequisite {
                stage: by.name().into(),
                detail: format!(
                    "{} has not been produced; run `vcc {}` with this config first",
                    path.display(),
                    needed.name()
                ),
            });
        }
        let m: Manifest = read_json(&path)?;
        check_hash(&path, &m.config_hash, &self.cfg.stage_hash(needed)).map_err(|e| match e {
            VccError::StaleArtifact { artifact, expected, found } => VccError::StaleArtifact {
                artifact: format!("{artifact} (config changed since `vcc {}`; rerun it)", needed.name()),
                expected,
                found,
            },
            e => e,
        })?;
        Ok(m)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<String> {
        match stage {
            Stage::Extract => self.extract(),
            Stage::Train => self.train(),
            Stage::Score => self.score(),
            Stage::Evaluate => self.evaluate().map(|m| format_metrics(&m)),
            Stage::Plot => self.plot(),
        }
    }

    /// Runs every stage from `from` on.
    pub fn run_from(&self, from: Stage) -> Result<Vec<String>> {
        Stage::ALL
            .into_iter()
            .filter(|&s| s >= from)
            .map(|s| self.run_stage(s))
            .collect()
    }

    // -----------------------------------------------------------------------
    // extract
    // -----------------------------------------------------------------------

    fn detector_for(&self, clip: &str) -> Option<Box<dyn ObjectDetector>> {
        match &self.cfg.adapters.detector {
            AdapterSource::Files(dir) => Some(Box::new(FileDetector::for_clip(dir, clip))),
            AdapterSource::None | AdapterSource::Builtin => None,
        }
    }

    fn flow_for(&self, clip: &str) -> Box<dyn FlowEstimator> {
        match &self.cfg.adapters.flow {
            AdapterSource::Files(dir) => Box::new(FileFlow::for_clip(dir, clip)),
            AdapterSource::Builtin | AdapterSource::None => Box::new(self.cfg.adapters.block_matching),
        }
    }

    fn extract_split(&self, split: &str, dir: &Path, hash: &str) -> Result<Vec<ClipInfo>> {
        let layout = self.layout();
        let clips = layout.clips(split)?;
        if clips.is_empty() {
            return Err(VccError::InvalidInput(format!(
                "no clips under {}",
                layout.root.join(split).display()
            )));
        }
        let opts = self.cfg.extract_options();
        let n_blocks = self.n_blocks();
        clips
            .par_iter()
            .map(|clip| {
                let seq = layout.load_clip(split, clip)?;
                let det = self.detector_for(clip);
                let flow = self.flow_for(clip);
                let ce = extract_clip(&seq, &opts, det.as_deref(), flow.as_ref())?;
                write_rois(&dir.join(split).join(format!("{clip}.rois")), &ce, hash)?;
                let groups = events_by_block(std::slice::from_ref(&ce), n_blocks)?;
                for (b, evs) in groups.iter().enumerate() {
                    let header = ArchiveHeader {
                        clip: clip.clone(),
                        block: b,
                        shape: opts.shape,
                        count: evs.len(),
                        config_hash: hash.to_string(),
                    };
                    write_archive(&archive_path(dir, split, clip, b), &header, evs)?;
                }
                log::info!("extract {split}/{clip}: {} events", ce.events.len());
                Ok(ClipInfo {
                    clip: clip.clone(),
                    n_frames: ce.n_frames,
                    height: ce.height,
                    width: ce.width,
                    events: groups.iter().map(Vec::len).collect(),
                })
            })
            .collect()
    }

    pub fn extract(&self) -> Result<String> {
        let dir = self.fresh_dir(Stage::Extract)?;
        let hash = self.cfg.stage_hash(Stage::Extract);
        let train = self.extract_split(&self.cfg.dataset.train_split, &dir, &hash)?;
        let test = self.extract_split(&self.cfg.dataset.test_split, &dir, &hash)?;
        let count = |c: &[ClipInfo]| c.iter().flat_map(|i| &i.events).sum::<usize>();
        let msg = format!(
            "extracted {} training events from {} clips and {} test events from {} clips",
            count(&train),
            train.len(),
            count(&test),
            test.len()
        );
        self.finish(Stage::Extract, serde_json::to_value(ExtractDetail { train, test }).expect("serializes"))?;
        Ok(msg)
    }

    fn extract_detail(&self, by: Stage) -> Result<ExtractDetail> {
        let m = self.prerequisite(Stage::Extract, by)?;
        serde_json::from_value(m.detail).map_err(|e| {
            VccError::format(self.stage_dir(Stage::Extract).join("manifest.json"), e.to_string())
        })
    }

    fn load_clip_events(&self, split: &str, info: &ClipInfo) -> Result<Vec<Vec<VideoEvent>>> {
        let dir = self.stage_dir(Stage::Extract);
        let hash = self.cfg.stage_hash(Stage::Extract);
        (0..info.events.len())
            .map(|b| {
                let path = archive_path(&dir, split, &info.clip, b);
                let (header, events) = read_archive(&path)?;
                check_hash(&path, &header.config_hash, &hash)?;
                Ok(events)
            })
            .collect()
    }

    fn training_events(&self, detail: &ExtractDetail) -> Result<Vec<Vec<VideoEvent>>> {
        let mut by_block = vec![Vec::new(); self.n_blocks()];
        for info in &detail.train {
            if info.events.len() != by_block.len() {
                return Err(VccError::StaleArtifact {
                    artifact: format!("extract archives of {}", info.clip),
                    expected: format!("{} blocks", by_block.len()),
                    found: format!("{} blocks", info.events.len()),
                });
            }
            for (b, evs) in self.load_clip_events(&self.cfg.dataset.train_split, info)?.into_iter().enumerate() {
                by_block[b].extend(evs);
            }
        }
        Ok(by_block)
    }

    // -----------------------------------------------------------------------
    // train
    // -----------------------------------------------------------------------

    pub fn train(&self) -> Result<String> {
        let detail = self.extract_detail(Stage::Train)?;
        let by_block = self.training_events(&detail)?;
        let dir = self.fresh_dir(Stage::Train)?;
        let hash = self.cfg.stage_hash(Stage::Train);
        let (models, log) = train_all(&by_block, &self.cfg.model, &self.cfg.train)?;
        let mut checkpoints = Vec::new();
        for (&(block, modality, type_i), net) in &models.nets {
            let file = format!("models/{}_{}_t{type_i}.ckpt", block_name(block), modality.name());
            save_checkpoint(net, &hash, &dir.join(&file))?;
            checkpoints.push(CheckpointEntry {
                file,
                block,
                modality,
                type_i,
            });
        }
        write_training_log(&log, &hash, &dir.join("train_log.jsonl"))?;
        let msg = format!(
            "trained {} networks on {} events",
            checkpoints.len(),
            by_block.iter().map(Vec::len).sum::<usize>()
        );
        self.finish(Stage::Train, serde_json::to_value(TrainDetail { checkpoints }).expect("serializes"))?;
        Ok(msg)
    }

    fn load_models(&self, by: Stage) -> Result<ModelSet> {
        let m = self.prerequisite(Stage::Train, by)?;
        let dir = self.stage_dir(Stage::Train);
        let detail: TrainDetail = serde_json::from_value(m.detail)
            .map_err(|e| VccError::format(dir.join("manifest.json"), e.to_string()))?;
        let hash = self.cfg.stage_hash(Stage::Train);
        let mut set = ModelSet::default();
        for c in detail.checkpoints {
            let path = dir.join(&c.file);
            let (header, net) = load_checkpoint(&path)?;
            check_hash(&path, &header.config_hash, &hash)?;
            set.nets.insert((c.block, c.modality, c.type_i), net);
        }
        Ok(set)
    }

    // -----------------------------------------------------------------------
    // score
    // -----------------------------------------------------------------------

    pub fn score(&self) -> Result<String> {
        let detail = self.extract_detail(Stage::Score)?;
        let models = self.load_models(Stage::Score)?;
        let types = self.cfg.types();
        let by_block = self.training_events(&detail)?;
        let stats = training_stats(&models, &by_block, &types, &self.cfg.score)?;
        drop(by_block);
        let dir = self.fresh_dir(Stage::Score)?;
        let hash = self.cfg.stage_hash(Stage::Score);
        write_json(
            &dir.join("score_stats.json"),
            &StatsFile {
                config_hash: hash.clone(),
                stats: stats.clone(),
            },
        )?;
        let depth = self.cfg.model.depth;
        let rectifier = self.cfg.score.rectifier();
        for info in &detail.test {
            let mut events: Vec<VideoEvent> = self
                .load_clip_events(&self.cfg.dataset.test_split, info)?
                .into_iter()
                .flatten()
                .collect();
            events.sort_by_key(|e| e.stc.frame_idx);
            let raws = crate::scoring::score_events(&models, &events, &types, &self.cfg.score)?;
            let raw = clip_frame_scores(&raws, &stats, info.n_frames, depth, &types, &self.cfg.score, Variant::Ensemble)?;
            let rect = rectify(&raw, rectifier);
            write_scores(&dir.join(format!("{}.raw.scores", info.clip)), &raw, &hash)?;
            write_scores(&dir.join(format!("{}.scores", info.clip)), &rect, &hash)?;
            write_event_scores(&dir.join(format!("{}.events", info.clip)), &info.clip, info.n_frames, &raws, &hash)?;
            log::info!("score {}: {} events", info.clip, raws.len());
        }
        let msg = format!("scored {} test clips", detail.test.len());
        self.finish(Stage::Score, serde_json::json!({ "clips": detail.test }))?;
        Ok(msg)
    }

    // -----------------------------------------------------------------------
    // evaluate
    // -----------------------------------------------------------------------

    pub fn evaluate(&self) -> Result<Metrics> {
        let m = self.prerequisite(Stage::Score, Stage::Evaluate)?;
        let score_dir = self.stage_dir(Stage::Score);
        let clips: Vec<ClipInfo> = serde_json::from_value(m.detail["clips"].clone())
            .map_err(|e| VccError::format(score_dir.join("manifest.json"), e.to_string()))?;
        let hash = self.cfg.stage_hash(Stage::Score);
        let stats_path = score_dir.join("score_stats.json");
        let stats_file: StatsFile = read_json(&stats_path)?;
        check_hash(&stats_path, &stats_file.config_hash, &hash)?;
        let stats = stats_file.stats;
        let layout = self.layout();
        let types = self.cfg.types();
        let depth = self.cfg.model.depth;
        let rectifier = self.cfg.score.rectifier();

        let mut variants: Vec<(String, Variant)> = vec![
            ("ensemble".into(), Variant::Ensemble),
            ("appearance_only".into(), Variant::AppearanceOnly),
            ("motion_only".into(), Variant::MotionOnly),
        ];
        variants.extend(types.iter().enumerate().map(|(k, t)| (format!("type_{t}"), Variant::SingleType(k))));

        let mut labels = Vec::new();
        let mut scores = Vec::new();
        let mut variant_raw: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
        let mut variant_rect: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
        let mut critical = Vec::new();
        for info in &clips {
            let path = score_dir.join(format!("{}.scores", info.clip));
            let (s, found) = read_scores(&path)?;
            check_hash(&path, &found, &hash)?;
            if s.len() != info.n_frames {
                return Err(VccError::format(&path, format!("{} scores for {} frames", s.len(), info.n_frames)));
            }
            let gt: GroundTruth = layout.load_ground_truth(&info.clip, info.n_frames)?;
            let ev_path = score_dir.join(format!("{}.events", info.clip));
            let (found, raws) = read_event_scores(&ev_path)?;
            check_hash(&ev_path, &found, &hash)?;
            for (k, (_, v)) in variants.iter().enumerate() {
                let raw = clip_frame_scores(&raws, &stats, info.n_frames, depth, &types, &self.cfg.score, *v)?;
                variant_rect[k].extend(rectify(&raw, rectifier));
                variant_raw[k].extend(raw);
            }
            if self.cfg.evaluate.pixel_level {
                let masks = gt.pixel_masks.as_ref().ok_or_else(|| {
                    VccError::InvalidInput(format!(
                        "clip {} has no pixel masks; add them under {} or set evaluate.pixel_level = false",
                        info.clip,
                        layout.mask_dir(&info.clip).display()
                    ))
                })?;
                let mut per_frame: Vec<Vec<&RawEventScore>> = vec![Vec::new(); info.n_frames];
                for r in &raws {
                    per_frame[r.frame_idx].push(r);
                }
                for (t, evs) in per_frame.iter().enumerate() {
                    let map = match self.cfg.evaluate.pixel_map {
                        PixelMap::ErrorMap => {
                            assemble_error_map(info.height, info.width, evs.iter().map(|r| (r.bbox, &r.error_map)))?
                        }
                        PixelMap::EventScore => {
                            let mut boxes = Vec::with_capacity(evs.len());
                            for r in evs {
                                let st = stats.get(r.block).ok_or_else(|| {
                                    VccError::Config(format!("no score statistics for block {}", r.block))
                                })?;
                                let v = fuse_event(r, st, &types, &self.cfg.score, Variant::Ensemble);
                                boxes.push((r.bbox, v as f32));
                            }
                            assemble_box_score_map(info.height, info.width, boxes)?
                        }
                    };
                    critical.push(pixel_critical_value(&map, Some(&masks[t]), gt.frame_labels[t])?);
                }
            }
            labels.extend(gt.frame_labels);
            scores.extend(s);
        }
        let frame = frame_level_roc(&scores, &labels)?;
        let pixel = if self.cfg.evaluate.pixel_level {
            Some(frame_level_roc(&critical, &labels)?)
        } else {
            None
        };
        let mut ablations = BTreeMap::new();
        for (k, (name, _)) in variants.iter().enumerate() {
            ablations.insert(
                name.clone(),
                AblationAuc {
                    raw: frame_level_roc(&variant_raw[k], &labels)?.auc,
                    rectified: frame_level_roc(&variant_rect[k], &labels)?.auc,
                },
            );
        }
        let dir = self.fresh_dir(Stage::Evaluate)?;
        let ehash = self.cfg.stage_hash(Stage::Evaluate);
        write_roc_csv(&frame, &format!("config_hash {ehash}\nframe-level ROC"), &dir.join("roc_frame.csv"))?;
        if let Some(p) = &pixel {
            write_roc_csv(p, &format!("config_hash {ehash}\npixel-level ROC"), &dir.join("roc_pixel.csv"))?;
        }
        let metrics = Metrics {
            config_hash: ehash.clone(),
            frames: labels.len(),
            anomalous_frames: labels.iter().filter(|&&l| l).count(),
            frame_auc: frame.auc,
            frame_eer: frame.eer,
            pixel_auc: pixel.as_ref().map(|p| p.auc),
            pixel_eer: pixel.as_ref().map(|p| p.eer),
            ablations,
        };
        write_json(&dir.join("metrics.json"), &metrics)?;
        let curves = Curves {
            config_hash: ehash,
            frame,
            pixel,
        };
        write_json(&dir.join("curves.json"), &curves)?;
        let svg = dir.join("roc.svg");
        std::fs::write(&svg, render_curves(&curves)).map_err(io_err(&svg))?;
        self.finish(Stage::Evaluate, serde_json::json!({ "frame_auc": metrics.frame_auc }))?;
        Ok(metrics)
    }

    // -----------------------------------------------------------------------
    // plot
    // -----------------------------------------------------------------------

    pub fn plot(&self) -> Result<String> {
        self.prerequisite(Stage::Evaluate, Stage::Plot)?;
        let path = self.stage_dir(Stage::Evaluate).join("curves.json");
        let curves: Curves = read_json(&path)?;
        check_hash(&path, &curves.config_hash, &self.cfg.stage_hash(Stage::Evaluate))?;
        let dir = self.fresh_dir(Stage::Plot)?;
        let out = dir.join("roc.svg");
        std::fs::write(&out, render_curves(&curves)).map_err(io_err(&out))?;
        self.finish(Stage::Plot, serde_json::json!({ "plot": "roc.svg" }))?;
        Ok(format!("wrote {}", out.display()))
    }
}

fn render_curves(curves: &Curves) -> String {
    let mut list = vec![("frame-level", &curves.frame)];
    if let Some(p) = &curves.pixel {
        list.push(("pixel-level", p));
    }
    let short = &curves.config_hash[..12.min(curves.config_hash.len())];
    roc_svg(&list, &format!("ROC (config {short})"))
}

pub fn format_metrics(m: &Metrics) -> String {
    let mut s = format!(
        "frames {} (anomalous {})\nframe-level AUC {:.4}  EER {:.4}",
        m.frames, m.anomalous_frames, m.frame_auc, m.frame_eer
    );
    if let (Some(a), Some(e)) = (m.pixel_auc, m.pixel_eer) {
        let _ = write!(s, "\npixel-level AUC {a:.4}  EER {e:.4}");
    }
    for (name, a) in &m.ablations {
        let _ = write!(s, "\n  {name:<16} AUC raw {:.4}  rectified {:.4}", a.raw, a.rectified);
    }
    s
}

/// Writes the built-in synthetic dataset described by the config.
pub fn write_synthetic(cfg: &PipelineConfig) -> Result<String> {
    let syn = cfg.synthetic.clone().unwrap_or_default();
    let layout = DatasetLayout::new(&cfg.dataset.root);
    for i in 0..syn.train_clips {
        let (seq, _) = generate_synthetic(&presets::training_clip(i, syn.train_frames))?;
        layout.save_clip(&cfg.dataset.train_split, &seq, None)?;
    }
    for i in 0..syn.test_clips {
        let spec = presets::test_clip(i, syn.test_frames, syn.anomaly_start + 5 * i, syn.crossers);
        let (seq, gt) = generate_synthetic(&spec)?;
        layout.save_clip(&cfg.dataset.test_split, &seq, Some(&gt))?;
    }
    Ok(format!(
        "wrote {} training and {} test clips to {}",
        syn.train_clips,
        syn.test_clips,
        layout.root.display()
    ))
}

fn archive_path(dir: &Path, split: &str, clip: &str, block: usize) -> PathBuf {
    dir.join(split).join(clip).join(format!("block_{block}.vcce"))
}

fn write_rois(path: &Path, ce: &ClipEvents, hash: &str) -> Result<()> {
    let mut s = format!("# config_hash {hash}\n# frame x1 y1 x2 y2 source\n");
    for (t, boxes) in ce.rois.iter().enumerate() {
        for (b, src) in boxes {
            let _ = writeln!(s, "{t} {} {} {} {} {}", b.x1, b.y1, b.x2, b.y2, src.tag());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, s).map_err(io_err(path))
}

/// Reads a `.rois` file back as `(frame, box, source)` rows plus its hash.
pub fn read_rois(path: &Path) -> Result<(String, Vec<(usize, BoundingBox, RoiSource)>)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut hash = None;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if let Some(h) = line.strip_prefix("# config_hash ") {
            hash = Some(h.trim().to_string());
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = || VccError::format(path, format!("line {}: `{line}`", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |k: usize| f[k].parse::<usize>().map_err(|_| bad());
        let b = BoundingBox::new(num(1)?, num(2)?, num(3)?, num(4)?).map_err(|_| bad())?;
        let src = RoiSource::from_tag(f[5]).ok_or_else(bad)?;
        rows.push((num(0)?, b, src));
    }
    let hash = hash.ok_or_else(|| VccError::format(path, "missing config hash line"))?;
    Ok((hash, rows))
}

fn write_scores(path: &Path, scores: &[f64], hash: &str) -> Result<()> {
    let mut s = format!("# config_hash {hash}\n");
    for v in scores {
        let _ = writeln!(s, "{v:e}");
    }
    std::fs::write(path, s).map_err(io_err(path))
}

/// Reads a frame-score file: scores and the embedded config hash.
pub fn read_scores(path: &Path) -> Result<(Vec<f64>, String)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut hash = None;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if let Some(h) = line.strip_prefix("# config_hash ") {
            hash = Some(h.trim().to_string());
        } else if !line.trim().is_empty() {
            out.push(
                line.trim()
                    .parse()
                    .map_err(|_| VccError::format(path, format!("line {}: `{line}`", n + 1)))?,
            );
        }
    }
    let hash = hash.ok_or_else(|| VccError::format(path, "missing config hash line"))?;
    Ok((out, hash))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EventRecord {
    frame: usize,
    bbox: [usize; 4],
    block: usize,
    source: RoiSource,
    appearance: Vec<f64>,
    motion: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EventScoresHeader {
    clip: String,
    n_frames: usize,
    config_hash: String,
    events: Vec<EventRecord>,
}

const EVENTS_MAGIC: &[u8; 4] = b"VCCS";

/// Layout: magic `VCCS`, u32 LE header length, JSON header with the
/// per-event scores, then the `(N, h, w)` f32 error maps as an array file.
fn write_event_scores(path: &Path, clip: &str, n_frames: usize, raws: &[RawEventScore], hash: &str) -> Result<()> {
    let header = EventScoresHeader {
        clip: clip.to_string(),
        n_frames,
        config_hash: hash.to_string(),
        events: raws
            .iter()
            .map(|r| EventRecord {
                frame: r.frame_idx,
                bbox: [r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2],
                block: r.block,
                source: r.source,
                appearance: r.appearance.clone(),
                motion: r.motion.clone(),
            })
            .collect(),
    };
    let (h, w) = raws.first().map_or((0, 0), |r| r.error_map.dim());
    let mut maps = Array3::<f32>::zeros((raws.len(), h, w));
    for (k, r) in raws.iter().enumerate() {
        maps.index_axis_mut(Axis(0), k).assign(&r.error_map);
    }
    let io = io_err(path);
    let mut f = BufWriter::new(File::create(path).map_err(&io)?);
    let json = serde_json::to_vec(&header).expect("header serializes");
    f.write_all(EVENTS_MAGIC).map_err(&io)?;
    f.write_u32::<LittleEndian>(json.len() as u32).map_err(&io)?;
    f.write_all(&json).map_err(&io)?;
    array_file::write_f32(&mut f, &maps.into_dyn()).map_err(&io)?;
    f.flush().map_err(io)
}

fn read_event_scores(path: &Path) -> Result<(String, Vec<RawEventScore>)> {
    let fmt = |reason: String| VccError::format(path, reason);
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| fmt(e.to_string()))?;
    if &magic != EVENTS_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let len = r.read_u32::<LittleEndian>().map_err(|e| fmt(e.to_string()))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| fmt(e.to_string()))?;
    let header: EventScoresHeader = serde_json::from_slice(&json).map_err(|e| fmt(e.to_string()))?;
    let maps = array_file::read_any(&mut r).map_err(fmt)?.into_f32();
    let maps = maps.into_dimensionality::<ndarray::Ix3>().map_err(|e| fmt(e.to_string()))?;
    if maps.dim().0 != header.events.len() {
        return Err(fmt(format!("{} error maps for {} events", maps.dim().0, header.events.len())));
    }
    let raws = header
        .events
        .into_iter()
        .zip(maps.outer_iter())
        .map(|(e, m)| {
            if e.frame >= header.n_frames {
                return Err(fmt(format!("event frame {} beyond {} frames", e.frame, header.n_frames)));
            }
            Ok(RawEventScore {
                frame_idx: e.frame,
                bbox: BoundingBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3])?,
                block: e.block,
                source: e.source,
                appearance: e.appearance,
                motion: e.motion,
                error_map: m.to_owned(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header.config_hash, raws))
}
