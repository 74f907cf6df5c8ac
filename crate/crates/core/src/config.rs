//! Experiment configuration: one TOML file drives every pipeline stage.
//!
//! Relative paths resolve against the directory holding the config file.
//! Each stage records a hash of the configuration sections that determine
//! its artifacts; the hashes are cumulative, so a stage's hash changes
//! whenever anything upstream of it changes.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::BlockMatchingFlow;
use crate::error::{Result, VccError};
use crate::events::StcShape;
use crate::nn::NetConfig;
use crate::pipeline::{EventMode, ExtractOptions, MotionCue};
use crate::roi::RoiThresholds;
use crate::scoring::ScoreConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Dataset root in the `<root>/<split>/<clip>/` layout.
    pub root: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default = "default_test_split")]
    pub test_split: String,
    /// Directory receiving all artifacts.
    pub output: PathBuf,
}

fn default_train_split() -> String {
    "training".into()
}
fn default_test_split() -> String {
    "testing".into()
}

/// Layout of the built-in synthetic dataset written by `vcc synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_clips: usize,
    pub train_frames: usize,
    pub test_clips: usize,
    pub test_frames: usize,
    /// Spawn frame of the first anomaly in test clip 0; clip `k` starts
    /// `5 k` frames later.
    pub anomaly_start: usize,
    /// Fast squares crossing each test clip one after another.
    pub crossers: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_clips: 4,
            train_frames: 60,
            test_clips: 2,
            test_frames: 200,
            anomaly_start: 40,
            crossers: 8,
        }
    }
}

/// Where an external model's outputs come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AdapterSource {
    /// Adapter disabled (detector) or the built-in estimator (flow).
    Builtin,
    None,
    /// Per-frame handoff files under this directory.
    Files(PathBuf),
}

impl TryFrom<String> for AdapterSource {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "builtin" => Ok(AdapterSource::Builtin),
            "none" => Ok(AdapterSource::None),
            _ => match s.strip_prefix("files:") {
                Some(dir) if !dir.is_empty() => Ok(AdapterSource::Files(dir.into())),
                _ => Err(format!("expected `builtin`, `none` or `files:<dir>`, got `{s}`")),
            },
        }
    }
}

impl From<AdapterSource> for String {
    fn from(a: AdapterSource) -> String {
        a.to_string()
    }
}

impl fmt::Display for AdapterSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterSource::Builtin => f.write_str("builtin"),
            AdapterSource::None => f.write_str("none"),
            AdapterSource::Files(d) => write!(f, "files:{}", d.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub motion_cue: MotionCue,
    /// `none` or `files:<dir>`.
    pub detector: AdapterSource,
    /// `builtin` or `files:<dir>`.
    pub flow: AdapterSource,
    pub event_mode: EventMode,
    #[serde(default)]
    pub block_matching: BlockMatchingFlow,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            motion_cue: MotionCue::Flow,
            detector: AdapterSource::None,
            flow: AdapterSource::Builtin,
            event_mode: EventMode::Roi,
            block_matching: BlockMatchingFlow::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { rows: 1, cols: 1 }
    }
}

impl std::str::FromStr for GridConfig {
    type Err = VccError;

    /// Parses `RxC`, e.g. `4x1`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || VccError::Config(format!("block grid `{s}` is not of the form RxC"));
        let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let rows: usize = r.trim().parse().map_err(|_| bad())?;
        let cols: usize = c.trim().parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(GridConfig { rows, cols })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Also compute the pixel-level ROC (needs ground-truth masks).
    pub pixel_level: bool,
    #[serde(default)]
    pub pixel_map: PixelMap,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            pixel_level: true,
            pixel_map: PixelMap::default(),
        }
    }
}

/// What the full-frame anomaly map used by the pixel-level ROC holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelMap {
    /// Per-pixel appearance completion error of each event.
    #[default]
    ErrorMap,
    /// Each event's box filled with its fused event score.
    EventScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    pub roi: RoiThresholds,
    pub adapters: AdapterConfig,
    #[serde(default)]
    pub grid: GridConfig,
    pub model: NetConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extract,
    Train,
    Score,
    Evaluate,
    Plot,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Extract, Stage::Train, Stage::Score, Stage::Evaluate, Stage::Plot];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
            Stage::Plot => "plot",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = VccError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| VccError::Config(format!("unknown stage `{s}`")))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl PipelineConfig {
    /// Parses a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VccError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| VccError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.root);
        fix(&mut self.dataset.output);
        for a in [&mut self.adapters.detector, &mut self.adapters.flow] {
            if let AdapterSource::Files(d) = a {
                fix(d);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.roi.validate()?;
        self.model.validate()?;
        self.train.validate(self.model.depth)?;
        self.score.validate()?;
        if self.grid.rows == 0 || self.grid.cols == 0 {
            return Err(VccError::Config("block grid needs at least one row and column".into()));
        }
        match self.adapters.detector {
            AdapterSource::Builtin => {
                return Err(VccError::Config(
                    "there is no built-in object detector; use `none` or `files:<dir>`".into(),
                ))
            }
            AdapterSource::None | AdapterSource::Files(_) => {}
        }
        if self.adapters.flow == AdapterSource::None {
            return Err(VccError::Config(
                "motion completion needs flow; use `builtin` or `files:<dir>`".into(),
            ));
        }
        if self.adapters.event_mode == EventMode::WholeFrame && self.grid != GridConfig::default() {
            return Err(VccError::Config("whole-frame events require a 1x1 grid".into()));
        }
        if let Some(s) = &self.synthetic {
            if s.train_clips == 0 || s.test_clips == 0 || s.train_frames == 0 || s.test_frames == 0 {
                return Err(VccError::Config("synthetic split sizes must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn stc_shape(&self) -> StcShape {
        StcShape {
            depth: self.model.depth,
            height: self.model.height,
            width: self.model.width,
        }
    }

    pub fn extract_options(&self) -> ExtractOptions {
        ExtractOptions {
            thresholds: self.roi,
            motion_cue: self.adapters.motion_cue,
            event_mode: self.adapters.event_mode,
            shape: self.stc_shape(),
            rows: self.grid.rows,
            cols: self.grid.cols,
        }
    }

    pub fn types(&self) -> Vec<usize> {
        self.train.type_list(self.model.depth)
    }

    /// Hash of everything that determines the artifacts of `stage`,
    /// including all upstream stages. The output directory is excluded so
    /// that moving a run does not invalidate it.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut parts = vec![
            serde_json::json!({
                "dataset": {
                    "root": self.dataset.root,
                    "train_split": self.dataset.train_split,
                    "test_split": self.dataset.test_split,
                },
                "roi": self.roi,
                "adapters": self.adapters,
                "grid": self.grid,
                "stc": self.stc_shape(),
            }),
        ];
        if stage >= Stage::Train {
            parts.push(serde_json::json!({ "model": self.model, "train": self.train }));
        }
        if stage >= Stage::Score {
            parts.push(serde_json::json!({ "score": self.score }));
        }
        if stage >= Stage::Evaluate {
            parts.push(serde_json::json!({ "evaluate": self.evaluate }));
        }
        let canonical = serde_json::to_string(&parts).expect("config serializes");
        sha256_hex(canonical.as_bytes())
    }
}
