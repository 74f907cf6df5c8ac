//! Completion networks (plain UNet and ST-UNet) and their checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clstm::{fuse_embeddings, Clstm, ClstmCache};
use super::unet::{Unet, UnetCache};
use super::{real, Grads, ParamInfo, ParamStore, Real};
use crate::error::{Result, VccError};
use crate::vct::Vct;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Unet,
    StUnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Appearance,
    Motion,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Appearance, Modality::Motion];

    pub fn out_channels(self) -> usize {
        match self {
            Modality::Appearance => 3,
            Modality::Motion => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Appearance => "appearance",
            Modality::Motion => "motion",
        }
    }
}

/// Architecture hyperparameters shared by every network of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub arch: Arch,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// CLSTM hidden channels (ST-UNet only).
    pub hidden: usize,
    pub clstm_kernel: usize,
    /// Channel widths per UNet resolution level.
    pub widths: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            arch: Arch::StUnet,
            depth: 5,
            height: 32,
            width: 32,
            hidden: 64,
            clstm_kernel: 3,
            widths: vec![64, 128, 256, 512],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << (self.widths.len().max(1) - 1);
        if self.depth < 2 {
            return Err(VccError::Config("STC depth must be at least 2".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(VccError::Config("UNet widths must be non-empty and positive".into()));
        }
        if self.height % div != 0 || self.width % div != 0 {
            return Err(VccError::Config(format!(
                "patch size {}x{} is not divisible by {div} ({} UNet levels)",
                self.height,
                self.width,
                self.widths.len()
            )));
        }
        if self.arch == Arch::StUnet && (self.hidden == 0 || self.clstm_kernel % 2 == 0) {
            return Err(VccError::Config("CLSTM needs hidden > 0 and an odd kernel".into()));
        }
        Ok(())
    }
}

/// Network for one (block, modality, VCT type).
#[derive(Debug, Clone)]
pub struct CompletionNet<T> {
    pub config: NetConfig,
    pub modality: Modality,
    pub type_i: usize,
    pub block: usize,
    pub params: ParamStore<T>,
    clstm: Option<Clstm>,
    unet: Unet,
}

#[derive(Debug, Clone)]
pub struct NetCache<T> {
    clstm: Option<ClstmCache<T>>,
    unet: UnetCache<T>,
    steps: usize,
}

impl<T: Real> CompletionNet<T> {
    pub fn new(config: NetConfig, modality: Modality, type_i: usize, block: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if type_i == 0 || type_i > config.depth {
            return Err(VccError::InvalidInput(format!("VCT type {type_i} outside 1..={}", config.depth)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let out = modality.out_channels();
        let (clstm, unet) = match config.arch {
            Arch::StUnet => {
                let c = Clstm::new(&mut params, "clstm", 3, config.hidden, config.clstm_kernel, &mut rng);
                let u = Unet::new(&mut params, "unet", config.hidden, out, &config.widths, &mut rng);
                (Some(c), u)
            }
            Arch::Unet => {
                let u = Unet::new(&mut params, "unet", 3 * (config.depth - 1), out, &config.widths, &mut rng);
                (None, u)
            }
        };
        Ok(CompletionNet {
            config,
            modality,
            type_i,
            block,
            params,
            clstm,
            unet,
        })
    }

    /// Converts VCTs into per-step network inputs `(3, N, h, w)`, scaled to
    /// `[-1, 1]`.
    pub fn prepare_input(&self, vcts: &[&Vct]) -> Result<Vec<Array4<T>>> {
        let (d, h, w) = (self.config.depth, self.config.height, self.config.width);
        for v in vcts {
            if v.type_i != self.type_i {
                return Err(VccError::InvalidInput(format!(
                    "type-{} VCT fed to a type-{} network",
                    v.type_i, self.type_i
                )));
            }
            if v.kept_patches.dim() != (d - 1, h, w, 3) {
                return Err(VccError::shape((d - 1, h, w, 3), v.kept_patches.dim()));
            }
        }
        let n = vcts.len();
        Ok((0..d - 1)
            .map(|t| {
                Array4::from_shape_fn((3, n, h, w), |(c, j, y, x)| {
                    real::<T>(vcts[j].kept_patches[[t, y, x, c]] as f64 / 127.5 - 1.0)
                })
            })
            .collect())
    }

    /// Training target `(C_out, N, h, w)` in network units.
    pub fn prepare_target(&self, vcts: &[&Vct]) -> Array4<T> {
        let (h, w) = (self.config.height, self.config.width);
        let n = vcts.len();
        match self.modality {
            Modality::Appearance => Array4::from_shape_fn((3, n, h, w), |(c, j, y, x)| {
                real::<T>(vcts[j].target_patch[[y, x, c]] as f64 / 127.5 - 1.0)
            }),
            Modality::Motion => Array4::from_shape_fn((2, n, h, w), |(c, j, y, x)| {
                real::<T>(vcts[j].target_flow[[y, x, c]] as f64)
            }),
        }
    }

    fn check_steps(&self, xs: &[Array4<T>]) {
        assert_eq!(xs.len(), self.config.depth - 1, "expected D-1 input patches");
    }

    pub fn forward_train(&self, xs: &[Array4<T>]) -> (Array4<T>, NetCache<T>) {
        self.check_steps(xs);
        match &self.clstm {
            Some(cell) => {
                let (hs, cc) = cell.forward(&self.params, xs);
                let fused = fuse_embeddings(&hs);
                let (out, uc) = self.unet.forward(&self.params, &fused);
                (
                    out,
                    NetCache {
                        clstm: Some(cc),
                        unet: uc,
                        steps: xs.len(),
                    },
                )
            }
            None => {
                let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
                let stacked = ndarray::concatenate(Axis(0), &views).expect("equal patch shapes");
                let (out, uc) = self.unet.forward(&self.params, &stacked);
                (
                    out,
                    NetCache {
                        clstm: None,
                        unet: uc,
                        steps: xs.len(),
                    },
                )
            }
        }
    }

    /// Inference: prediction `(C_out, N, h, w)` in network units.
    pub fn forward(&self, xs: &[Array4<T>]) -> Array4<T> {
        self.forward_train(xs).0
    }

    /// Gradients of a loss with output gradient `dout` w.r.t. every parameter.
    pub fn backward(&self, cache: &NetCache<T>, dout: &Array4<T>) -> Grads<T> {
        let mut grads = self.params.zero_grads();
        let d_in = self.unet.backward(&self.params, &mut grads, &cache.unet, dout);
        if let (Some(cell), Some(cc)) = (&self.clstm, &cache.clstm) {
            // Summation fusion passes the same gradient to every step.
            let d_hs = vec![d_in; cache.steps];
            cell.backward(&self.params, &mut grads, cc, &d_hs);
        }
        grads
    }

    /// Predictions for a set of VCTs, `N x h x w x C` in metric units:
    /// appearance in `[0, 1]` intensity units, motion in flow pixels.
    pub fn predict(&self, vcts: &[&Vct]) -> Result<Array4<f32>> {
        let out = self.forward(&self.prepare_input(vcts)?);
        let unit = |v: T| {
            let v = v.to_f64().unwrap_or(0.0);
            match self.modality {
                Modality::Appearance => ((v + 1.0) * 0.5) as f32,
                Modality::Motion => v as f32,
            }
        };
        Ok(out.permuted_axes([1, 2, 3, 0]).mapv(unit))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Layout: magic `VCCM`, u32 LE header length, JSON header, then every
/// parameter as f32 LE in header order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: NetConfig,
    pub modality: Modality,
    pub type_i: usize,
    pub block: usize,
    pub params: Vec<ParamInfo>,
    pub config_hash: String,
}

const CKPT_MAGIC: &[u8; 4] = b"VCCM";

/// Atomic write (temp file then rename).
pub fn save_checkpoint<T: Real>(net: &CompletionNet<T>, config_hash: &str, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| VccError::io(parent, e))?;
    }
    let header = CheckpointHeader {
        config: net.config.clone(),
        modality: net.modality,
        type_i: net.type_i,
        block: net.block,
        params: net.params.info.clone(),
        config_hash: config_hash.to_string(),
    };
    let tmp = path.with_extension("tmp");
    let io = |e| VccError::io(&tmp, e);
    let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
    let json = serde_json::to_vec(&header).expect("header serializes");
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(json.len() as u32).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for v in &net.params.values {
        for &x in v.iter() {
            w.write_f32::<LittleEndian>(x.to_f32().unwrap_or(0.0)).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| VccError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, CompletionNet<f32>)> {
    let fmt = |reason: String| VccError::format(path, reason);
    let mut r = BufReader::new(File::open(path).map_err(|e| VccError::io(path, e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| fmt(e.to_string()))?;
    if &magic != CKPT_MAGIC {
        return Err(fmt("not a checkpoint".into()));
    }
    let len = r.read_u32::<LittleEndian>().map_err(|e| fmt(e.to_string()))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| fmt(e.to_string()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| fmt(e.to_string()))?;
    let mut net = CompletionNet::<f32>::new(header.config.clone(), header.modality, header.type_i, header.block, 0)
        .map_err(|e| fmt(e.to_string()))?;
    if net.params.info != header.params {
        return Err(fmt("parameter layout does not match the architecture".into()));
    }
    for v in net.params.values.iter_mut() {
        let mut buf = vec![0f32; v.len()];
        r.read_f32_into::<LittleEndian>(&mut buf).map_err(|e| fmt(format!("truncated parameters: {e}")))?;
        *v = Array1::from(buf);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| fmt(e.to_string()))?;
    if !rest.is_empty() {
        return Err(fmt("trailing bytes after parameters".into()));
    }
    Ok((header, net))
}
