//! Training of the per-(block, modality, type) completion networks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array4, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VccError};
use crate::events::VideoEvent;
use crate::nn::{real, Adam, CompletionNet, Modality, NetConfig, Real};
use crate::vct::{make_vct, Vct};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Norm order of the completion loss.
    pub p: f64,
    pub seed: u64,
    /// VCT types to train (1-based); empty means all `1..=D`.
    #[serde(default)]
    pub types: Vec<usize>,
    /// Also train a model set on all events pooled, used for blocks that
    /// received no training events.
    #[serde(default)]
    pub global_fallback: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: 5,
            batch_size: 128,
            p: 2.0,
            seed: 0,
            types: Vec::new(),
            global_fallback: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.p >= 1.0) {
            return Err(VccError::Config(format!("loss norm p = {} must be >= 1", self.p)));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(VccError::Config("epochs, batch size and learning rate must be positive".into()));
        }
        if let Some(&t) = self.types.iter().find(|&&t| t == 0 || t > depth) {
            return Err(VccError::Config(format!("VCT type {t} outside 1..={depth}")));
        }
        Ok(())
    }

    /// Trained VCT types in increasing order.
    pub fn type_list(&self, depth: usize) -> Vec<usize> {
        if self.types.is_empty() {
            (1..=depth).collect()
        } else {
            let mut t = self.types.clone();
            t.sort_unstable();
            t.dedup();
            t
        }
    }
}

/// Mean over the batch (axis 1 of a `(C, N, h, w)` tensor) of `||pred - target||_p^p`.
pub fn lp_loss<T: Real>(pred: &Array4<T>, target: &Array4<T>, p: f64) -> f64 {
    assert_eq!(pred.dim(), target.dim(), "prediction/target shape");
    let n = pred.dim().1.max(1) as f64;
    let mut acc = 0.0;
    Zip::from(pred).and(target).for_each(|&a, &b| {
        let d = (a - b).to_f64().unwrap_or(f64::NAN).abs();
        acc += if p == 2.0 { d * d } else { d.powf(p) };
    });
    acc / n
}

/// Gradient of [`lp_loss`] with respect to `pred`.
pub fn lp_loss_grad<T: Real>(pred: &Array4<T>, target: &Array4<T>, p: f64) -> Array4<T> {
    let n = pred.dim().1.max(1) as f64;
    let scale = real::<T>(p / n);
    let mut g = pred - target;
    if p == 2.0 {
        g.mapv_inplace(|d| d * scale);
    } else {
        let pm1 = real::<T>(p - 1.0);
        g.mapv_inplace(|d| d.signum() * d.abs().powf(pm1) * scale);
    }
    g
}

/// Appearance completion loss.
pub fn appearance_loss<T: Real>(pred: &Array4<T>, target: &Array4<T>, p: f64) -> f64 {
    lp_loss(pred, target, p)
}

/// Motion completion loss (same form on flow tensors).
pub fn motion_loss<T: Real>(pred: &Array4<T>, target: &Array4<T>, p: f64) -> f64 {
    lp_loss(pred, target, p)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "type")]
    pub type_i: usize,
    pub modality: Modality,
    /// Block index, or `None` for the global fallback set.
    pub block: Option<usize>,
    pub loss: f64,
}

/// Seed of the network for a given job, derived from the run seed.
pub fn job_seed(seed: u64, block: Option<usize>, modality: Modality, type_i: usize) -> u64 {
    let b = block.map_or(0xffff, |b| b as u64);
    let m = match modality {
        Modality::Appearance => 0,
        Modality::Motion => 1,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (b << 32) ^ (m << 24) ^ type_i as u64
}

/// Trains one network on VCTs of a single type.
pub fn train_one(
    vcts: &[&Vct],
    modality: Modality,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    block: Option<usize>,
) -> Result<(CompletionNet<f32>, Vec<EpochRecord>)> {
    let type_i = match vcts.first() {
        Some(v) => v.type_i,
        None => return Err(VccError::InvalidInput("cannot train on an empty VCT set".into())),
    };
    if vcts.iter().any(|v| v.type_i != type_i) {
        return Err(VccError::InvalidInput("VCT set mixes types".into()));
    }
    let seed = job_seed(cfg.seed, block, modality, type_i);
    let mut net = CompletionNet::<f32>::new(net_cfg.clone(), modality, type_i, block.unwrap_or(0), seed)?;
    let mut opt = Adam::new(&net.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..vcts.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Vct> = chunk.iter().map(|&k| vcts[k]).collect();
            let xs = net.prepare_input(&batch)?;
            let target = net.prepare_target(&batch);
            let (pred, cache) = net.forward_train(&xs);
            total += lp_loss(&pred, &target, cfg.p) * batch.len() as f64;
            let grads = net.backward(&cache, &lp_loss_grad(&pred, &target, cfg.p));
            opt.update(&mut net.params, &grads);
        }
        let loss = total / vcts.len() as f64;
        if !loss.is_finite() {
            return Err(VccError::InvalidInput(format!(
                "training diverged (loss {loss}) for {} type {type_i}",
                modality.name()
            )));
        }
        log::debug!("{} type {type_i} block {block:?} epoch {epoch}: loss {loss:.6}", modality.name());
        log.push(EpochRecord {
            epoch,
            type_i,
            modality,
            block,
            loss,
        });
    }
    Ok((net, log))
}

/// Key of one network: `(block, modality, type)`; block `None` is the
/// global fallback set.
pub type NetKey = (Option<usize>, Modality, usize);

/// All trained networks of a run.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub nets: BTreeMap<NetKey, CompletionNet<f32>>,
}

impl ModelSet {
    /// Network for an event in `block`, falling back to the global set.
    pub fn get(&self, block: usize, modality: Modality, type_i: usize) -> Option<&CompletionNet<f32>> {
        self.nets
            .get(&(Some(block), modality, type_i))
            .or_else(|| self.nets.get(&(None, modality, type_i)))
    }

    /// Which model set serves `block`: its own, the fallback (`Some(None)`),
    /// or none at all.
    pub fn resolve(&self, block: usize) -> Option<Option<usize>> {
        if self.has_block(block) {
            Some(Some(block))
        } else if self.has_fallback() {
            Some(None)
        } else {
            None
        }
    }

    pub fn has_block(&self, block: usize) -> bool {
        self.nets.keys().any(|k| k.0 == Some(block))
    }

    pub fn has_fallback(&self) -> bool {
        self.nets.keys().any(|k| k.0.is_none())
    }
}

/// Trains every (block, modality, type) network. `events_by_block[k]` are
/// the training events of block `k`. Blocks without events get no model;
/// with `global_fallback` an extra set is trained on all events pooled.
/// Independent jobs run in parallel; results do not depend on scheduling.
pub fn train_all(
    events_by_block: &[Vec<VideoEvent>],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) -> Result<(ModelSet, Vec<EpochRecord>)> {
    cfg.validate(net_cfg.depth)?;
    net_cfg.validate()?;
    let types = cfg.type_list(net_cfg.depth);
    let mut groups: Vec<(Option<usize>, Vec<&VideoEvent>)> = events_by_block
        .iter()
        .enumerate()
        .filter(|(_, evs)| !evs.is_empty())
        .map(|(b, evs)| (Some(b), evs.iter().collect()))
        .collect();
    if groups.is_empty() {
        return Err(VccError::InvalidInput("no training events were extracted".into()));
    }
    let needs_fallback = cfg.global_fallback && groups.len() < events_by_block.len();
    if needs_fallback {
        groups.push((None, events_by_block.iter().flatten().collect()));
    }
    let mut jobs = Vec::new();
    for (block, events) in &groups {
        for &t in &types {
            for m in Modality::ALL {
                jobs.push((*block, m, t, events));
            }
        }
    }
    let results: Vec<Result<(NetKey, CompletionNet<f32>, Vec<EpochRecord>)>> = jobs
        .par_iter()
        .map(|&(block, m, t, events)| {
            let vcts = events.iter().map(|e| make_vct(e, t)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Vct> = vcts.iter().collect();
            let (net, log) = train_one(&refs, m, net_cfg, cfg, block)?;
            Ok(((block, m, t), net, log))
        })
        .collect();
    let mut set = ModelSet::default();
    let mut log = Vec::new();
    for r in results {
        let (key, net, l) = r?;
        set.nets.insert(key, net);
        log.extend(l);
    }
    Ok((set, log))
}

pub fn write_training_log(records: &[EpochRecord], config_hash: &str, path: &Path) -> Result<()> {
    let io = |e| VccError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{}", serde_json::json!({ "config_hash": config_hash })).map_err(io)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Mean and standard deviation, the latter floored at [`MeanStd::FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub const FLOOR: f64 = 1e-12;

    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 1.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt().max(Self::FLOOR),
        }
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Training-set statistics of the ensemble scores of one block, plus the
/// per-type statistics used when a single VCT type is scored alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub appearance: MeanStd,
    pub motion: MeanStd,
    pub appearance_by_type: BTreeMap<usize, MeanStd>,
    pub motion_by_type: BTreeMap<usize, MeanStd>,
}

/// Statistics of `S_a`, `S_m` over the given per-event scores, where
/// `per_type[e][t]` is `(S_a, S_m)` of event `e` under type `types[t]`.
pub fn compute_score_stats(types: &[usize], per_type: &[Vec<(f64, f64)>]) -> ScoreStats {
    let k = types.len().max(1) as f64;
    let ens_a: Vec<f64> = per_type.iter().map(|s| s.iter().map(|x| x.0).sum::<f64>() / k).collect();
    let ens_m: Vec<f64> = per_type.iter().map(|s| s.iter().map(|x| x.1).sum::<f64>() / k).collect();
    let mut appearance_by_type = BTreeMap::new();
    let mut motion_by_type = BTreeMap::new();
    for (t, &ty) in types.iter().enumerate() {
        let a: Vec<f64> = per_type.iter().map(|s| s[t].0).collect();
        let m: Vec<f64> = per_type.iter().map(|s| s[t].1).collect();
        appearance_by_type.insert(ty, MeanStd::of(&a));
        motion_by_type.insert(ty, MeanStd::of(&m));
    }
    ScoreStats {
        appearance: MeanStd::of(&ens_a),
        motion: MeanStd::of(&ens_m),
        appearance_by_type,
        motion_by_type,
    }
}

/// Statistics for every block with a trained model set, plus the global
/// fallback set if one was trained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsSet {
    pub blocks: BTreeMap<usize, ScoreStats>,
    pub fallback: Option<ScoreStats>,
}

impl StatsSet {
    /// Statistics matching the networks [`ModelSet::get`] picks for `block`.
    pub fn get(&self, block: usize) -> Option<&ScoreStats> {
        self.blocks.get(&block).or(self.fallback.as_ref())
    }
}

/// Helper used by tests and diagnostics: batch mean of a loss over a
/// `(C, N, h, w)` pair, item by item.
pub fn per_item_losses<T: Real>(pred: &Array4<T>, target: &Array4<T>, p: f64) -> Vec<f64> {
    (0..pred.dim().1)
        .map(|j| {
            let a = pred.index_axis(Axis(1), j).insert_axis(Axis(1)).to_owned();
            let b = target.index_axis(Axis(1), j).insert_axis(Axis(1)).to_owned();
            lp_loss(&a, &b, p)
        })
        .collect()
}
