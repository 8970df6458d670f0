//! Training under random modality perturbation: patch sampling, light
//! augmentation, momentum SGD with a poly schedule, per-epoch checkpoints.

mod checkpoint;
mod sampling;

pub use checkpoint::Checkpoint;
pub use sampling::{augment, crop, crop_case, flip, gaussian_blur, rot90, sample_patch, AugmentConfig, Patch};

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{DeMoSeg, UNetConfig};
use crate::diffops::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{label_pyramid, total_loss, LossBreakdown, LossConfig};
use crate::modality::{sample_perturbation, ModalityIndicator};
use crate::volume_io::{CaseRecord, DatasetManifest, Shape3, Split};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbGranularity {
    /// One indicator shared by the whole batch.
    #[default]
    Batch,
    /// An independent indicator per batch item.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_exponent: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub patch: Shape3,
    pub seed: u64,
    /// Draw a random modality subset per step; when off every step sees
    /// all four modalities.
    pub perturb: bool,
    pub perturb_granularity: PerturbGranularity,
    pub foreground_prob: f64,
    pub augment: AugmentConfig,
    pub network: UNetConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            iters_per_epoch: 50,
            batch_size: 2,
            lr: 0.01,
            poly_exponent: 0.9,
            momentum: 0.99,
            nesterov: true,
            patch: [16, 16, 16],
            seed: 0,
            perturb: true,
            perturb_granularity: PerturbGranularity::Batch,
            foreground_prob: 0.5,
            augment: AugmentConfig::default(),
            network: UNetConfig::desk(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.iters_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, iters_per_epoch and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        self.network.check_extent(self.patch)
    }

    pub fn total_iters(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `lr₀ · (1 − epoch/epochs)^γ`.
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.poly_exponent)
}

/// Heavy-ball SGD; with `nesterov` the step uses `g + μ·v` instead of `v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub buffers: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(params: &[Tensor<f32>], momentum: f64, nesterov: bool) -> Self {
        Self {
            momentum,
            nesterov,
            buffers: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) {
        let mu = self.momentum as f32;
        let lr = lr as f32;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.buffers.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                let d = if self.nesterov { gv + mu * *vv } else { *vv };
                *pv -= lr * d;
            }
        }
    }
}

/// One line of `metrics.jsonl`; loss values are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_seg")]
    pub l_seg: f64,
    #[serde(rename = "L_kd")]
    pub l_kd: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub delta: Vec<String>,
}

pub fn patch_tensors(p: &Patch) -> Vec<Tensor<f32>> {
    let [d, h, w] = p.shape;
    p.volumes
        .iter()
        .map(|v| Tensor::from_vec(&[1, d, h, w], v.clone()))
        .collect()
}

/// Forward + backward for one item. Returns per-parameter gradients (zero
/// where the parameter was not used) and the loss breakdown.
pub fn item_gradients(
    model: &DeMoSeg<f32>,
    patch: &Patch,
    delta: ModalityIndicator,
    loss: &LossConfig,
) -> Result<(Vec<Tensor<f32>>, LossBreakdown)> {
    let cfg = model.config();
    let mut g = Graph::new(model.params());
    let out = model.forward(&mut g, &patch_tensors(patch), delta)?;
    let targets = label_pyramid(&patch.labels, patch.shape, cfg.supervised_scales, cfg.num_classes)?;
    let (l, breakdown) = total_loss(&mut g.tape, &out, &targets, cfg.supervised_scales, loss)?;
    let mut grads = g.tape.backward(l)?;
    let grads = g
        .param_grads(&mut grads)
        .into_iter()
        .zip(model.params().values())
        .map(|(gr, p)| gr.unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((grads, breakdown))
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory for `metrics.jsonl`, `checkpoint.bin` and NaN dumps.
    pub out: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop once this many epochs are complete (the schedule still follows
    /// `epochs`).
    pub stop_after_epoch: Option<usize>,
    pub progress: Option<&'a mut dyn FnMut(&IterRecord)>,
}

pub struct TrainOutcome {
    pub model: DeMoSeg<f32>,
    pub history: Vec<IterRecord>,
    pub epochs_completed: usize,
    pub checkpoint: Option<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

/// Loads and normalizes the train split, then trains.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, opts: RunOptions<'_>) -> Result<TrainOutcome> {
    let cases = manifest
        .load_split(Split::Train)?
        .iter()
        .map(CaseRecord::normalized)
        .collect::<Result<Vec<_>>>()?;
    train_cases(&cases, cfg, opts)
}

fn open_metrics(out: &Path, keep_before: usize) -> Result<File> {
    let path = out.join(METRICS_FILE);
    let mut kept = Vec::new();
    if keep_before > 0 && path.exists() {
        for line in BufReader::new(File::open(&path)?).lines() {
            let line = line?;
            let rec: IterRecord = serde_json::from_str(&line)?;
            if rec.iter < keep_before {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

#[derive(Serialize)]
struct NanDump<'a> {
    iter: usize,
    epoch: usize,
    lr: f64,
    message: String,
    case_ids: Vec<&'a str>,
    offsets: Vec<Shape3>,
    delta: Vec<String>,
    patch_min: Vec<f32>,
    patch_max: Vec<f32>,
}

/// Trains on already-normalized cases.
pub fn train_cases(cases: &[CaseRecord], cfg: &TrainConfig, mut opts: RunOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let (mut model, mut sgd, mut rng, start_epoch, mut iter) = match opts.resume.take() {
        Some(ck) => {
            if ck.config_hash != cfg.hash() {
                return Err(Error::Contract(format!(
                    "checkpoint config hash {} differs from run config {}",
                    ck.config_hash,
                    cfg.hash()
                )));
            }
            let mut rng = ChaCha8Rng::from_seed(ck.rng_seed);
            rng.set_word_pos(ck.rng_word_pos);
            let sgd = Sgd {
                momentum: cfg.momentum,
                nesterov: cfg.nesterov,
                buffers: ck.momentum,
            };
            (ck.model, sgd, rng, ck.epoch, ck.iteration)
        }
        None => {
            let model = DeMoSeg::<f32>::new(cfg.network.clone(), cfg.seed)?;
            let sgd = Sgd::new(model.params().values(), cfg.momentum, cfg.nesterov);
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
            (model, sgd, rng, 0, 0)
        }
    };
    if let Some(out) = &opts.out {
        fs::create_dir_all(out)?;
    }
    let mut metrics = match &opts.out {
        Some(out) => Some(open_metrics(out, iter)?),
        None => None,
    };
    let end_epoch = opts.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut history = Vec::new();
    let mut checkpoint = None;
    let b = cfg.batch_size;

    for epoch in start_epoch..end_epoch {
        let lr = poly_lr(epoch, cfg);
        for _ in 0..cfg.iters_per_epoch {
            let shared = sample_perturbation(&mut rng);
            let mut items = Vec::with_capacity(b);
            for k in 0..b {
                let ci = rng.random_range(0..cases.len());
                let patch = sample_patch(&cases[ci], cfg.patch, cfg.foreground_prob, &mut rng)?;
                let patch = augment(patch, &mut rng, &cfg.augment);
                let delta = match (cfg.perturb, cfg.perturb_granularity) {
                    (false, _) => ModalityIndicator::FULL,
                    (true, PerturbGranularity::Batch) => shared,
                    (true, PerturbGranularity::Sample) if k == 0 => shared,
                    (true, PerturbGranularity::Sample) => sample_perturbation(&mut rng),
                };
                items.push((ci, patch, delta));
            }

            let mut sum: Option<Vec<Tensor<f32>>> = None;
            let (mut seg, mut kd, mut tot) = (0.0, 0.0, 0.0);
            let mut failure = None;
            for (_, patch, delta) in &items {
                match item_gradients(&model, patch, *delta, &cfg.loss) {
                    Ok((grads, br)) if grads.iter().all(|g| g.all_finite()) => {
                        seg += br.seg_total / b as f64;
                        kd += br.kd / b as f64;
                        tot += br.total / b as f64;
                        match sum.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                            None => sum = Some(grads),
                        }
                    }
                    Ok(_) => {
                        failure = Some("non-finite gradient".to_string());
                        break;
                    }
                    Err(Error::NonFinite(m)) => {
                        failure = Some(m);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(message) = failure {
                if let Some(out) = &opts.out {
                    let dump = NanDump {
                        iter,
                        epoch,
                        lr,
                        message: message.clone(),
                        case_ids: items.iter().map(|(ci, _, _)| cases[*ci].case_id.as_str()).collect(),
                        offsets: items.iter().map(|(_, p, _)| p.offset).collect(),
                        delta: items.iter().map(|(_, _, d)| d.to_digits()).collect(),
                        patch_min: items
                            .iter()
                            .map(|(_, p, _)| p.volumes.iter().flatten().copied().fold(f32::INFINITY, f32::min))
                            .collect(),
                        patch_max: items
                            .iter()
                            .map(|(_, p, _)| p.volumes.iter().flatten().copied().fold(f32::NEG_INFINITY, f32::max))
                            .collect(),
                    };
                    fs::write(out.join(NAN_DUMP_FILE), serde_json::to_vec_pretty(&dump)?)?;
                }
                return Err(Error::NonFinite(format!("iteration {iter}: {message}")));
            }
            let mut grads = sum.expect("batch is non-empty");
            let inv = 1.0 / b as f32;
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            sgd.step(model.params_mut().values_mut(), &grads, lr);

            let rec = IterRecord {
                iter,
                epoch,
                lr,
                l_seg: seg,
                l_kd: kd,
                l_total: tot,
                delta: items.iter().map(|(_, _, d)| d.to_digits()).collect(),
            };
            if let Some(f) = metrics.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            if let Some(p) = opts.progress.as_mut() {
                p(&rec);
            }
            history.push(rec);
            iter += 1;
        }
        if let Some(out) = &opts.out {
            let ck = Checkpoint {
                config: cfg.clone(),
                config_hash: cfg.hash(),
                epoch: epoch + 1,
                iteration: iter,
                rng_seed: rng.get_seed(),
                rng_word_pos: rng.get_word_pos(),
                model,
                momentum: std::mem::take(&mut sgd.buffers),
            };
            let path = out.join(CHECKPOINT_FILE);
            ck.save(&path)?;
            model = ck.model;
            sgd.buffers = ck.momentum;
            checkpoint = Some(path);
        }
    }
    if let Some(f) = metrics.as_mut() {
        f.flush()?;
    }
    Ok(TrainOutcome {
        model,
        history,
        epochs_completed: end_epoch.max(start_epoch),
        checkpoint,
    })
}
