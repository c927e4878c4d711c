//! Patch-based training with Adam, a plateau learning-rate schedule, early
//! stopping and best-validation weight selection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::augment::{augment_with_rng, AugmentParams};
use crate::io::{read_json, write_json, IoError};
use crate::loss::{dice_loss, LossConfig, LossError};
use crate::network::{ModelConfig, ModelError, ModelGraph};
use crate::sampler::{PatchSampler, PatchSpec, SamplerError};
use crate::tensor::Tensor;
use crate::volume::{Gridded, Modality, Study, Target, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("study {patient} lacks {what}")]
    MissingData { patient: String, what: String },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Multiply the learning rate by `factor` after `patience` epochs without a
/// strict improvement of the best validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 8,
        }
    }
}

/// State machine of the plateau rule.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        PlateauScheduler {
            cfg,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss; returns true when the rate was cut.
    pub fn step(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.cfg.patience {
            self.lr *= self.cfg.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

fn model_from_json<'de, D: Deserializer<'de>>(d: D) -> Result<ModelConfig, D::Error> {
    let v = serde_json::Value::deserialize(d)?;
    ModelConfig::from_json(&v).map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(deserialize_with = "model_from_json")]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr_schedule: PlateauConfig,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_early_stop")]
    pub early_stop_patience: usize,
    /// Training patches drawn per patient and epoch.
    #[serde(default = "default_patches")]
    pub patches_per_patient: usize,
    /// Fixed validation patches per validation patient.
    #[serde(default = "default_val_patches")]
    pub val_patches_per_patient: usize,
    #[serde(default)]
    pub sampler: PatchSpec,
    #[serde(default)]
    pub augment: Option<AugmentParams>,
    #[serde(default)]
    pub loss: LossConfig,
    /// Stop once every target's validation DSC exceeds this value.
    #[serde(default)]
    pub target_dsc: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn default_max_epochs() -> usize {
    300
}
fn default_early_stop() -> usize {
    40
}
fn default_patches() -> usize {
    50
}
fn default_val_patches() -> usize {
    10
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            optimizer: AdamConfig::default(),
            batch_size: 1,
            lr_schedule: PlateauConfig::default(),
            max_epochs: default_max_epochs(),
            early_stop_patience: default_early_stop(),
            patches_per_patient: default_patches(),
            val_patches_per_patient: default_val_patches(),
            sampler: PatchSpec::default(),
            augment: None,
            loss: LossConfig::default(),
            target_dsc: None,
            seed: 0,
        }
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, TrainError> {
        if let Some(m) = value.get("model") {
            ModelConfig::from_json(m)?;
        }
        let cfg: TrainConfig =
            serde_json::from_value(value.clone()).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", o.lr));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("Adam moment rates must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_size != 1 {
            return bad(format!("only batch_size 1 is supported, got {}", self.batch_size));
        }
        if self.lr_schedule.patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if !(self.lr_schedule.factor > 0.0 && self.lr_schedule.factor < 1.0) {
            return bad(format!("plateau factor must lie in (0, 1), got {}", self.lr_schedule.factor));
        }
        if self.patches_per_patient == 0 {
            return bad("patches_per_patient must be at least 1".into());
        }
        let div = self.model.divisibility();
        for a in 0..3 {
            let p = self.sampler.size[a];
            if p == 0 || p % div[a] != 0 {
                return bad(format!(
                    "patch size {:?} is not divisible by the pooling factors {:?}",
                    self.sampler.size, div
                ));
            }
        }
        if let Some(a) = &self.augment {
            a.validate().map_err(TrainError::InvalidConfig)?;
        }
        if let Some(t) = self.target_dsc {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("target_dsc must lie in [0, 1], got {t}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub lr_halved: bool,
    pub train_dsc: BTreeMap<Target, f64>,
    pub val_dsc: BTreeMap<Target, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub model: ModelGraph<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &ModelGraph<f32>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, model: &mut ModelGraph<f32>, grads: &[Vec<f32>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.cfg.eps as f32);
        let step_size = (lr / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        for (((p, g), m), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.values.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Builds the per-encoder input tensors from a study.
pub fn model_inputs(cfg: &ModelConfig, s: &Study) -> Result<Vec<Tensor<f32>>, TrainError> {
    let g = s.geometry().ok_or_else(|| TrainError::MissingData {
        patient: s.patient_id.clone(),
        what: "volumes".into(),
    })?;
    cfg.input_modalities()
        .iter()
        .map(|mods| {
            let fields = mods
                .iter()
                .map(|m| {
                    s.volume(*m).map(|v| v.voxels()).ok_or_else(|| TrainError::MissingData {
                        patient: s.patient_id.clone(),
                        what: format!("a {m} volume"),
                    })
                })
                .collect::<Result<Vec<&[f32]>, _>>()?;
            Ok(Tensor::stack(g.dims, &fields))
        })
        .collect()
}

/// Ground-truth masks of every target as single-channel float tensors.
pub fn target_masks(targets: &[Target], s: &Study) -> Result<BTreeMap<Target, Tensor<f32>>, TrainError> {
    targets
        .iter()
        .map(|t| {
            let m = s.mask(*t).ok_or_else(|| TrainError::MissingData {
                patient: s.patient_id.clone(),
                what: format!("a {t} mask"),
            })?;
            let data = m.voxels().iter().map(|&b| b as f32).collect();
            Ok((*t, Tensor::from_vec(1, m.dims(), data)))
        })
        .collect()
}

/// Checks that a study carries every input modality and target mask.
pub fn check_study(cfg: &ModelConfig, s: &Study) -> Result<(), TrainError> {
    model_inputs(cfg, s)?;
    target_masks(&cfg.targets(), s)?;
    Ok(())
}

/// DSC of `pred >= 0.5` against a binary mask; 1 when both are empty.
pub fn hard_dsc(pred: &[f32], mask: &[f32]) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &m) in pred.iter().zip(mask) {
        let p = p >= 0.5;
        let m = m >= 0.5;
        inter += (p && m) as usize;
        a += p as usize;
        b += m as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Evaluates loss and hard DSC of `model` on one prepared example.
fn score(
    model: &ModelGraph<f32>,
    inputs: &[Tensor<f32>],
    masks: &BTreeMap<Target, Tensor<f32>>,
    loss: &LossConfig,
) -> Result<(f64, BTreeMap<Target, f64>), TrainError> {
    let out = model.forward(inputs)?;
    let preds: BTreeMap<Target, Tensor<f32>> = out.targets().into_iter().collect();
    let l = dice_loss(&preds, masks, loss)?;
    let dsc = preds
        .iter()
        .map(|(t, p)| (*t, hard_dsc(p.data(), masks[t].data())))
        .collect();
    Ok((l.value as f64, dsc))
}

struct Example {
    inputs: Vec<Tensor<f32>>,
    masks: BTreeMap<Target, Tensor<f32>>,
}

fn mean_dsc(acc: &BTreeMap<Target, f64>, n: usize) -> BTreeMap<Target, f64> {
    acc.iter().map(|(t, v)| (*t, v / n.max(1) as f64)).collect()
}

pub fn train(cfg: &TrainConfig, train_studies: &[Study], val_studies: &[Study]) -> Result<TrainOutcome, TrainError> {
    train_with_observer(cfg, train_studies, val_studies, &mut |_| {})
}

/// Trains from He-normal initial weights; `observer` sees every finished epoch.
///
/// Without validation studies the epoch's mean training loss drives the
/// schedule, early stopping and weight selection.
pub fn train_with_observer(
    cfg: &TrainConfig,
    train_studies: &[Study],
    val_studies: &[Study],
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let targets = cfg.model.targets();
    for s in train_studies.iter().chain(val_studies) {
        check_study(&cfg.model, s)?;
    }
    let mut model = ModelGraph::<f32>::build(&cfg.model)?;
    model.init_weights(cfg.seed);
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
            best_epoch: None,
            stop_reason: StopReason::MaxEpochs,
        });
    }
    if train_studies.is_empty() {
        return Err(TrainError::InvalidConfig("no training studies".into()));
    }
    let samplers = train_studies
        .iter()
        .map(|s| PatchSampler::new(s, cfg.sampler))
        .collect::<Result<Vec<_>, _>>()?;
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_0001));
    let mut val_examples = Vec::new();
    for s in val_studies {
        let sampler = PatchSampler::new(s, cfg.sampler)?;
        for _ in 0..cfg.val_patches_per_patient.max(1) {
            let p = sampler.sample(&mut val_rng)?;
            val_examples.push(Example {
                inputs: model_inputs(&cfg.model, &p.study)?,
                masks: target_masks(&targets, &p.study)?,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_0002));
    let mut adam = Adam::new(&model, cfg.optimizer);
    let mut schedule = PlateauScheduler::new(cfg.optimizer.lr, cfg.lr_schedule);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut since_best = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        let mut order: Vec<usize> = (0..samplers.len())
            .flat_map(|i| std::iter::repeat_n(i, cfg.patches_per_patient))
            .collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut dsc_sum: BTreeMap<Target, f64> = targets.iter().map(|t| (*t, 0.0)).collect();
        for (step, &i) in order.iter().enumerate() {
            let mut patch = samplers[i].sample(&mut rng)?;
            if let Some(a) = &cfg.augment {
                patch = augment_with_rng(&patch, a, &mut rng)?;
            }
            let inputs = model_inputs(&cfg.model, &patch.study)?;
            let masks = target_masks(&targets, &patch.study)?;
            let trace = model.forward_trace(&inputs)?;
            let preds: BTreeMap<Target, Tensor<f32>> = trace.output.targets().into_iter().collect();
            let l = dice_loss(&preds, &masks, &cfg.loss)?;
            let value = l.value as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss: value });
            }
            loss_sum += value;
            for (t, p) in &preds {
                *dsc_sum.get_mut(t).unwrap() += hard_dsc(p.data(), masks[t].data());
            }
            let head_grads = head_gradients(&trace.output.head_targets, &l.grads, trace.output.heads[0].spatial());
            let grads = model.backward(&trace, &head_grads);
            drop(trace);
            adam.update(&mut model, &grads, lr);
        }
        let train_loss = loss_sum / order.len() as f64;
        let train_dsc = mean_dsc(&dsc_sum, order.len());
        let (val_loss, val_dsc) = if val_examples.is_empty() {
            (train_loss, train_dsc.clone())
        } else {
            let mut vl = 0.0;
            let mut vd: BTreeMap<Target, f64> = targets.iter().map(|t| (*t, 0.0)).collect();
            for ex in &val_examples {
                let (l, d) = score(&model, &ex.inputs, &ex.masks, &cfg.loss)?;
                vl += l;
                for (t, v) in d {
                    *vd.get_mut(&t).unwrap() += v;
                }
            }
            (vl / val_examples.len() as f64, mean_dsc(&vd, val_examples.len()))
        };
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step: order.len(),
                loss: val_loss,
            });
        }
        let lr_halved = schedule.step(val_loss);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.flat_weights()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            lr_halved,
            train_dsc,
            val_dsc,
        };
        observer(&record);
        let reached = cfg
            .target_dsc
            .is_some_and(|t| record.val_dsc.values().all(|&d| d > t));
        history.push(record);
        if reached {
            stop_reason = StopReason::TargetReached;
            break;
        }
        if since_best >= cfg.early_stop_patience {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, w)) = best {
        model.set_flat_weights(&w)?;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stop_reason,
    })
}

/// Arranges per-target loss gradients into per-head tensors.
fn head_gradients(
    head_targets: &[Vec<Target>],
    grads: &BTreeMap<Target, Tensor<f32>>,
    spatial: [usize; 3],
) -> Vec<Tensor<f32>> {
    head_targets
        .iter()
        .map(|ts| {
            let fields: Vec<&[f32]> = ts.iter().map(|t| grads[t].data()).collect();
            Tensor::stack(spatial, &fields)
        })
        .collect()
}

/// JSON sidecar stored next to the raw weights of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub variant_name: String,
    pub parameter_count: usize,
    pub seed: u64,
    #[serde(deserialize_with = "model_from_json")]
    pub model: ModelConfig,
    /// Patch size the model was trained on (used as inference window).
    pub patch_size: [usize; 3],
}

/// Writes `weights.f32` (little-endian) and `checkpoint.json` into `dir`.
pub fn save_checkpoint(
    model: &ModelGraph<f32>,
    seed: u64,
    patch_size: [usize; 3],
    dir: impl AsRef<Path>,
) -> Result<(), TrainError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IoError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let bytes: Vec<u8> = model.flat_weights().iter().flat_map(|v| v.to_le_bytes()).collect();
    let weights_path = dir.join("weights.f32");
    std::fs::write(&weights_path, bytes).map_err(io(&weights_path))?;
    let manifest = CheckpointManifest {
        variant_name: model.config().variant_name.clone(),
        parameter_count: model.count_parameters(),
        seed,
        model: model.config().clone(),
        patch_size,
    };
    write_json(&dir.join("checkpoint.json"), &manifest)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelGraph<f32>, CheckpointManifest), TrainError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("checkpoint.json");
    if !manifest_path.exists() {
        return Err(IoError::MissingSidecar(manifest_path).into());
    }
    let manifest: CheckpointManifest = read_json(&manifest_path)?;
    let weights_path = dir.join("weights.f32");
    let bytes = std::fs::read(&weights_path).map_err(|_| IoError::MissingData(weights_path.clone()))?;
    if bytes.len() % 4 != 0 {
        return Err(IoError::TruncatedPayload(bytes.len()).into());
    }
    let flat: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut model = ModelGraph::<f32>::build(&manifest.model)?;
    model.set_flat_weights(&flat)?;
    Ok((model, manifest))
}

/// Modalities a model needs as input, flattened.
pub fn required_modalities(cfg: &ModelConfig) -> Vec<Modality> {
    cfg.input_modalities().into_iter().flatten().collect()
}
