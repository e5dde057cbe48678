//! Training loops and the transfer-learning protocols.
//!
//! The epoch loop (warm-up, early stopping on validation loss, best-epoch
//! selection on validation AUC) is generic over an [`EpochBackend`], so its
//! control flow can be exercised with scripted metric schedules independent
//! of any real model. [`ModelBackend`] is the real thing: deterministic
//! mini-batch SGD with Adam, per-sample augmentation RNG streams and a
//! per-epoch leakage assertion.

use crate::augment::{augment, AugmentConfig};
use crate::cohort::SplitManifest;
use crate::metrics::{roc_auc, MetricsError};
use crate::nn::checkpoint::{Checkpoint, CheckpointMeta, Domain};
use crate::nn::graph::{FreezePlan, Model, NodeCache};
use crate::nn::loss::{self, LossConfig};
use crate::nn::optim::{Adam, AdamParams};
use crate::nn::{backbone, ModelError};
use crate::types::{Modality, SliceSample};
use ndarray::{Array1, Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use thiserror::Error;

/// Internal GEMM batch cap; gradients accumulate across micro-batches in a
/// fixed order, so the split never changes results, only memory use.
const MICRO_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("undefined AUC: {0}")]
    UndefinedAuc(String),
    #[error("divergence: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("leakage error: {0}")]
    Leakage(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
}

fn default_lr_warmup() -> f64 {
    1e-8
}

fn default_warmup_epochs() -> usize {
    5
}

fn default_patience() -> usize {
    40
}

fn default_min_delta() -> f64 {
    1e-4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_main: f64,
    #[serde(default = "default_lr_warmup")]
    pub lr_warmup: f64,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_min_delta")]
    pub early_stop_min_delta: f64,
    #[serde(default)]
    pub l2_coeff: f64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub freeze: FreezePlan,
    #[serde(default = "default_true")]
    pub freeze_norm_stats: bool,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub adam: AdamParams,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_main > 0.0) || !(self.lr_warmup > 0.0) {
            return Err(TrainError::Config("learning rates must be > 0".into()));
        }
        if self.early_stop_patience < 1 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if self.l2_coeff < 0.0 {
            return Err(TrainError::Config("l2_coeff must be >= 0".into()));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::Config("max_epochs must be >= 1".into()));
        }
        self.loss.validate().map_err(TrainError::Model)?;
        self.augment.validate()?;
        Ok(())
    }

    /// SHA-256 of the serialized config; stamped into checkpoint metadata.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Main,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best_val_auc(&self) -> f64 {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map(|r| r.val_auc)
            .unwrap_or(f64::NAN)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

pub struct EpochMetrics {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

/// One epoch of work plus best-weights bookkeeping; the loop drives this.
pub trait EpochBackend {
    fn run_epoch(&mut self, epoch: usize, lr: f64) -> Result<EpochMetrics, TrainError>;
    /// Called when the current epoch attains a new best validation AUC.
    fn mark_best(&mut self);
}

/// Warm-up, early-stopping and best-epoch control flow.
///
/// Validation loss must improve by more than `early_stop_min_delta` to reset
/// the patience counter; counting starts only after the warm-up phase. The
/// best epoch is the argmax of validation AUC with ties going to the
/// earliest epoch.
pub fn run_training_loop<B: EpochBackend>(
    backend: &mut B,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut best_val_loss = f64::INFINITY;
    let mut best_val_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stall = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let warmup = epoch <= cfg.warmup_epochs;
        let (phase, lr) = if warmup {
            (Phase::Warmup, cfg.lr_warmup)
        } else {
            (Phase::Main, cfg.lr_main)
        };
        let m = backend.run_epoch(epoch, lr)?;
        if !m.train_loss.is_finite() || !m.val_loss.is_finite() {
            return Err(TrainError::Divergence { epoch });
        }
        records.push(EpochRecord {
            epoch,
            phase,
            lr,
            train_loss: m.train_loss,
            val_loss: m.val_loss,
            val_auc: m.val_auc,
        });

        if m.val_auc > best_val_auc {
            best_val_auc = m.val_auc;
            best_epoch = epoch;
            backend.mark_best();
        }

        if best_val_loss - m.val_loss > cfg.early_stop_min_delta {
            best_val_loss = m.val_loss;
            stall = 0;
        } else if !warmup {
            stall += 1;
            if stall >= cfg.early_stop_patience {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    Ok(TrainHistory {
        records,
        best_epoch,
        stop_reason,
    })
}

/// A labeled image set bound to the patient ids it is allowed to contain.
#[derive(Debug, Clone)]
pub struct Sample {
    pub patient_id: String,
    pub image: Array2<f32>,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct DataSet {
    pub samples: Vec<Sample>,
    pub modality: Modality,
    pub allowed_patients: BTreeSet<String>,
}

impl DataSet {
    pub fn new(
        samples: Vec<Sample>,
        modality: Modality,
        allowed_patients: BTreeSet<String>,
    ) -> Result<DataSet, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::Data("dataset is empty".into()));
        }
        let hw = samples[0].image.dim();
        if samples.iter().any(|s| s.image.dim() != hw) {
            return Err(TrainError::Data("samples disagree on image dims".into()));
        }
        Ok(DataSet {
            samples,
            modality,
            allowed_patients,
        })
    }

    pub fn from_slices(
        slices: Vec<SliceSample>,
        modality: Modality,
        allowed_patients: BTreeSet<String>,
    ) -> Result<DataSet, TrainError> {
        let samples = slices
            .into_iter()
            .map(|s| Sample {
                patient_id: s.patient_id,
                image: s.image,
                label: s.label,
            })
            .collect();
        DataSet::new(samples, modality, allowed_patients)
    }

    pub fn from_patches(
        patches: Vec<crate::patching::Patch>,
        modality: Modality,
        allowed_patients: BTreeSet<String>,
    ) -> Result<DataSet, TrainError> {
        let samples = patches
            .into_iter()
            .map(|p| Sample {
                patient_id: p.patient_id,
                image: p.pixels,
                label: p.label,
            })
            .collect();
        DataSet::new(samples, modality, allowed_patients)
    }

    pub fn image_hw(&self) -> (usize, usize) {
        self.samples[0].image.dim()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn has_both_classes(&self) -> bool {
        let labels = self.labels();
        labels.contains(&0) && labels.contains(&1)
    }

    /// Every sample's patient must be in the allowed set.
    pub fn verify_no_leakage(&self) -> Result<(), TrainError> {
        for s in &self.samples {
            if !self.allowed_patients.contains(&s.patient_id) {
                return Err(TrainError::Leakage(format!(
                    "sample from patient {:?} is outside the allowed split",
                    s.patient_id
                )));
            }
        }
        Ok(())
    }
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c.wrapping_mul(0x94D0_49BB_1331_11EB));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x
}

/// Stack images into an `(N, C, H, W)` batch, replicating channels when the
/// model expects 3-channel input.
fn assemble_batch(images: &[&Array2<f32>], channels: usize) -> Array4<f32> {
    let (h, w) = images[0].dim();
    let mut x = Array4::<f32>::zeros((images.len(), channels, h, w));
    for (i, img) in images.iter().enumerate() {
        for c in 0..channels {
            x.slice_mut(ndarray::s![i, c, .., ..]).assign(img);
        }
    }
    x
}

/// Real training backend: one model, one optimizer, two datasets.
pub struct ModelBackend<'a> {
    model: &'a mut Model,
    opt: Adam,
    train_set: &'a DataSet,
    val_set: &'a DataSet,
    cfg: &'a TrainConfig,
    best_weights: Option<Vec<ndarray::ArrayD<f32>>>,
}

impl<'a> ModelBackend<'a> {
    pub fn new(
        model: &'a mut Model,
        train_set: &'a DataSet,
        val_set: &'a DataSet,
        cfg: &'a TrainConfig,
    ) -> Result<ModelBackend<'a>, TrainError> {
        let opt = Adam::new(model, cfg.adam);
        Ok(ModelBackend {
            model,
            opt,
            train_set,
            val_set,
            cfg,
            best_weights: None,
        })
    }

    fn evaluate(&mut self) -> Result<(f64, f64), TrainError> {
        let (probs, labels) = predict_dataset(self.model, self.val_set)?;
        let data_loss = loss::batch_loss(&self.cfg.loss, &probs, &labels);
        let val_loss = data_loss + self.cfg.l2_coeff * self.model.l2_penalty();
        let auc = roc_auc(&probs, &labels)?.auc;
        Ok((val_loss, auc))
    }

    pub fn into_best_weights(self) -> Option<Vec<ndarray::ArrayD<f32>>> {
        self.best_weights
    }
}

impl EpochBackend for ModelBackend<'_> {
    fn run_epoch(&mut self, epoch: usize, lr: f64) -> Result<EpochMetrics, TrainError> {
        // Leakage is asserted every epoch, not just at construction.
        self.train_set.verify_no_leakage()?;
        self.val_set.verify_no_leakage()?;

        let n = self.train_set.samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);

        let channels = self.model.spec.input_channels;
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(self.cfg.batch_size) {
            self.model.zero_grads();
            for micro in batch.chunks(MICRO_BATCH) {
                // Augment with per-sample RNG streams derived from
                // (seed, epoch, dataset index): worker scheduling can never
                // change the draw.
                let mut images: Vec<Array2<f32>> = Vec::with_capacity(micro.len());
                for &idx in micro {
                    let s = &self.train_set.samples[idx];
                    if self.cfg.augment.enabled {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                            self.cfg.seed,
                            epoch as u64,
                            idx as u64 + 1,
                        ));
                        images.push(augment(&s.image, &self.cfg.augment, &mut rng)?);
                    } else {
                        images.push(s.image.clone());
                    }
                }
                let refs: Vec<&Array2<f32>> = images.iter().collect();
                let x = assemble_batch(&refs, channels);
                let labels: Vec<u8> = micro
                    .iter()
                    .map(|&i| self.train_set.samples[i].label)
                    .collect();

                let mut caches: Vec<NodeCache> = Vec::new();
                let logits = self.model.forward_logits(x, true, Some(&mut caches))?;
                let mut dlogits = Array1::<f32>::zeros(micro.len());
                for (i, (&z, &y)) in logits.iter().zip(labels.iter()).enumerate() {
                    let p = loss::sigmoid_clamped(z as f64);
                    loss_sum += loss::item_loss(&self.cfg.loss, p, y);
                    dlogits[i] =
                        (loss::grad_wrt_logit(&self.cfg.loss, z as f64, y) / batch.len() as f64)
                            as f32;
                }
                self.model.backward(&dlogits, caches)?;
            }
            self.opt.step(self.model, lr, self.cfg.l2_coeff);
        }
        let train_loss = loss_sum / n as f64 + self.cfg.l2_coeff * self.model.l2_penalty();
        let (val_loss, val_auc) = self.evaluate()?;
        Ok(EpochMetrics {
            train_loss,
            val_loss,
            val_auc,
        })
    }

    fn mark_best(&mut self) {
        self.best_weights = Some(self.model.snapshot_weights());
    }
}

/// Eval-mode probabilities and labels over a whole dataset.
pub fn predict_dataset(
    model: &mut Model,
    data: &DataSet,
) -> Result<(Vec<f64>, Vec<u8>), TrainError> {
    let channels = model.spec.input_channels;
    let mut probs = Vec::with_capacity(data.samples.len());
    for chunk in data.samples.chunks(MICRO_BATCH) {
        let refs: Vec<&Array2<f32>> = chunk.iter().map(|s| &s.image).collect();
        let x = assemble_batch(&refs, channels);
        probs.extend(model.predict_probs(x)?);
    }
    Ok((probs, data.labels()))
}

/// Mean data loss plus the L2 penalty term on a fixed weight snapshot.
/// Exposed so the `total = data + l2 * sum(w^2)` identity can be checked
/// directly.
pub fn training_loss(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &DataSet,
) -> Result<(f64, f64), TrainError> {
    let (probs, labels) = predict_dataset(model, data)?;
    let data_loss = loss::batch_loss(&cfg.loss, &probs, &labels);
    Ok((data_loss + cfg.l2_coeff * model.l2_penalty(), data_loss))
}

fn validate_sets(train_set: &DataSet, val_set: &DataSet) -> Result<(), TrainError> {
    if !train_set.has_both_classes() {
        return Err(TrainError::Data(
            "training set must contain both classes".into(),
        ));
    }
    if !val_set.has_both_classes() {
        return Err(TrainError::UndefinedAuc(
            "validation set must contain both classes for AUC".into(),
        ));
    }
    Ok(())
}

/// Train `model` and return the best checkpoint (max validation AUC) plus
/// the epoch history.
pub fn train(
    model: &mut Model,
    train_set: &DataSet,
    val_set: &DataSet,
    cfg: &TrainConfig,
    domain: Domain,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    cfg.validate()?;
    validate_sets(train_set, val_set)?;
    train_set.verify_no_leakage()?;
    val_set.verify_no_leakage()?;
    if train_set.image_hw() != model.spec.input_hw {
        return Err(TrainError::Data(format!(
            "training images are {:?} but the model expects {:?}",
            train_set.image_hw(),
            model.spec.input_hw
        )));
    }
    model.apply_freeze(cfg.freeze, cfg.freeze_norm_stats)?;

    let mut backend = ModelBackend::new(model, train_set, val_set, cfg)?;
    let history = run_training_loop(&mut backend, cfg)?;
    let best = backend
        .into_best_weights()
        .expect("at least one epoch ran, so a best epoch exists");
    model.restore_weights(&best);

    let meta = CheckpointMeta {
        domain,
        modality: train_set.modality,
        backbone: model.spec.clone(),
        input_hw: model.spec.input_hw,
        config_hash: cfg.config_hash(),
        best_val_auc: history.best_val_auc(),
        epoch: history.best_epoch,
        source_checkpoint: None,
    };
    Ok((Checkpoint::from_model(model, meta), history))
}

/// Verify a dataset only contains patients assigned to `expected` in the
/// manifest.
pub fn verify_split_membership(
    data: &DataSet,
    manifest: &SplitManifest,
    expected: crate::cohort::SplitSet,
) -> Result<(), TrainError> {
    for s in &data.samples {
        match manifest.set_of(&s.patient_id) {
            Some(set) if set == expected => {}
            Some(set) => {
                return Err(TrainError::Leakage(format!(
                    "patient {:?} belongs to the {} set, not {}",
                    s.patient_id,
                    set.as_str(),
                    expected.as_str()
                )))
            }
            None => {
                return Err(TrainError::Leakage(format!(
                    "patient {:?} is not in the split manifest",
                    s.patient_id
                )))
            }
        }
    }
    Ok(())
}

/// Source-domain pre-training on patches. The patch sets must come from the
/// training and validation splits respectively; anything else is a leakage
/// error.
pub fn pretrain_on_patches(
    spec: &backbone::BackboneSpec,
    patch_train: &DataSet,
    patch_val: &DataSet,
    cfg: &TrainConfig,
    manifest: Option<&SplitManifest>,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    if let Some(m) = manifest {
        verify_split_membership(patch_train, m, crate::cohort::SplitSet::Train)?;
        verify_split_membership(patch_val, m, crate::cohort::SplitSet::Val)?;
    }
    patch_train.verify_no_leakage()?;
    patch_val.verify_no_leakage()?;
    let mut model = backbone::build_model(spec, backbone::Init::Random { seed: cfg.seed })?;
    train(&mut model, patch_train, patch_val, cfg, Domain::Patch)
}

fn transfer(
    src: &Checkpoint,
    slice_train: &DataSet,
    slice_val: &DataSet,
    target_hw: (usize, usize),
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    let target_spec = backbone::BackboneSpec {
        input_hw: target_hw,
        ..src.meta.backbone.clone()
    };
    let mut model = crate::nn::checkpoint::transplant_conv_stack(
        src,
        &target_spec,
        mix_seed(cfg.seed, 0x7EAD, 0),
    )?;
    let (mut ckpt, history) = train(&mut model, slice_train, slice_val, cfg, Domain::Slice)?;
    ckpt.meta.source_checkpoint = Some(src.weights_digest());
    Ok((ckpt, history))
}

/// Patch-to-slice transfer within one modality: transplant the conv stack to
/// the slice input size, warm up at a small learning rate, then train.
pub fn self_transfer(
    patch_ckpt: &Checkpoint,
    slice_train: &DataSet,
    slice_val: &DataSet,
    target_hw: (usize, usize),
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    if patch_ckpt.meta.domain != Domain::Patch {
        return Err(TrainError::Protocol(
            "self transfer requires a patch-domain source checkpoint".into(),
        ));
    }
    if patch_ckpt.meta.modality != slice_train.modality {
        return Err(TrainError::Protocol(format!(
            "source modality {:?} does not match slice modality {:?}; use the cross-modality protocol instead",
            patch_ckpt.meta.modality, slice_train.modality
        )));
    }
    transfer(patch_ckpt, slice_train, slice_val, target_hw, cfg)
}

/// Patch-to-slice transfer across modalities, with a progressive low-rate
/// adaptation phase before the main learning rate and an optional freeze
/// plan in the target domain.
pub fn cross_transfer(
    source_patch_ckpt: &Checkpoint,
    target_slice_train: &DataSet,
    target_slice_val: &DataSet,
    target_hw: (usize, usize),
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    if source_patch_ckpt.meta.domain != Domain::Patch {
        return Err(TrainError::Protocol(
            "cross transfer requires a patch-domain source checkpoint".into(),
        ));
    }
    if source_patch_ckpt.meta.modality == target_slice_train.modality {
        return Err(TrainError::Protocol(format!(
            "cross transfer needs distinct modalities, both are {:?}",
            source_patch_ckpt.meta.modality
        )));
    }
    transfer(
        source_patch_ckpt,
        target_slice_train,
        target_slice_val,
        target_hw,
        cfg,
    )
}
