//! Losses, BC-stratified masked-loss samples, and the training loop.
//!
//! The coupled loss is `w_bce * BCE + w_dice * (1 - Dice)`, each term reduced
//! over the pixels the loss mask admits. Within a batch, masked pixels from
//! all images pool into one reduction, so the loss is averaged per masked
//! pixel rather than per image.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::ProbMap;
use crate::eval;
use crate::imgio::{BinaryMask, Image, ImgError, SamplePair};
use crate::nncore::{
    adam_step, masked_bce_value, masked_dice_value, AdamParams, AdamState, Graph, NnError, NodeId,
    Tensor,
};
use crate::rng;
use crate::skinny::{self, NetworkConfig, SkinnyError, WeightStore};

use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptySet,
    #[error("sample {id} has {got} channels, network expects {expected}")]
    ChannelMismatch { id: usize, expected: usize, got: usize },
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize, record: TrainRecord },
    #[error(transparent)]
    Skinny(#[from] SkinnyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Img(#[from] ImgError),
}

/// One training example: the network input, the ground truth, and the pixels
/// that participate in the loss.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Image,
    pub truth: BinaryMask,
    pub loss_mask: BinaryMask,
}

impl TrainSample {
    /// Sample with an all-true loss mask.
    pub fn new(input: Image, truth: BinaryMask) -> Result<Self, TrainError> {
        let mask = BinaryMask::filled(truth.height(), truth.width(), true);
        Self::with_mask(input, truth, mask)
    }

    pub fn with_mask(input: Image, truth: BinaryMask, loss_mask: BinaryMask) -> Result<Self, TrainError> {
        if input.height() != truth.height()
            || input.width() != truth.width()
            || !truth.same_dims(&loss_mask)
        {
            return Err(TrainError::DimensionMismatch(format!(
                "input {}x{}, truth {}x{}, loss mask {}x{}",
                input.height(),
                input.width(),
                truth.height(),
                truth.width(),
                loss_mask.height(),
                loss_mask.width()
            )));
        }
        Ok(Self { input, truth, loss_mask })
    }
}

/// Scalar loss value plus a flag marking an empty loss mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub empty_mask: bool,
}

fn check_loss_dims(pred: &ProbMap, truth: &BinaryMask, mask: &BinaryMask) -> Result<(), TrainError> {
    if pred.height() != truth.height() || pred.width() != truth.width() || !truth.same_dims(mask) {
        return Err(TrainError::DimensionMismatch("loss inputs".into()));
    }
    Ok(())
}

fn to_f64_parts(pred: &ProbMap, truth: &BinaryMask) -> (Vec<f64>, Vec<f64>) {
    let p = pred.values().iter().map(|&v| f64::from(v)).collect();
    let g = truth.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    (p, g)
}

/// Mean binary cross entropy over masked pixels; 0 on an empty mask.
pub fn bce_loss(pred: &ProbMap, truth: &BinaryMask, mask: &BinaryMask) -> Result<MaskedLoss, TrainError> {
    check_loss_dims(pred, truth, mask)?;
    let (p, g) = to_f64_parts(pred, truth);
    let (value, empty_mask) = masked_bce_value(&p, &g, mask.bits());
    Ok(MaskedLoss { value, empty_mask })
}

/// Soft Dice coefficient over masked pixels; 1 on an empty mask.
pub fn dice_coeff(pred: &ProbMap, truth: &BinaryMask, mask: &BinaryMask) -> Result<MaskedLoss, TrainError> {
    check_loss_dims(pred, truth, mask)?;
    let (p, g) = to_f64_parts(pred, truth);
    let (value, empty_mask) = masked_dice_value(&p, &g, mask.bits());
    Ok(MaskedLoss { value, empty_mask })
}

/// `w_bce * BCE + w_dice * (1 - Dice)`.
pub fn coupled_loss(
    pred: &ProbMap,
    truth: &BinaryMask,
    mask: &BinaryMask,
    weights: (f64, f64),
) -> Result<MaskedLoss, TrainError> {
    let bce = bce_loss(pred, truth, mask)?;
    let dice = dice_coeff(pred, truth, mask)?;
    Ok(MaskedLoss {
        value: weights.0 * bce.value + weights.1 * (1.0 - dice.value),
        empty_mask: bce.empty_mask,
    })
}

/// Which stratified model a sample is prepared for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Loss restricted to BC-predicted skin (suppresses BC false positives).
    Skin,
    /// Loss restricted to BC-predicted non-skin (recovers BC false negatives).
    NonSkin,
    /// No stratification; every pixel participates.
    None,
}

/// Builds a training sample whose loss mask follows the BC's decision
/// regions. The network always sees the whole image.
pub fn stratify_sample(
    sample: &SamplePair,
    bc_mask: &BinaryMask,
    branch: Branch,
) -> Result<TrainSample, TrainError> {
    if !sample.truth.same_dims(bc_mask) {
        return Err(TrainError::DimensionMismatch("bc mask vs sample".into()));
    }
    let loss_mask = match branch {
        Branch::Skin => bc_mask.clone(),
        Branch::NonSkin => bc_mask.complement(),
        Branch::None => BinaryMask::filled(bc_mask.height(), bc_mask.width(), true),
    };
    TrainSample::with_mask(sample.image.clone(), sample.truth.clone(), loss_mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub w_bce: f64,
    pub w_dice: f64,
    pub seed: u64,
    /// Validation cadence in epochs.
    pub checkpoint_every: usize,
    /// Decision threshold of the validation F-score.
    pub val_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch_size: 4,
            w_bce: 1.0,
            w_dice: 1.0,
            seed: 0,
            checkpoint_every: 1,
            val_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if self.w_bce < 0.0 || self.w_dice < 0.0 || (self.w_bce == 0.0 && self.w_dice == 0.0) {
            return Err(TrainError::Config(
                "loss weights must be non-negative and not both zero".into(),
            ));
        }
        if self.checkpoint_every < 1 {
            return Err(TrainError::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub epoch: usize,
    pub f_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Mean batch loss per completed epoch.
    pub epoch_loss: Vec<f64>,
    pub validation: Vec<ValPoint>,
    /// Epoch whose weights were returned (1-based); None without validation.
    pub best_epoch: Option<usize>,
    pub wall_time_s: f64,
}

/// One batch as a single graph: every sample's network shares the parameter
/// slots, predictions concatenate into one flat vector, and the pooled
/// masked losses couple into the scalar sink.
fn batch_loss_graph(
    cfg: &NetworkConfig,
    weights: &WeightStore,
    batch: &[&TrainSample],
    tcfg: &TrainConfig,
) -> Result<(Graph<f32>, Vec<(NodeId, Tensor<f32>)>), TrainError> {
    let mut graph = Graph::new();
    let mut binds = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    let mut truth_cat: Vec<f32> = Vec::new();
    let mut mask_cat: Vec<bool> = Vec::new();
    let stride = cfg.stride();
    for s in batch {
        let (h, w) = (s.input.height(), s.input.width());
        let ph = h.div_ceil(stride) * stride;
        let pw = w.div_ceil(stride) * stride;
        let (input, out) = skinny::append_network(&mut graph, &weights.params, cfg, ph, pw)?;
        binds.push((input, skinny::image_to_tensor::<f32>(&s.input, ph, pw)));
        preds.push(out);
        // padded pixels never participate in the loss
        for y in 0..ph {
            for x in 0..pw {
                let inside = y < h && x < w;
                truth_cat.push(if inside && s.truth.get(y, x) { 1.0 } else { 0.0 });
                mask_cat.push(inside && s.loss_mask.get(y, x));
            }
        }
    }
    let flat = graph.concat_flat(&preds)?;
    let bce = graph.masked_bce(flat, truth_cat.clone(), mask_cat.clone())?;
    let dice = graph.masked_dice(flat, truth_cat, mask_cat)?;
    let _loss = graph.couple_loss(bce, dice, tcfg.w_bce as f32, tcfg.w_dice as f32)?;
    Ok((graph, binds))
}

/// Micro-averaged F-score of the current weights over a validation set.
fn validation_f(weights: &WeightStore, val: &[TrainSample], threshold: f64) -> Result<f64, TrainError> {
    let mut pooled = eval::Confusion::default();
    for s in val {
        let map = skinny::forward(weights, &s.input)?;
        let mask = crate::bayes::binarize(&map, threshold)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let c = eval::confusion(&mask, &s.truth)
            .map_err(|e| TrainError::DimensionMismatch(e.to_string()))?;
        pooled.merge(&c);
    }
    Ok(eval::prf(&pooled).f_score)
}

/// Deterministic training loop: seeded shuffling, pooled batch loss, Adam.
/// Returns the weights of the best validation epoch (final weights when no
/// validation samples are supplied).
pub fn train_model(
    cfg: &NetworkConfig,
    tcfg: &TrainConfig,
    samples: &[TrainSample],
    val: &[TrainSample],
) -> Result<(WeightStore, TrainRecord), TrainError> {
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptySet);
    }
    for (i, s) in samples.iter().chain(val).enumerate() {
        if s.input.channels() != cfg.in_channels {
            return Err(TrainError::ChannelMismatch {
                id: i,
                expected: cfg.in_channels,
                got: s.input.channels(),
            });
        }
    }

    let started = Instant::now();
    let mut weights = skinny::build(cfg)?;
    let mut state = AdamState::for_params(&weights.params);
    let adam = AdamParams::with_lr(tcfg.lr);
    let mut record = TrainRecord {
        epoch_loss: Vec::with_capacity(tcfg.epochs),
        validation: Vec::new(),
        best_epoch: None,
        wall_time_s: 0.0,
    };
    let mut step = 0usize;
    let mut best: Option<(f64, crate::nncore::ParamStore<f32>)> = None;

    for epoch in 1..=tcfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = rng::stream(tcfg.seed, "shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (mut graph, binds) = batch_loss_graph(cfg, &weights, &batch, tcfg)?;
            let bound: Vec<(NodeId, &Tensor<f32>)> = binds.iter().map(|(id, t)| (*id, t)).collect();
            // an overflowed forward pass (non-finite activations) is the same
            // divergence as a NaN loss
            let loss = match graph.forward(&weights.params, &bound) {
                Ok(()) => f64::from(
                    graph
                        .activation(graph.last_node().expect("nonempty graph"))
                        .expect("forward cached")
                        .item(),
                ),
                Err(NnError::NonFinite(_)) => f64::NAN,
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() {
                record.wall_time_s = started.elapsed().as_secs_f64();
                return Err(TrainError::Diverged { epoch, record });
            }
            let grads = graph.backward(&weights.params)?;
            step += 1;
            adam_step(&mut weights.params, &grads.params, &mut state, step, &adam)?;
            epoch_loss += loss;
            batches += 1;
        }
        record.epoch_loss.push(epoch_loss / batches.max(1) as f64);

        if !val.is_empty() && (epoch % tcfg.checkpoint_every == 0 || epoch == tcfg.epochs) {
            let f = validation_f(&weights, val, tcfg.val_threshold)?;
            record.validation.push(ValPoint { epoch, f_score: f });
            // ties go to the later epoch: equal F, more training
            let improved = best.as_ref().map_or(true, |(bf, _)| f >= *bf);
            if improved {
                best = Some((f, weights.params.clone()));
                record.best_epoch = Some(epoch);
            }
        }
    }

    if let Some((_, params)) = best {
        weights.params = params;
    }
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok((weights, record))
}
