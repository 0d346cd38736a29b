//! Dice loss, the early-stopped training loop, cross-validation driver and
//! checkpoint files.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FoldPlan, Sample};
use crate::model::{ModelError, ModelSpec, Network, Variant};
use crate::nn::{Adam, AdamConfig, ParamStore, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss inputs: {0}")]
    LossInput(String),
    #[error("fold {fold}: {what} split is empty")]
    EmptySplit { fold: usize, what: &'static str },
    #[error("fold {fold}: train and validation splits share sample {id}")]
    OverlappingSplit { fold: usize, id: String },
    #[error("sample {id} is {got}x{got2}, model expects {expected}x{expected}")]
    SampleSize { id: String, got: usize, got2: usize, expected: usize },
    #[error("fold {fold}, epoch {epoch}: non-finite {what}; aborting")]
    NonFinite { fold: usize, epoch: usize, what: &'static str },
    #[error("fold plan and samples disagree: {0}")]
    PlanMismatch(String),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Additive smoothing in the Dice loss.
    pub loss_smoothing: f64,
    /// Seeds batch shuffling and, per fold, weight initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            patience: 20,
            max_epochs: 500,
            loss_smoothing: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.loss_smoothing >= 0.0 && self.loss_smoothing.is_finite()) {
            return bad(format!("loss_smoothing {} must be non-negative", self.loss_smoothing));
        }
        Ok(())
    }
}

fn check_loss_inputs<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, eps: f64) -> Result<(), TrainError> {
    if pred.shape() != truth.shape() {
        return Err(TrainError::LossInput(format!(
            "prediction shape {:?} differs from truth shape {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if !(eps >= 0.0) {
        return Err(TrainError::LossInput(format!("smoothing {eps} is negative")));
    }
    if pred.batch() == 0 {
        return Err(TrainError::LossInput("empty batch".into()));
    }
    let zero = T::zero();
    let one = T::one();
    if pred.data().iter().any(|&p| !(p >= zero && p <= one)) {
        return Err(TrainError::LossInput("predictions outside [0, 1]".into()));
    }
    if truth.data().iter().any(|&t| t != zero && t != one) {
        return Err(TrainError::LossInput("truth is not binary".into()));
    }
    Ok(())
}

/// Per-item sums `(sum p*t, sum p, sum t)` in f64.
fn dice_sums<T: Scalar>(p: &[T], t: &[T]) -> (f64, f64, f64) {
    p.iter().zip(t).fold((0.0, 0.0, 0.0), |(pt, sp, st), (&p, &t)| {
        let (p, t) = (p.as_f64(), t.as_f64());
        (pt + p * t, sp + p, st + t)
    })
}

/// Soft Dice loss `1 - (2 sum pt + eps) / (sum p + sum t + eps)` per item,
/// averaged over the batch. An item with a zero denominator (only possible
/// with `eps = 0` and both maps empty) contributes zero loss.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, eps: f64) -> Result<f64, TrainError> {
    check_loss_inputs(pred, truth, eps)?;
    let n = pred.batch();
    let total: f64 = (0..n)
        .map(|i| {
            let (pt, sp, st) = dice_sums(pred.item(i), truth.item(i));
            let den = sp + st + eps;
            if den == 0.0 {
                0.0
            } else {
                1.0 - (2.0 * pt + eps) / den
            }
        })
        .sum();
    Ok(total / n as f64)
}

/// Dice loss and its gradient with respect to `pred`.
pub fn dice_loss_grad<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, eps: f64) -> Result<(f64, Tensor<T>), TrainError> {
    check_loss_inputs(pred, truth, eps)?;
    let n = pred.batch();
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for i in 0..n {
        let (p, t) = (pred.item(i), truth.item(i));
        let (pt, sp, st) = dice_sums(p, t);
        let den = sp + st + eps;
        if den == 0.0 {
            continue;
        }
        let num = 2.0 * pt + eps;
        total += 1.0 - num / den;
        let scale = 1.0 / (den * den * n as f64);
        for (g, &tj) in grad.item_mut(i).iter_mut().zip(t) {
            *g = T::from_f64_lossy(-(2.0 * tj.as_f64() * den - num) * scale);
        }
    }
    Ok((total / n as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Outcome of [`drive_epochs`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epochs_run: usize,
    /// Zero-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochLoss>,
}

/// Tracks strict improvement of the validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records `val_loss` for `epoch`; returns whether it strictly improved.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

/// Runs epochs until the validation loss fails to improve strictly for
/// `patience` consecutive epochs or `max_epochs` is reached.
/// `run_epoch(epoch)` trains one epoch and returns its losses;
/// `on_improve(epoch)` is called after each new best.
pub fn drive_epochs<E>(
    max_epochs: usize,
    patience: usize,
    mut run_epoch: impl FnMut(usize) -> Result<EpochLoss, E>,
    mut on_improve: impl FnMut(usize),
) -> Result<EpochSummary, E> {
    let mut stopper = EarlyStopping::new(patience);
    let mut history = Vec::new();
    for epoch in 0..max_epochs {
        let losses = run_epoch(epoch)?;
        history.push(losses);
        if stopper.observe(epoch, losses.val_loss) {
            on_improve(epoch);
        }
        if stopper.should_stop() {
            break;
        }
    }
    let (best_epoch, best_val_loss) = stopper.best().unwrap_or((0, f64::INFINITY));
    Ok(EpochSummary {
        epochs_run: history.len(),
        best_epoch,
        best_val_loss,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub fold: usize,
    pub variant: Variant,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochLoss>,
    /// Not serialized, so saved records depend only on inputs and seeds.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainRecord {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(path, text + "\n").map_err(|e| checkpoint_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| checkpoint_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| checkpoint_err(path, e))
    }
}

/// Trained weights plus the metadata needed to rebuild the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub variant: Variant,
    pub fold: usize,
    /// Zero-based epoch the weights come from.
    pub epoch: usize,
    pub val_loss: f64,
    pub params: ParamStore<f32>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SALSEGCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    variant: Variant,
    fold: usize,
    epoch: usize,
    val_loss: f64,
    dtype: String,
    params: Vec<(String, Vec<usize>)>,
}

fn checkpoint_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network<f32>, TrainError> {
        Ok(Network::from_params(self.spec.clone(), self.params.clone())?)
    }

    /// Layout: magic, u32 version, u64 header length, JSON header, then all
    /// parameters as little-endian f32 in registration order.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let err = |e: std::io::Error| checkpoint_err(path, e);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(err)?;
        }
        let header = CheckpointHeader {
            spec: self.spec.clone(),
            variant: self.variant,
            fold: self.fold,
            epoch: self.epoch,
            val_loss: self.val_loss,
            dtype: f32::NAME.to_string(),
            params: self.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut w = BufWriter::new(File::create(path).map_err(err)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(err)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(err)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(err)?;
        w.write_all(&json).map_err(err)?;
        for p in self.params.iter() {
            w.write_all(&f32::to_le_bytes_vec(&p.value)).map_err(err)?;
        }
        w.flush().map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let err = |e: std::io::Error| checkpoint_err(path, e);
        let mut r = BufReader::new(File::open(path).map_err(err)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(err)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(checkpoint_err(path, "not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(err)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(checkpoint_err(path, format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(err)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(err)?;
        let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| checkpoint_err(path, e))?;
        if header.dtype != f32::NAME {
            return Err(checkpoint_err(path, format!("unsupported dtype {}", header.dtype)));
        }
        let mut params = ParamStore::new();
        for (name, shape) in header.params {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(err)?;
            let values = f32::from_le_bytes_slice(&bytes).expect("length is a multiple of 4");
            params.add(name, shape, values);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(err)?;
        if !rest.is_empty() {
            return Err(checkpoint_err(path, "trailing bytes after parameters"));
        }
        Ok(Checkpoint {
            spec: header.spec,
            variant: header.variant,
            fold: header.fold,
            epoch: header.epoch,
            val_loss: header.val_loss,
            params,
        })
    }
}

/// Network input tensors for a set of samples.
pub struct Batch {
    pub image: Tensor<f32>,
    pub saliency: Option<Tensor<f32>>,
    pub mask: Tensor<f32>,
}

fn plane<A: Copy>(a: &ndarray::Array2<A>, f: impl Fn(A) -> f32) -> Vec<f32> {
    a.iter().map(|&v| f(v)).collect()
}

pub fn make_batch(samples: &[&Sample], with_saliency: bool) -> Batch {
    let (h, w) = samples[0].side();
    let images: Vec<Vec<f32>> = samples.iter().map(|s| plane(&s.image, |v| v)).collect();
    let masks: Vec<Vec<f32>> = samples.iter().map(|s| plane(&s.mask, f32::from)).collect();
    let saliency = with_saliency.then(|| {
        let maps: Vec<Vec<f32>> = samples.iter().map(|s| plane(&s.saliency, |v| v)).collect();
        Tensor::stack_planes(&maps, h, w)
    });
    Batch {
        image: Tensor::stack_planes(&images, h, w),
        saliency,
        mask: Tensor::stack_planes(&masks, h, w),
    }
}

/// Probability maps for `samples`, evaluated in chunks of `batch_size`.
pub fn predict(net: &Network<f32>, samples: &[&Sample], batch_size: usize) -> Result<Vec<ndarray::Array2<f32>>, TrainError> {
    let with_sal = net.spec().variant == crate::model::Architecture::UnetSa;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let b = make_batch(chunk, with_sal);
        let probs = net.forward(&b.image, b.saliency.as_ref())?;
        let (h, w) = (probs.height(), probs.width());
        for i in 0..chunk.len() {
            out.push(ndarray::Array2::from_shape_vec((h, w), probs.item(i).to_vec()).expect("plane shape"));
        }
    }
    Ok(out)
}

fn mean_val_loss(net: &Network<f32>, val: &[&Sample], cfg: &TrainConfig) -> Result<f64, TrainError> {
    let with_sal = net.spec().variant == crate::model::Architecture::UnetSa;
    let mut total = 0.0;
    for chunk in val.chunks(cfg.batch_size) {
        let b = make_batch(chunk, with_sal);
        let probs = net.forward(&b.image, b.saliency.as_ref())?;
        if !probs.all_finite() {
            return Ok(f64::NAN);
        }
        total += dice_loss(&probs, &b.mask, cfg.loss_smoothing)? * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

/// Trains one network on `train`, early-stopping on `val`, and returns the
/// checkpoint of the epoch with the lowest validation loss.
///
/// Samples must already carry the saliency the variant expects (top-contour
/// maps for `UnetSaC`).
pub fn train_one_fold(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    variant: Variant,
    fold: usize,
    train: &[&Sample],
    val: &[&Sample],
) -> Result<(Checkpoint, TrainRecord), TrainError> {
    cfg.validate()?;
    if spec.variant != variant.architecture() {
        return Err(TrainError::Model(ModelError::InvalidSpec(format!(
            "variant {variant} needs architecture {:?}, spec has {:?}",
            variant.architecture(),
            spec.variant
        ))));
    }
    if train.is_empty() {
        return Err(TrainError::EmptySplit { fold, what: "training" });
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit { fold, what: "validation" });
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(TrainError::OverlappingSplit { fold, id: s.id.clone() });
    }
    for s in train.iter().chain(val) {
        let (h, w) = s.side();
        if (h, w) != (spec.input_side, spec.input_side) {
            return Err(TrainError::SampleSize {
                id: s.id.clone(),
                got: h,
                got2: w,
                expected: spec.input_side,
            });
        }
    }

    let started = Instant::now();
    let net = RefCell::new(Network::<f32>::new(spec.clone())?);
    let mut adam = Adam::new(AdamConfig::with_learning_rate(cfg.learning_rate), net.borrow().params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(fold as u64);
    let with_sal = variant.uses_saliency();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best_params = net.borrow().params().clone();

    let summary = drive_epochs(
        cfg.max_epochs,
        cfg.patience,
        |epoch| {
            let mut net = net.borrow_mut();
            order.shuffle(&mut rng);
            let mut train_total = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let chunk: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
                let b = make_batch(&chunk, with_sal);
                let trace = net.forward_traced(&b.image, b.saliency.as_ref())?;
                if !trace.probabilities().all_finite() {
                    return Err(TrainError::NonFinite { fold, epoch, what: "network output" });
                }
                let (loss, d_probs) = dice_loss_grad(trace.probabilities(), &b.mask, cfg.loss_smoothing)?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite { fold, epoch, what: "training loss" });
                }
                let grads = net.backward(trace, &d_probs);
                if !grads.all_finite() {
                    return Err(TrainError::NonFinite { fold, epoch, what: "gradient" });
                }
                adam.step(net.params_mut(), &grads);
                train_total += loss * chunk.len() as f64;
            }
            let val_loss = mean_val_loss(&net, val, cfg)?;
            if !val_loss.is_finite() {
                return Err(TrainError::NonFinite { fold, epoch, what: "validation loss" });
            }
            let train_loss = train_total / train.len() as f64;
            debug!("fold {fold} {variant} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
            Ok(EpochLoss { train_loss, val_loss })
        },
        |_| best_params = net.borrow().params().clone(),
    )?;
    let wall_time_s = started.elapsed().as_secs_f64();
    info!(
        "fold {fold} {variant}: {} epochs, best val loss {:.5} at epoch {} ({wall_time_s:.1}s)",
        summary.epochs_run, summary.best_val_loss, summary.best_epoch
    );
    let checkpoint = Checkpoint {
        spec: spec.clone(),
        variant,
        fold,
        epoch: summary.best_epoch,
        val_loss: summary.best_val_loss,
        params: best_params,
    };
    let record = TrainRecord {
        fold,
        variant,
        epochs_run: summary.epochs_run,
        best_epoch: summary.best_epoch,
        best_val_loss: summary.best_val_loss,
        history: summary.history,
        wall_time_s,
    };
    Ok((checkpoint, record))
}

/// Model spec for one fold: the initialization seed is derived from the
/// training seed and fold so folds and seeds get independent weights.
pub fn fold_spec(spec: &ModelSpec, cfg: &TrainConfig, fold: usize) -> ModelSpec {
    let mut s = spec.clone();
    s.init_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64);
    s
}

/// Checks that the plan covers exactly the given sample ids.
pub fn check_plan(plan: &FoldPlan, samples: &[Sample]) -> Result<(), TrainError> {
    let planned = plan.all_ids();
    let present: BTreeSet<String> = samples.iter().map(|s| s.id.clone()).collect();
    if planned == present {
        return Ok(());
    }
    let list = |v: Vec<&String>| {
        let shown: Vec<&str> = v.iter().take(10).map(|s| s.as_str()).collect();
        let more = if v.len() > 10 { format!(" (+{} more)", v.len() - 10) } else { String::new() };
        format!("{}{more}", shown.join(", "))
    };
    let missing: Vec<&String> = planned.difference(&present).collect();
    let extra: Vec<&String> = present.difference(&planned).collect();
    let mut parts = Vec::new();
    if !missing.is_empty() {
        parts.push(format!("planned but absent: {}", list(missing)));
    }
    if !extra.is_empty() {
        parts.push(format!("present but unplanned: {}", list(extra)));
    }
    Err(TrainError::PlanMismatch(parts.join("; ")))
}

/// Trains fold `fold` (1-based) of `plan`.
pub fn train_plan_fold(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    variant: Variant,
    plan: &FoldPlan,
    samples: &[Sample],
    fold: usize,
) -> Result<(Checkpoint, TrainRecord), TrainError> {
    let split = plan.split(fold);
    let by_id: std::collections::BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let pick = |ids: &[String]| -> Vec<&Sample> { ids.iter().map(|id| by_id[id.as_str()]).collect() };
    train_one_fold(&fold_spec(spec, cfg, fold), cfg, variant, fold, &pick(&split.train), &pick(&split.val))
}

/// One checkpoint and record per fold of `plan`.
pub fn run_cross_validation(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    variant: Variant,
    plan: &FoldPlan,
    samples: &[Sample],
) -> Result<Vec<(Checkpoint, TrainRecord)>, TrainError> {
    cfg.validate()?;
    check_plan(plan, samples)?;
    (1..=plan.num_folds())
        .map(|fold| train_plan_fold(spec, cfg, variant, plan, samples, fold))
        .collect()
}
