//! Training loop, RMSprop, global-norm clipping and evaluation metrics.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{apply_augment, stack_batch, AugmentDraw, Sample};
use crate::error::{Error, Result};
use crate::layers::{apply_norm_stats, Ctx, Mode, ParamStore};
use crate::masl::{clip_weights, masl_batch, LossConfig, MaslWeights, COMPONENTS, EPS};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

fn yes() -> bool {
    true
}

fn cpu() -> String {
    "cpu".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Squared-gradient smoothing of RMSprop.
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Augmented copies of every training sample per epoch.
    pub augment_multiplier: usize,
    pub early_stop_patience: usize,
    /// Decoupled decay applied to conv and spectral filter weights only.
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "yes")]
    pub augment: bool,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    #[serde(default = "cpu")]
    pub device: String,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            grad_clip_norm: 1.0,
            batch_size: 4,
            epochs: 45,
            augment_multiplier: 2,
            early_stop_patience: 15,
            weight_decay: 1e-4,
            seed: 0,
            augment: true,
            max_steps: None,
            device: cpu(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be >= 0", self.lr)));
        }
        let positive = [
            ("rms_eps", self.rms_eps),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::Config(format!("rms_decay = {} outside [0, 1)", self.rms_decay)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay = {} must be >= 0", self.weight_decay)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.augment_multiplier == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config(
                "batch_size, epochs, augment_multiplier and early_stop_patience must be positive".into(),
            ));
        }
        if self.early_stop_patience > self.epochs {
            return Err(Error::Config(format!(
                "early_stop_patience {} exceeds epochs {}",
                self.early_stop_patience, self.epochs
            )));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!("device `{}` unsupported, only cpu", self.device)));
        }
        self.loss.validate()
    }
}

/// Contents of a run's JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// RMSprop without momentum: `v = d v + (1 - d) g^2`,
/// `theta -= lr g / (sqrt(v) + eps)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    state: BTreeMap<String, Vec<f64>>,
}

impl RmsProp {
    pub fn new(decay: f64, eps: f64) -> Self {
        RmsProp {
            decay,
            eps,
            state: BTreeMap::new(),
        }
    }

    /// Updates `value` in place from `grad`; the value keeps its dtype.
    pub fn update(&mut self, name: &str, value: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if value.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "rmsprop",
                lhs: value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let v = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let dtype = value.dtype();
        for ((x, g), s) in value.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
            *s = self.decay * *s + (1.0 - self.decay) * g * g;
            *x = dtype.round(*x - lr * g / (s.sqrt() + self.eps));
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn grad_clip(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.iter() {
        if !g.all_finite() {
            return Err(Error::invalid("grad_clip", "non-finite gradient"));
        }
        sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

/// Hard Dice and IoU of one plane after thresholding `prob`, with the same
/// ε as the loss so two empty masks score 1.
pub fn hard_dice_iou(mask: &[f64], prob: &[f64], threshold: f64) -> (f64, f64) {
    let (mut inter, mut a, mut b) = (0.0, 0.0, 0.0);
    for (&y, &p) in mask.iter().zip(prob) {
        let q = if p >= threshold { 1.0 } else { 0.0 };
        inter += y * q;
        a += y;
        b += q;
    }
    let dice = (2.0 * inter + EPS) / (a + b + EPS);
    let iou = (inter + EPS) / (a + b - inter + EPS);
    (dice, iou)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub dice: f64,
    pub iou: f64,
    pub masl_total: f64,
    pub components: [f64; 5],
    pub weights: [f64; 5],
    pub wall_ms: u128,
}

impl MetricsRow {
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "split", "dice", "iou", "masl_total"].map(String::from).to_vec();
        h.extend(COMPONENTS.iter().map(|c| format!("loss_{c}")));
        h.extend(COMPONENTS.iter().map(|c| format!("w_{c}")));
        h.push("wall_ms".into());
        h
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.epoch.to_string(),
            self.split.clone(),
            format!("{:.6}", self.dice),
            format!("{:.6}", self.iou),
            format!("{:.6}", self.masl_total),
        ];
        r.extend(self.components.iter().map(|v| format!("{v:.6}")));
        r.extend(self.weights.iter().map(|v| format!("{v:.6}")));
        r.push(self.wall_ms.to_string());
        r
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MetricsRow::header())?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dice: f64,
    pub iou: f64,
    pub masl_total: f64,
    pub components: [f64; 5],
    /// `(id, dice, iou)` per sample.
    pub per_sample: Vec<(String, f64, f64)>,
}

/// Eval-mode metrics averaged over samples.
pub fn evaluate(
    model: &Model,
    data: &[Sample],
    weights: MaslWeights,
    loss: &LossConfig,
    threshold: f64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut per_sample = Vec::with_capacity(data.len());
    let mut total = 0.0;
    let mut comps = [0.0; 5];
    for chunk in data.chunks(4) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = stack_batch(&refs)?;
        let tape = Tape::new(model.dtype());
        let ctx = Ctx::new(&tape, &model.params, Mode::Eval, 0);
        let out = model.forward(&ctx, tape.constant(x))?;
        let (_, parts) = masl_batch(&y, out.p, tape.constant(weights.to_tensor()), loss)?;
        let p = out.p.value();
        let hw = y.len() / chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            let (d, u) = hard_dice_iou(&y.data()[i * hw..(i + 1) * hw], &p.data()[i * hw..(i + 1) * hw], threshold);
            per_sample.push((s.id.clone(), d, u));
            total += parts[i].total;
            for (c, v) in comps.iter_mut().zip(parts[i].components) {
                *c += v;
            }
        }
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        dice: per_sample.iter().map(|s| s.1).sum::<f64>() / n,
        iou: per_sample.iter().map(|s| s.2).sum::<f64>() / n,
        masl_total: total / n,
        components: comps.map(|c| c / n),
        per_sample,
    })
}

/// Early-stopping bookkeeping on a score where higher is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stale,
    Stop,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch's score. `Stop` is returned on the `patience`-th
    /// consecutive epoch without a strict improvement.
    pub fn observe(&mut self, score: f64) -> Verdict {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Stale
        }
    }
}

/// What the step hook sees after every optimizer update.
pub struct StepInfo<'a> {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Mean hard Dice of the batch predictions before the update.
    pub batch_dice: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub weights: MaslWeights,
    pub model: &'a Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Model and loss weights at the best validation Dice.
    pub best_model: Model,
    pub best_weights: MaslWeights,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub history: Vec<MetricsRow>,
    pub steps: usize,
    pub stopped_early: bool,
    /// Weights at the end of training (not necessarily the best epoch).
    pub final_weights: MaslWeights,
}

/// Gradient of every trainable parameter and of the loss weights for one
/// batch, plus what the step reports.
struct StepResult {
    grads: Vec<(String, Tensor)>,
    weight_grad: Option<Tensor>,
    stats: Vec<crate::layers::NormStats>,
    loss: f64,
    components: [f64; 5],
    dice: f64,
    iou: f64,
}

fn numeric(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numeric {
            step,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn forward_backward(
    model: &Model,
    batch: &[Sample],
    weights: MaslWeights,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepResult> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let (x, y) = stack_batch(&refs)?;
    let tape = Tape::new(model.dtype());
    let seed = cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let ctx = Ctx::new(&tape, &model.params, Mode::Train, seed).trainable();
    let out = model.forward(&ctx, tape.constant(x)).map_err(|e| numeric(step, e))?;
    let w = if cfg.loss.learn_weights {
        tape.leaf(weights.to_tensor())
    } else {
        tape.constant(weights.to_tensor())
    };
    let (loss, parts) = masl_batch(&y, out.p, w, &cfg.loss).map_err(|e| numeric(step, e))?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Numeric {
            step,
            msg: format!("loss is {value}"),
        });
    }
    loss.backward().map_err(|e| numeric(step, e))?;
    let grads = ctx
        .bound()
        .into_iter()
        .filter(|(_, v)| v.requires_grad())
        .map(|(name, v)| {
            let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
            (name, g)
        })
        .collect();
    let weight_grad = if cfg.loss.learn_weights {
        Some(w.grad().unwrap_or_else(|| Tensor::zeros([5])))
    } else {
        None
    };
    let p = out.p.value();
    let hw = y.len() / batch.len();
    let (mut dice, mut iou) = (0.0, 0.0);
    for i in 0..batch.len() {
        let (d, u) = hard_dice_iou(&y.data()[i * hw..(i + 1) * hw], &p.data()[i * hw..(i + 1) * hw], 0.5);
        dice += d / batch.len() as f64;
        iou += u / batch.len() as f64;
    }
    let n = parts.len() as f64;
    let mut components = [0.0; 5];
    for part in &parts {
        for (c, v) in components.iter_mut().zip(part.components) {
            *c += v / n;
        }
    }
    Ok(StepResult {
        grads,
        weight_grad,
        stats: ctx.take_stats(),
        loss: value,
        components,
        dice,
        iou,
    })
}

fn apply_update(
    params: &mut ParamStore,
    opt: &mut RmsProp,
    grads: &[(String, Tensor)],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let entry = params
            .entries_mut()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if entry.kind.decays() && weight_decay > 0.0 {
            let dtype = entry.value.dtype();
            let shrink = 1.0 - lr * weight_decay;
            for v in entry.value.data_mut() {
                *v = dtype.round(*v * shrink);
            }
        }
        opt.update(name, &mut entry.value, g, lr)?;
    }
    Ok(())
}

/// The epoch's sample order: `multiplier` copies of every index, each with
/// its own augmentation draw, shuffled.
fn epoch_plan(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<(usize, AugmentDraw)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1_000_003 * epoch as u64));
    let mut plan: Vec<(usize, AugmentDraw)> = (0..n)
        .flat_map(|i| std::iter::repeat_n(i, cfg.augment_multiplier))
        .map(|i| {
            let d = if cfg.augment {
                AugmentDraw::sample(&mut rng)
            } else {
                AugmentDraw::default()
            };
            (i, d)
        })
        .collect();
    plan.shuffle(&mut rng);
    plan
}

/// Trains `model` in place on `train_set`, selecting the state with the best
/// validation Dice. `on_step` may return false to stop early.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepInfo) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "empty split: {} training and {} validation samples",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut opt = RmsProp::new(cfg.rms_decay, cfg.rms_eps);
    let mut weights = MaslWeights::default();
    let mut history = Vec::new();
    let mut best: Option<(Model, MaslWeights, usize, f64)> = None;
    let mut stopper = EarlyStop::new(cfg.early_stop_patience);
    let mut step = 0;
    let mut stopped_early = false;
    let mut last_finite = String::from("none");
    'epochs: for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let plan = epoch_plan(train_set.len(), cfg, epoch);
        let (mut loss_sum, mut dice_sum, mut iou_sum, mut comp_sum, mut batches) = (0.0, 0.0, 0.0, [0.0; 5], 0usize);
        let mut halt = false;
        for chunk in plan.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&(i, d)| apply_augment(&train_set[i], d)).collect();
            let r = forward_backward(model, &batch, weights, cfg, step).map_err(|e| match e {
                Error::Numeric { step, msg } => Error::Numeric {
                    step,
                    msg: format!("{msg}; last finite metrics: {last_finite}"),
                },
                other => other,
            })?;
            let mut tensors: Vec<Tensor> = r.grads.iter().map(|(_, g)| g.clone()).collect();
            tensors.extend(r.weight_grad.clone());
            let norm = grad_clip(&mut tensors, cfg.grad_clip_norm).map_err(|_| Error::Numeric {
                step,
                msg: format!("non-finite gradient; last finite metrics: {last_finite}"),
            })?;
            let clipped_norm = tensors.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            let weight_grad = if r.weight_grad.is_some() { tensors.pop() } else { None };
            let grads: Vec<(String, Tensor)> = r.grads.iter().map(|(n, _)| n.clone()).zip(tensors).collect();
            apply_update(&mut model.params, &mut opt, &grads, cfg.lr, cfg.weight_decay)?;
            apply_norm_stats(&mut model.params, &r.stats)?;
            if let Some(g) = weight_grad {
                let mut w = weights.to_tensor();
                opt.update("masl.weights", &mut w, &g, cfg.lr)?;
                weights = clip_weights(MaslWeights::from_tensor(&w)?);
            }
            step += 1;
            loss_sum += r.loss;
            dice_sum += r.dice;
            iou_sum += r.iou;
            for (a, b) in comp_sum.iter_mut().zip(r.components) {
                *a += b;
            }
            batches += 1;
            last_finite = format!("step {step} loss {:.6} dice {:.4}", r.loss, r.dice);
            let info = StepInfo {
                step,
                epoch,
                loss: r.loss,
                batch_dice: r.dice,
                grad_norm: norm,
                clipped_norm,
                weights,
                model,
            };
            if !on_step(&info) || cfg.max_steps.is_some_and(|m| step >= m) {
                halt = true;
                break;
            }
        }
        let nb = batches.max(1) as f64;
        history.push(MetricsRow {
            epoch,
            split: "train".into(),
            dice: dice_sum / nb,
            iou: iou_sum / nb,
            masl_total: loss_sum / nb,
            components: comp_sum.map(|c| c / nb),
            weights: weights.to_array(),
            wall_ms: t0.elapsed().as_millis(),
        });
        let v = evaluate(model, val_set, weights, &cfg.loss, 0.5)?;
        history.push(MetricsRow {
            epoch,
            split: "val".into(),
            dice: v.dice,
            iou: v.iou,
            masl_total: v.masl_total,
            components: v.components,
            weights: weights.to_array(),
            wall_ms: t0.elapsed().as_millis(),
        });
        log::info!("epoch {epoch}: train loss {:.4}, val dice {:.4}", loss_sum / nb, v.dice);
        match stopper.observe(v.dice) {
            Verdict::Improved => best = Some((model.clone(), weights, epoch, v.dice)),
            Verdict::Stale => {}
            Verdict::Stop => {
                stopped_early = true;
                break 'epochs;
            }
        }
        if halt {
            break;
        }
    }
    let (best_model, best_weights, best_epoch, best_val_dice) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_model,
        best_weights,
        best_epoch,
        best_val_dice,
        history,
        steps: step,
        stopped_early,
        final_weights: weights,
    })
}
