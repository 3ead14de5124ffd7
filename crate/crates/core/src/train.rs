//! Training and evaluation: Dice loss, overlap metrics, decoupled-decay
//! Adam, synthetic vessel data, and the deterministic toy training loop
//! with early stopping on validation Dice.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::net::{
    self, init_params, network_forward, Forward, Mode, ModelConfig, ParamStore,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer and loop hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub dice_eps: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            batch: 2,
            epochs: 30,
            patience: 20,
            betas: (0.9, 0.999),
            eps: 1e-8,
            dice_eps: 1e-5,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0
            || self.weight_decay < 0.0
            || self.batch == 0
            || self.epochs == 0
            || self.eps <= 0.0
            || self.dice_eps <= 0.0
        {
            return Err(Error::InvalidArgument("train config values must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument("threshold must lie in (0,1)".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss and metrics
// ---------------------------------------------------------------------------

/// Soft Dice loss over the whole batch jointly:
/// `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Value,
    target: &Tensor<T>,
    eps: T,
) -> Result<Value> {
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice loss shapes {:?} vs {:?}",
            tape.value(pred).shape(),
            target.shape()
        )));
    }
    let target_sum = target.sum();
    let tv = tape.constant(target.clone());
    let inter = tape.mul(pred, tv)?;
    let inter_sum = tape.sum_all(inter)?;
    let two = T::from_f64(2.0);
    let num = tape.affine(inter_sum, two, eps);
    let pred_sum = tape.sum_all(pred)?;
    let den = tape.affine(pred_sum, T::one(), target_sum + eps);
    let ratio = tape.div(num, den)?;
    Ok(tape.affine(ratio, -T::one(), T::one()))
}

/// Per-sample overlap scores.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub dice: f64,
    pub iou: f64,
    pub sen: f64,
}

/// Micro-averaged (pixel-pooled) scores plus the per-sample breakdown.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub iou: f64,
    pub sen: f64,
    pub n_samples: usize,
    pub params: usize,
    pub per_sample: Vec<SampleMetrics>,
}

fn scores(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    if tp + fp + fn_ == 0 {
        return (1.0, 1.0, 1.0);
    }
    let dice = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
    let iou = tp as f64 / (tp + fp + fn_) as f64;
    let sen = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    (dice, iou, sen)
}

/// Binarize predictions at `threshold` and score against binary targets.
/// Aggregation is micro (pixel counts pooled over all samples).
pub fn metrics<T: Scalar>(
    pred_prob: &Tensor<T>,
    target: &Tensor<T>,
    threshold: T,
) -> Result<MetricsReport> {
    if pred_prob.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "metrics shapes {:?} vs {:?}",
            pred_prob.shape(),
            target.shape()
        )));
    }
    for &t in target.data() {
        if t != T::zero() && t != T::one() {
            return Err(Error::InvalidArgument(
                "metrics target must be strictly binary".into(),
            ));
        }
    }
    let n = pred_prob.shape()[0];
    let per = pred_prob.numel() / n;
    let mut per_sample = Vec::with_capacity(n);
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for s in 0..n {
        let (mut stp, mut sfp, mut sfn) = (0u64, 0u64, 0u64);
        for o in 0..per {
            let p = pred_prob.data()[s * per + o] >= threshold;
            let g = target.data()[s * per + o] == T::one();
            match (p, g) {
                (true, true) => stp += 1,
                (true, false) => sfp += 1,
                (false, true) => sfn += 1,
                (false, false) => {}
            }
        }
        let (dice, iou, sen) = scores(stp, sfp, sfn);
        per_sample.push(SampleMetrics { dice, iou, sen });
        tp += stp;
        fp += sfp;
        fn_ += sfn;
    }
    let (dice, iou, sen) = scores(tp, fp, fn_);
    Ok(MetricsReport {
        dice,
        iou,
        sen,
        n_samples: n,
        params: 0,
        per_sample,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// First/second moment buffers aligned with the store's entries.
pub struct AdamState<T> {
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    pub t: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            m: (0..store.len()).map(|_| None).collect(),
            v: (0..store.len()).map(|_| None).collect(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step over every trainable entry with a
/// gradient: `theta -= lr * mhat/(sqrt(vhat)+eps) + lr * wd * theta`.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let lr = T::from_f64(cfg.lr);
    let wd = T::from_f64(cfg.weight_decay);
    let b1 = T::from_f64(cfg.betas.0);
    let b2 = T::from_f64(cfg.betas.1);
    let eps = T::from_f64(cfg.eps);
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    for idx in 0..store.len() {
        let entry = store.entry(idx);
        if !entry.trainable {
            continue;
        }
        let Some(grad) = entry.grad.clone() else { continue };
        let m = state.m[idx].get_or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        let v = state.v[idx].get_or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        let mut theta = entry.value.clone();
        for i in 0..grad.numel() {
            let g = grad.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * g;
            let vi = b2 * v.data()[i] + (one - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let th = theta.data()[i];
            theta.data_mut()[i] = th - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * th;
        }
        let name = entry.name.clone();
        store.set_value(&name, theta)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// One grayscale image / binary mask pair, image in [0,1].
#[derive(Clone, Debug)]
pub struct SegmentationSample<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

fn stamp_disk<T: Scalar>(mask: &mut Tensor<T>, size: usize, cy: f64, cx: f64, radius: f64) {
    let r = radius.max(0.5);
    let lo_y = ((cy - r).floor().max(0.0)) as usize;
    let hi_y = ((cy + r).ceil().min(size as f64 - 1.0)) as usize;
    let lo_x = ((cx - r).floor().max(0.0)) as usize;
    let hi_x = ((cx + r).ceil().min(size as f64 - 1.0)) as usize;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                mask.data_mut()[y * size + x] = T::one();
            }
        }
    }
}

/// Deterministic synthetic vasculature: 2-5 branching random-walk vessels of
/// width 1-3 px per sample; image = background 0.2 / foreground 0.7 plus
/// Gaussian noise (sigma 0.1), clamped to [0,1].
pub fn synth_dataset<T: Scalar>(n: usize, size: usize, seed: u64) -> Vec<SegmentationSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut mask = Tensor::<T>::zeros(vec![1, size, size]);
            let n_vessels = rng.gen_range(2..=5usize);
            for _ in 0..n_vessels {
                let width = rng.gen_range(1..=3usize) as f64;
                // Start on a random border pixel, heading inward.
                let side = rng.gen_range(0..4usize);
                let along = rng.gen_range(0.0..size as f64);
                let (mut y, mut x, mut angle) = match side {
                    0 => (0.0, along, std::f64::consts::FRAC_PI_2),
                    1 => (size as f64 - 1.0, along, -std::f64::consts::FRAC_PI_2),
                    2 => (along, 0.0, 0.0),
                    _ => (along, size as f64 - 1.0, std::f64::consts::PI),
                };
                angle += rng.gen_range(-0.5..0.5);
                let mut stack: Vec<(f64, f64, f64, f64)> = Vec::new();
                let mut budget = (size as f64 * rng.gen_range(1.0..2.0)) as usize;
                let mut w = width;
                loop {
                    if budget == 0 {
                        match stack.pop() {
                            Some((sy, sx, sa, sw)) => {
                                y = sy;
                                x = sx;
                                angle = sa;
                                w = sw;
                                budget = (size / 2).max(4);
                                continue;
                            }
                            None => break,
                        }
                    }
                    stamp_disk(&mut mask, size, y, x, w / 2.0);
                    angle += rng.gen_range(-0.3..0.3);
                    y += angle.sin();
                    x += angle.cos();
                    budget -= 1;
                    if y < 0.0 || x < 0.0 || y >= size as f64 || x >= size as f64 {
                        budget = 0;
                        continue;
                    }
                    if stack.len() < 3 && rng.gen_bool(0.04) {
                        let split = angle + rng.gen_range(0.5..1.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        stack.push((y, x, split, (w - 1.0).max(1.0)));
                    }
                }
            }
            // Guarantee a non-empty mask.
            if mask.data().iter().all(|&v| v == T::zero()) {
                stamp_disk(&mut mask, size, size as f64 / 2.0, size as f64 / 2.0, 1.0);
            }
            let image = Tensor::from_fn(vec![1, size, size], |i| {
                let fg = mask.data()[i] == T::one();
                let base = if fg { 0.7 } else { 0.2 };
                let noise = net::sample_normal(&mut rng) * 0.1;
                T::from_f64((base + noise).clamp(0.0, 1.0))
            });
            SegmentationSample { image, mask }
        })
        .collect()
}

/// Seeded shuffle, then split off the first `val_count` samples as the
/// validation set.
pub fn split_dataset<T: Scalar>(
    mut samples: Vec<SegmentationSample<T>>,
    val_count: usize,
    seed: u64,
) -> Result<(Vec<SegmentationSample<T>>, Vec<SegmentationSample<T>>)> {
    if val_count >= samples.len() {
        return Err(Error::InvalidArgument(format!(
            "validation count {val_count} must be below dataset size {}",
            samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    samples.shuffle(&mut rng);
    let train = samples.split_off(val_count);
    Ok((train, samples))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Loss/metric trajectory of one run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct History {
    /// Loss of every optimization step, in order.
    pub step_loss: Vec<f64>,
    /// Mean train loss per epoch.
    pub train_loss: Vec<f64>,
    /// Micro-averaged validation Dice per epoch.
    pub val_dice: Vec<f64>,
}

pub struct TrainResult {
    pub store: ParamStore<f32>,
    pub history: History,
    pub best_val_dice: f64,
    pub best_epoch: usize,
}

/// Stack sample images into a standardized [B,1,S,S] batch using the
/// store's input-normalization constants.
fn assemble_batch(
    store: &ParamStore<f32>,
    samples: &[&SegmentationSample<f32>],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mean = store.get("input_norm.mean")?.data()[0];
    let std = store.get("input_norm.std")?.data()[0];
    let imgs: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| {
            let (c, h, w) = s.image.dims3()?;
            s.image
                .map(|v| (v - mean) / std)
                .reshape(vec![1, c, h, w])
        })
        .collect::<Result<_>>()?;
    let masks: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| {
            let (c, h, w) = s.mask.dims3()?;
            s.mask.reshape(vec![1, c, h, w])
        })
        .collect::<Result<_>>()?;
    let img_refs: Vec<&Tensor<f32>> = imgs.iter().collect();
    let mask_refs: Vec<&Tensor<f32>> = masks.iter().collect();
    Ok((
        Tensor::concat(&img_refs, 0)?,
        Tensor::concat(&mask_refs, 0)?,
    ))
}

/// Forward a set of samples in eval mode and report metrics.
pub fn evaluate(
    store: &ParamStore<f32>,
    samples: &[SegmentationSample<f32>],
    model: &ModelConfig,
    threshold: f32,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluate on empty dataset".into()));
    }
    let mut preds = Vec::new();
    let mut masks = Vec::new();
    for s in samples {
        let refs = [s];
        let (x, m) = assemble_batch(store, &refs)?;
        let mut fw = Forward::new(store, Mode::Eval);
        let xv = fw.tape.constant(x);
        let y = network_forward(&mut fw, xv, model)?;
        preds.push(fw.tape.value(y).clone());
        masks.push(m);
    }
    let pred_refs: Vec<&Tensor<f32>> = preds.iter().collect();
    let mask_refs: Vec<&Tensor<f32>> = masks.iter().collect();
    let pred = Tensor::concat(&pred_refs, 0)?;
    let mask = Tensor::concat(&mask_refs, 0)?;
    let mut report = metrics(&pred, &mask, threshold)?;
    report.params = store.param_count();
    Ok(report)
}

/// One optimization step on an assembled batch; returns the loss.
pub fn train_step(
    store: &mut ParamStore<f32>,
    state: &mut AdamState<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    batch_x: &Tensor<f32>,
    batch_y: &Tensor<f32>,
) -> Result<f64> {
    let mut fw = Forward::new(store, Mode::Train);
    let xv = fw.tape.constant(batch_x.clone());
    let pred = network_forward(&mut fw, xv, model)?;
    let loss = dice_loss(&mut fw.tape, pred, batch_y, cfg.dice_eps as f32)?;
    let loss_val = fw.tape.value(loss).item()?.to_f64();
    let (tape, bindings, bn_updates) = fw.finish();
    let mut grads = tape.backward(loss)?;
    store.zero_grad();
    for (idx, v) in bindings {
        if let Some(g) = grads.take(v) {
            store.accumulate_grad(idx, g)?;
        }
    }
    adamw_step(store, state, cfg)?;
    store.apply_bn_updates(&bn_updates, 0.1)?;
    Ok(loss_val)
}

/// Full toy training run: seeded shuffling, Dice loss, AdamW, per-epoch
/// validation Dice, early stopping, best-validation parameters retained.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[SegmentationSample<f32>],
    val_set: &[SegmentationSample<f32>],
) -> Result<TrainResult> {
    model.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training requires non-empty splits".into()));
    }
    let mut store = init_params::<f32>(model)?;

    // Fit input standardization on the training split.
    let count: usize = train_set.iter().map(|s| s.image.numel()).sum();
    let sum: f64 = train_set
        .iter()
        .map(|s| s.image.data().iter().map(|&v| v as f64).sum::<f64>())
        .sum();
    let mean = sum / count as f64;
    let var: f64 = train_set
        .iter()
        .map(|s| {
            s.image
                .data()
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / count as f64;
    let std = var.sqrt().max(1e-6);
    store.set_value("input_norm.mean", Tensor::scalar(mean as f32))?;
    store.set_value("input_norm.std", Tensor::scalar(std as f32))?;

    let mut state = AdamState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    let mut best_val_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_store = store.clone();
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let samples: Vec<&SegmentationSample<f32>> =
                chunk.iter().map(|&i| &train_set[i]).collect();
            let (bx, by) = assemble_batch(&store, &samples)?;
            let loss = train_step(&mut store, &mut state, model, cfg, &bx, &by)?;
            history.step_loss.push(loss);
            epoch_loss += loss;
            steps += 1;
        }
        history.train_loss.push(epoch_loss / steps as f64);
        let report = evaluate(&store, val_set, model, cfg.threshold as f32)?;
        history.val_dice.push(report.dice);
        if report.dice > best_val_dice {
            best_val_dice = report.dice;
            best_epoch = epoch;
            best_store = store.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    Ok(TrainResult {
        store: best_store,
        history,
        best_val_dice,
        best_epoch,
    })
}
