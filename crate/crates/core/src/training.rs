//! Soft-Dice loss, ADAM, and the epoch loop.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::architectures::Network;
use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::metrics::{self, Mask};
use crate::nn::Mode;
use crate::ops::sigmoid_scalar;
use crate::rng;
use crate::tensor::{Element, Tensor};

pub const DICE_SMOOTHING: f64 = 1.0;

/// Batch-joint soft Dice loss on `(N, 2, H, W)` logits against a binary
/// `(N, H, W)` target: `p = softmax(logits)[1] = sigmoid(l1 - l0)`,
/// `1 - (2 Σ p g + s) / (Σ p + Σ g + s)`.
pub fn soft_dice_loss<T: Element>(tape: &Tape<T>, logits: &Var<T>, target: &Tensor<T>, smoothing: f64) -> Result<Var<T>> {
    let (n, c, h, w) = logits.value().dims4()?;
    if c != 2 || target.shape() != [n, h, w] {
        return shape_err(format!("soft dice: logits {:?} against target {:?}", logits.shape(), target.shape()));
    }
    let g = target.data();
    if let Some(v) = g.iter().find(|v| **v != T::zero() && **v != T::one()) {
        return contract_err(format!("soft dice target must be binary, found {v}"));
    }
    let plane = h * w;
    let ld = logits.value().data();
    let mut p = Vec::with_capacity(n * plane);
    for i in 0..n {
        let (bg, fg) = (&ld[2 * i * plane..][..plane], &ld[(2 * i + 1) * plane..][..plane]);
        p.extend(bg.iter().zip(fg).map(|(&b, &f)| sigmoid_scalar(f - b).to_f64()));
    }
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (pk, gk) in p.iter().zip(g) {
        let gk = gk.to_f64();
        inter += pk * gk;
        sp += pk;
        sg += gk;
    }
    let num = 2.0 * inter + smoothing;
    let den = sp + sg + smoothing;
    let loss = Tensor::scalar(T::from_f64(1.0 - num / den));
    let target = target.clone();
    Ok(tape.record(loss, &[logits], move |gout, _| {
        let scale = gout.item().to_f64() / (den * den);
        let mut gl = vec![T::zero(); 2 * n * plane];
        for i in 0..n {
            for k in 0..plane {
                let idx = i * plane + k;
                let pk = p[idx];
                let dl_dp = -(2.0 * target.data()[idx].to_f64() * den - num) * scale;
                let d = T::from_f64(dl_dp * pk * (1.0 - pk));
                gl[(2 * i + 1) * plane + k] = d;
                gl[2 * i * plane + k] = -d;
            }
        }
        vec![Some(Tensor::new(&[n, 2, h, w], gl).expect("shape"))]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moments shaped like the network's parameters, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(net: &Network<T>, config: AdamConfig) -> Self {
        let zeros = || net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { config, t: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected ADAM update, followed by box clamping. A non-finite
/// gradient aborts before anything is modified.
pub fn adam_step<T: Element>(net: &mut Network<T>, grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    let params = net.params();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return contract_err(format!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return shape_err(format!("gradient for {} has shape {:?}, expected {:?}", p.name, g.shape(), p.value.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {} at step {}", p.name, state.t + 1)));
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - beta2.powi(state.t.min(i32::MAX as u64) as i32);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let value = net.params_mut().value_mut(i);
        for (((x, gk), mk), vk) in value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gk = gk.to_f64();
            let m1 = beta1 * mk.to_f64() + (1.0 - beta1) * gk;
            let v1 = beta2 * vk.to_f64() + (1.0 - beta2) * gk * gk;
            *mk = T::from_f64(m1);
            *vk = T::from_f64(v1);
            let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + eps);
            *x = T::from_f64(x.to_f64() - update);
        }
    }
    net.clamp_boxes();
    Ok(())
}

/// Images `(3, H, W)` with their binary masks.
#[derive(Debug, Clone, Default)]
pub struct TileSet<T> {
    pub images: Vec<Tensor<T>>,
    pub masks: Vec<Mask>,
}

impl<T: Element> TileSet<T> {
    pub fn new(images: Vec<Tensor<T>>, masks: Vec<Mask>) -> Result<Self> {
        if images.len() != masks.len() {
            return contract_err(format!("{} images but {} masks", images.len(), masks.len()));
        }
        for (img, m) in images.iter().zip(&masks) {
            match img.shape() {
                [3, h, w] if (*h, *w) == (m.h, m.w) => {}
                s => return shape_err(format!("image {s:?} does not match mask {}x{}", m.h, m.w)),
            }
        }
        Ok(Self { images, masks })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { images: idx.iter().map(|&i| self.images[i].clone()).collect(), masks: idx.iter().map(|&i| self.masks[i].clone()).collect() }
    }

    /// Stacks the selected samples into `(B, 3, H, W)` and `(B, H, W)`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let first = self.images.get(idx[0]).ok_or_else(|| Error::Contract("batch index out of range".into()))?;
        let shape = first.shape().to_vec();
        let mut x = Vec::with_capacity(idx.len() * first.numel());
        let mut y = Vec::with_capacity(idx.len() * shape[1] * shape[2]);
        for &i in idx {
            if self.images[i].shape() != shape {
                return shape_err("tiles in a batch must share one shape");
            }
            x.extend_from_slice(self.images[i].data());
            y.extend(self.masks[i].data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }));
        }
        Ok((Tensor::new(&[idx.len(), 3, shape[1], shape[2]], x)?, Tensor::new(&[idx.len(), shape[1], shape[2]], y)?))
    }
}

/// Eval-mode masks for every tile, in order.
pub fn predict_masks<T: Element>(net: &Network<T>, set: &TileSet<T>, batch_size: usize) -> Result<Vec<Mask>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = set.batch(chunk)?;
        out.extend(metrics::binarize(&net.predict(&x)?)?);
    }
    Ok(out)
}

/// Per-tile DSC in eval mode.
pub fn dsc_scores<T: Element>(net: &Network<T>, set: &TileSet<T>, batch_size: usize) -> Result<Vec<f64>> {
    let preds = predict_masks(net, set, batch_size)?;
    Ok(preds.iter().zip(&set.masks).map(|(p, g)| metrics::dsc(p, g)).collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_dsc: f64,
    pub val_dsc: f64,
    pub loss: f64,
    pub seconds: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_dsc,val_dsc,loss,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            s.push_str(&format!("{},{},{},{},{:.3}\n", r.epoch, r.train_dsc, r.val_dsc, r.loss, r.seconds));
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.val_dsc >= r.val_dsc => Some(b),
            _ => Some(r),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop at this many optimizer steps even mid-epoch (the epoch is still
    /// evaluated and recorded).
    pub max_steps: Option<u64>,
    /// Directory for `best.bin` (rewritten on every validation improvement)
    /// and `last_good.bin` (written if training diverges).
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after the first epoch whose validation DSC reaches this value.
    pub target_val_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 16, seed: 0, adam: AdamConfig::default(), max_steps: None, checkpoint_dir: None, target_val_dsc: None }
    }
}

pub struct TrainOutcome<T> {
    pub history: TrainHistory,
    /// Network at the best validation epoch (the initial network when no
    /// epoch ran).
    pub best: Network<T>,
    pub best_state: AdamState<T>,
    pub state: AdamState<T>,
}

/// One optimizer step on a batch; returns the loss.
pub fn train_step<T: Element>(net: &mut Network<T>, state: &mut AdamState<T>, x: Tensor<T>, y: &Tensor<T>, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let params = net.params().bind(&tape);
    let logits = net.forward(&tape, &params, &Var::constant(x), Mode::Train, seed)?;
    let loss = soft_dice_loss(&tape, &logits, y, DICE_SMOOTHING)?;
    let value = loss.value().item().to_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value} at step {}", state.t + 1)));
    }
    let grads = tape.backward(&loss)?;
    let g: Vec<Tensor<T>> = params.iter().map(|p| grads.get_or_zeros(p)).collect();
    adam_step(net, &g, state)?;
    Ok(value)
}

/// Trains `net` in place. Per epoch: shuffle with `(seed, epoch)`, run
/// minibatch steps, then record eval-mode mean DSC on both sets.
pub fn train<T: Element>(
    net: &mut Network<T>,
    train_set: &TileSet<T>,
    val_set: &TileSet<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() || val_set.is_empty() {
        return contract_err("training and validation sets must be nonempty");
    }
    if cfg.batch_size == 0 {
        return contract_err("batch size must be positive");
    }
    let mut state = AdamState::new(net, cfg.adam);
    let mut best = net.clone();
    let mut best_state = state.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng::rng(rng::derive_seed_indexed(cfg.seed, "shuffle", epoch as u64)));
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| state.t >= m) {
                break;
            }
            let (x, y) = train_set.batch(chunk)?;
            let step_seed = rng::derive_seed_indexed(cfg.seed, "dropout", state.t);
            // a numeric failure aborts before parameters change; only the
            // running statistics may already hold NaNs
            let stats = net.bn_states().to_vec();
            match train_step(net, &mut state, x, &y, step_seed) {
                Ok(l) => losses.push(l),
                Err(e @ Error::Numeric(_)) => {
                    net.bn_states_mut().clone_from_slice(&stats);
                    if let Some(dir) = &cfg.checkpoint_dir {
                        checkpoint::save(&dir.join("last_good.bin"), net, Some(&state))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let train_dsc = mean(&dsc_scores(net, train_set, cfg.batch_size)?);
        let val_dsc = mean(&dsc_scores(net, val_set, cfg.batch_size)?);
        let record = EpochRecord { epoch, train_dsc, val_dsc, loss: mean(&losses), seconds: started.elapsed().as_secs_f64(), seed: cfg.seed };
        if val_dsc > best_val {
            best_val = val_dsc;
            best = net.clone();
            best_state = state.clone();
            if let Some(dir) = &cfg.checkpoint_dir {
                checkpoint::save(&dir.join("best.bin"), &best, Some(&best_state))?;
            }
        }
        on_epoch(&record);
        history.records.push(record);
        if cfg.max_steps.is_some_and(|m| state.t >= m) || cfg.target_val_dsc.is_some_and(|t| val_dsc >= t) {
            break;
        }
    }
    Ok(TrainOutcome { history, best, best_state, state })
}

pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(history.to_csv().as_bytes())?;
    Ok(())
}
