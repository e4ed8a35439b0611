//! Training: batched backward over per-sequence tapes, Adam with bias
//! correction, the warmup+cosine learning-rate schedule, and the loop used
//! for pretraining, downstream derivation, fingerprint injection, and
//! fine-tuning attacks.
//!
//! Sequences inside a batch differentiate in parallel; gradient reduction
//! runs serially in batch order, so results are bitwise reproducible given
//! (seed, dataset order).

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lora::{bind_adapter, lora_a_key, lora_b_key, LoraAdapter};
use crate::model::{
    bind_params, check_arch, forward_tokens, params_from_checkpoint, ModelConfig, TokenSeq,
};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which parameters the optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Selector {
    #[default]
    #[serde(rename = "all")]
    All,
    #[serde(rename = "adapter-only")]
    AdapterOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Toy-scale default; full-scale runs in the source experiments used
    /// 5e-5, which stays the documented large-model value.
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub selector: Selector,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_loss_target")]
    pub loss_target: f64,
}

fn default_base_lr() -> f64 {
    1e-2
}
fn default_warmup_ratio() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    16
}
fn default_loss_target() -> f64 {
    0.05
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-2,
            warmup_ratio: 0.1,
            epochs: 30,
            batch_size: 16,
            selector: Selector::All,
            seed: 0,
            loss_target: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::argument("base_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::argument("warmup_ratio must satisfy 0 ≤ r < 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("batch_size must be at least 1"));
        }
        if !(self.loss_target > 0.0) {
            return Err(Error::argument("loss_target must be positive"));
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name, restricted to trainable parameters.
pub type GradientSet = BTreeMap<String, Tensor<f32>>;

/// One training step's bookkeeping; serialized as a CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Learning rate at a (1-based) step: linear ramp 0→base over the first
/// ⌈warmup_ratio·total⌉ steps, then cosine decay base→0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, tcfg: &TrainConfig) -> Result<f64> {
    if total_steps < 1 {
        return Err(Error::argument("total_steps must be at least 1"));
    }
    if step > total_steps {
        return Err(Error::argument(format!(
            "step {step} out of range 0..={total_steps}"
        )));
    }
    let warmup = (tcfg.warmup_ratio * total_steps as f64).ceil() as usize;
    if step <= warmup {
        if warmup == 0 {
            return Ok(0.0);
        }
        return Ok(tcfg.base_lr * step as f64 / warmup as f64);
    }
    let span = (total_steps - warmup) as f64;
    let phase = (step - warmup) as f64 / span;
    Ok(tcfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos()))
}

/// First and second moment estimates plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S: Scalar> {
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
    t: usize,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

/// Standard Adam update with bias correction over every key in `grads`.
pub fn adam_step<S: Scalar>(
    params: &mut BTreeMap<String, Tensor<S>>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let b1 = S::from_f64(ADAM_BETA1);
    let b2 = S::from_f64(ADAM_BETA2);
    let eps = S::from_f64(ADAM_EPS);
    let lr = S::from_f64(lr);
    let bc1 = S::from_f64(1.0 - ADAM_BETA1.powi(state.t as i32));
    let bc2 = S::from_f64(1.0 - ADAM_BETA2.powi(state.t as i32));
    let one = S::one();
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("adam_step: unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "adam_step `{name}`: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::from_raw(p.shape().to_vec(), vec![S::zero(); p.numel()]));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::from_raw(p.shape().to_vec(), vec![S::zero(); p.numel()]));
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-sequence loss sum, span count, and gradients of the sum.
fn seq_grads<S: Scalar>(
    params: &BTreeMap<String, Tensor<S>>,
    cfg: &ModelConfig,
    seq: &TokenSeq,
    adapter: Option<(&BTreeMap<String, Tensor<S>>, &[String], S)>,
) -> Result<(f64, usize, BTreeMap<String, Tensor<S>>)> {
    let mut tape = Tape::new();
    let (bound, binding) = match adapter {
        None => (bind_params(&mut tape, params, |_| true), None),
        Some((flat, targets, scale)) => {
            let bound = bind_params(&mut tape, params, |_| false);
            let binding = bind_adapter(&mut tape, flat, targets, scale, true)?;
            (bound, Some(binding))
        }
    };
    let (inputs, targets_shifted, mask) = seq.shifted()?;
    let logits = forward_tokens(&mut tape, &bound, cfg, &inputs, binding.as_ref())?;
    let (loss, count) = tape.cross_entropy_sum(logits, &targets_shifted, &mask)?;
    let loss_value = tape.value(loss).data()[0].to_f64_lossy();
    let mut raw = tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    match &binding {
        None => {
            for (name, var) in bound.vars() {
                if let Some(g) = raw.take(var) {
                    grads.insert(name.clone(), g);
                }
            }
        }
        Some(b) => {
            for (target, &(av, bv)) in &b.pairs {
                if let Some(g) = raw.take(av) {
                    grads.insert(lora_a_key(target), g);
                }
                if let Some(g) = raw.take(bv) {
                    grads.insert(lora_b_key(target), g);
                }
            }
        }
    }
    Ok((loss_value, count, grads))
}

/// Mean response-span loss over the batch and the gradients of that mean
/// for the selected parameters (model weights, or adapter pairs when an
/// adapter view is supplied).
pub fn batch_backward<S: Scalar>(
    params: &BTreeMap<String, Tensor<S>>,
    cfg: &ModelConfig,
    batch: &[TokenSeq],
    adapter: Option<(&BTreeMap<String, Tensor<S>>, &[String], S)>,
) -> Result<(S, BTreeMap<String, Tensor<S>>)> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("backward over an empty batch".into()));
    }
    if params.is_empty() || matches!(adapter, Some((_, t, _)) if t.is_empty()) {
        return Err(Error::argument("backward with an empty parameter selection"));
    }
    let per_seq: Vec<Result<(f64, usize, BTreeMap<String, Tensor<S>>)>> = batch
        .par_iter()
        .map(|seq| seq_grads(params, cfg, seq, adapter))
        .collect();
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut sums: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for r in per_seq {
        let (s, c, grads) = r?;
        total += s;
        count += c;
        for (name, g) in grads {
            match sums.get_mut(&name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    sums.insert(name, g);
                }
            }
        }
    }
    let scale = S::from_f64(1.0 / count as f64);
    let grads = sums
        .into_iter()
        .map(|(name, g)| (name, g.scale(scale)))
        .collect();
    Ok((S::from_f64(total / count as f64), grads))
}

/// Full-parameter gradients for a checkpoint (selector = all).
pub fn backward_full(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    batch: &[TokenSeq],
) -> Result<(f64, GradientSet)> {
    check_arch(ckpt, cfg)?;
    let params = params_from_checkpoint::<f32>(ckpt);
    let (loss, grads) = batch_backward(&params, cfg, batch, None)?;
    Ok((loss.to_f64_lossy(), grads))
}

/// Adapter-only gradients; base weights stay frozen.
pub fn backward_adapter(
    ckpt: &Checkpoint,
    adapter: &LoraAdapter,
    cfg: &ModelConfig,
    batch: &[TokenSeq],
) -> Result<(f64, GradientSet)> {
    check_arch(ckpt, cfg)?;
    let params = params_from_checkpoint::<f32>(ckpt);
    let flat = adapter.to_param_map();
    let targets: Vec<String> = adapter.targets().cloned().collect();
    let (loss, grads) = batch_backward(
        &params,
        cfg,
        batch,
        Some((&flat, &targets, adapter.scale() as f32)),
    )?;
    Ok((loss.to_f64_lossy(), grads))
}

enum TrainState {
    Full {
        model: BTreeMap<String, Tensor<f32>>,
    },
    Adapter {
        model: BTreeMap<String, Tensor<f32>>,
        flat: BTreeMap<String, Tensor<f32>>,
        targets: Vec<String>,
        scale: f32,
    },
}

fn train_loop(
    state: &mut TrainState,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &[TokenSeq],
) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return Err(Error::DegenerateBatch("training dataset is empty".into()));
    }
    let n = data.len();
    let steps_per_epoch = n.div_ceil(tcfg.batch_size);
    let total_steps = tcfg.epochs * steps_per_epoch;
    let mut history = Vec::with_capacity(total_steps);
    let mut adam = AdamState::new();
    let root = SeededRng::new(tcfg.seed);
    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.derive(&format!("shuffle/epoch/{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(tcfg.batch_size) {
            step += 1;
            let batch: Vec<TokenSeq> = chunk.iter().map(|&i| data[i].clone()).collect();
            let lr = lr_at(step, total_steps, tcfg)?;
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Divergence { step },
                other => other,
            };
            let loss = match state {
                TrainState::Full { model } => {
                    let (loss, grads) =
                        batch_backward(&*model, cfg, &batch, None).map_err(diverged)?;
                    adam_step(model, &grads, &mut adam, lr)?;
                    loss
                }
                TrainState::Adapter {
                    model,
                    flat,
                    targets,
                    scale,
                } => {
                    let (loss, grads) =
                        batch_backward(model, cfg, &batch, Some((&*flat, targets, *scale)))
                            .map_err(diverged)?;
                    adam_step(flat, &grads, &mut adam, lr)?;
                    loss
                }
            };
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            history.push(LossRecord {
                step,
                epoch,
                lr,
                loss,
            });
        }
    }
    Ok(history)
}

/// Full-parameter training; returns the updated checkpoint and the per-step
/// loss history.
pub fn train_full(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &[TokenSeq],
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    tcfg.validate()?;
    if tcfg.selector != Selector::All {
        return Err(Error::argument(
            "train_full requires selector = all; use train_adapter for adapter-only",
        ));
    }
    check_arch(ckpt, cfg)?;
    let mut state = TrainState::Full {
        model: params_from_checkpoint::<f32>(ckpt),
    };
    let history = train_loop(&mut state, cfg, tcfg, data)?;
    let TrainState::Full { model } = state else {
        unreachable!()
    };
    let mut out = ckpt.clone();
    for (name, tensor) in model {
        out.insert(name, tensor);
    }
    out.push_lineage(&format!(
        "train_full(epochs={}, base_lr={}, batch={}, seed={})",
        tcfg.epochs, tcfg.base_lr, tcfg.batch_size, tcfg.seed
    ));
    Ok((out, history))
}

/// Adapter-only training; the base checkpoint is read, never written.
pub fn train_adapter(
    ckpt: &Checkpoint,
    adapter: &LoraAdapter,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &[TokenSeq],
) -> Result<(LoraAdapter, Vec<LossRecord>)> {
    tcfg.validate()?;
    if tcfg.selector != Selector::AdapterOnly {
        return Err(Error::argument(
            "train_adapter requires selector = adapter-only",
        ));
    }
    check_arch(ckpt, cfg)?;
    if adapter.arch_id() != ckpt.arch_id() {
        return Err(Error::homology(format!(
            "adapter source {} does not match checkpoint {}",
            adapter.arch_id(),
            ckpt.arch_id()
        )));
    }
    let mut state = TrainState::Adapter {
        model: params_from_checkpoint::<f32>(ckpt),
        flat: adapter.to_param_map(),
        targets: adapter.targets().cloned().collect(),
        scale: adapter.scale() as f32,
    };
    let history = train_loop(&mut state, cfg, tcfg, data)?;
    let TrainState::Adapter { flat, .. } = state else {
        unreachable!()
    };
    let mut trained = adapter.with_params(&flat)?;
    trained.set_metadata(
        "train",
        format!(
            "epochs={}, base_lr={}, batch={}, seed={}",
            tcfg.epochs, tcfg.base_lr, tcfg.batch_size, tcfg.seed
        ),
    );
    Ok((trained, history))
}

/// Loss history as CSV with columns step, epoch, lr, loss.
pub fn write_loss_history(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,epoch,lr,loss\n");
    for rec in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            rec.step, rec.epoch, rec.lr, rec.loss
        ));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
