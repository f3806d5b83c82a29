//! AdamW with a warmup + cosine schedule, an early-stopping training loop and
//! a finite-difference gradient check over a model's trainable slots.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nanoformer::{argmax, GradScope, Model, TokenBatch};
use crate::numkit::{finite_diff_grad, grad_rel_err, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub val_interval: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 2000,
            base_lr: 1e-4,
            weight_decay: 0.01,
            warmup_steps: 50,
            batch_size: 32,
            val_interval: 30,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.max_steps {
            return Err(LabError::Config(format!(
                "warmup_steps ({}) must be below max_steps ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        if self.patience == 0 || self.val_interval == 0 || self.batch_size == 0 {
            return Err(LabError::Config("patience, val_interval and batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(LabError::Config("base_lr must be positive and weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(LabError::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at `max_steps`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.max_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.max_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments per trainable slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamWState {
    pub fn new<'a>(slots: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = slots.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamWState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay.
///
/// Nothing is modified if any gradient is non-finite; the error names the
/// offending slot. Returns the number of scalars updated.
pub fn adamw_step(
    slots: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[String],
    state: &mut AdamWState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<usize> {
    if slots.len() != grads.len() || slots.len() != state.m.len() || names.len() != slots.len() {
        return Err(LabError::Contract(format!(
            "optimizer got {} slots, {} grads, {} moments, {} names",
            slots.len(),
            grads.len(),
            state.m.len(),
            names.len()
        )));
    }
    for ((slot, g), name) in slots.iter().zip(grads).zip(names) {
        if slot.shape() != g.shape() {
            return Err(LabError::dim("adamw_step", slot.shape(), g.shape()));
        }
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(LabError::Numeric(format!(
                "non-finite gradient {} in slot {name} at element {i}",
                g.data()[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut touched = 0;
    for (i, slot) in slots.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, p) in slot.data_mut().iter_mut().enumerate() {
            let g = grads[i].data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * *p);
        }
        touched += slot.numel();
    }
    Ok(touched)
}

/// What a batch is scored against.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Next-token ids per position; masked-out positions carry no loss.
    Tokens { ids: Vec<usize>, mask: Vec<bool> },
    /// Teacher logits, `(batch·seq) × vocab`, matched by mean squared error.
    Logits(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub targets: Targets,
}

/// Training and validation data for [`train`].
pub trait BatchSource {
    /// Draws the next training batch using the trainer's RNG.
    fn train_batch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize) -> Result<Batch>;
    /// The fixed validation set.
    fn val_batches(&self) -> Result<Vec<Batch>>;
}

/// Adds the batch loss to `g`, returning the loss and logits nodes.
pub fn batch_loss(model: &Model, g: &mut Graph, scope: GradScope, batch: &Batch) -> Result<(Var, Var, Vec<Var>)> {
    let vars = model.register(g, scope)?;
    let logits = model.logits(g, &vars, &batch.tokens)?;
    let loss = match &batch.targets {
        Targets::Tokens { ids, mask } => g.softmax_ce(logits, ids, mask)?,
        Targets::Logits(teacher) => {
            let t = g.constant(teacher.clone());
            g.mse(logits, t)?
        }
    };
    Ok((loss, logits, vars.trainable()))
}

/// Loss and metric of a model on one batch, without gradients.
///
/// The metric is teacher-forced next-token accuracy over unmasked positions,
/// or top-1 agreement with the teacher logits for distillation batches.
pub fn score_batch(model: &Model, batch: &Batch) -> Result<(f64, f64, usize)> {
    let mut g = Graph::new();
    let (loss, logits, _) = batch_loss(model, &mut g, GradScope::None, batch)?;
    let v = model.config.vocab_size;
    let out = g.value(logits).data();
    let (mut hits, mut total) = (0usize, 0usize);
    match &batch.targets {
        Targets::Tokens { ids, mask } => {
            for (i, (&t, &m)) in ids.iter().zip(mask).enumerate() {
                if m {
                    total += 1;
                    hits += usize::from(argmax(&out[i * v..(i + 1) * v]) == t);
                }
            }
        }
        Targets::Logits(teacher) => {
            for (row, trow) in out.chunks(v).zip(teacher.data().chunks(v)) {
                total += 1;
                hits += usize::from(argmax(row) == argmax(trow));
            }
        }
    }
    let loss = g.value(loss).item();
    Ok((loss, hits as f64 / total.max(1) as f64, total))
}

/// Mean loss and metric over a validation set, weighting batches by scored positions.
pub fn validate(model: &Model, batches: &[Batch]) -> Result<(f64, f64)> {
    if batches.is_empty() {
        return Err(LabError::Data("validation set is empty".into()));
    }
    let (mut loss, mut metric, mut weight) = (0.0, 0.0, 0.0);
    for b in batches {
        let (l, m, n) = score_batch(model, b)?;
        loss += l * n as f64;
        metric += m * n as f64;
        weight += n as f64;
    }
    Ok((loss / weight, metric / weight))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    /// Mean training loss since the previous record; absent at step 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxSteps,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<ValRecord>,
    pub stop_reason: StopReason,
    pub best_step: usize,
    pub best_val_loss: f64,
    /// Optimizer steps actually taken.
    pub steps: usize,
    /// Scalars touched by each optimizer step.
    pub touched_per_step: usize,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Equality ignoring wall time.
    pub fn same_run(&self, other: &TrainReport) -> bool {
        self.records == other.records
            && self.stop_reason == other.stop_reason
            && self.best_step == other.best_step
            && self.steps == other.steps
            && self.touched_per_step == other.touched_per_step
    }

    pub fn initial_val_loss(&self) -> f64 {
        self.records[0].val_loss
    }

    pub fn best_record(&self) -> &ValRecord {
        self.records
            .iter()
            .find(|r| r.step == self.best_step)
            .expect("best step is always a recorded step")
    }
}

fn snapshot(model: &mut Model, scope: GradScope) -> Vec<Tensor> {
    model.trainable_tensors_mut(scope).into_iter().map(|t| t.clone()).collect()
}

/// Trains the slots selected by `scope` (adapter or full base).
///
/// Validation runs at step 0 and every `val_interval` steps. Training stops
/// after `patience` validations without a strict val-loss improvement, or at
/// `max_steps`; the best validated state is restored either way. Frozen
/// tensors are fingerprinted before and after, and any change is an error.
pub fn train(model: &mut Model, scope: GradScope, source: &mut dyn BatchSource, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if scope == GradScope::None {
        return Err(LabError::Contract("nothing to train with an empty gradient scope".into()));
    }
    let start = Instant::now();
    let frozen_before = model.frozen_fingerprints(scope);
    let names = model.trainable_names(scope);
    if names.is_empty() {
        return Err(LabError::Contract("model has no trainable slots in this scope".into()));
    }
    let val = source.val_batches()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamWState::new(model.trainable_tensors_mut(scope).into_iter().map(|t| &*t));

    let (v0, m0) = validate(model, &val)?;
    let mut records = vec![ValRecord {
        step: 0,
        train_loss: None,
        val_loss: v0,
        val_metric: m0,
        lr: cosine_lr(0, cfg),
    }];
    let mut best = (0usize, v0, snapshot(model, scope));
    let mut stale = 0;
    let mut window = (0.0, 0usize);
    let mut stop_reason = StopReason::MaxSteps;
    let mut touched = 0;
    let mut steps = 0;

    for step in 0..cfg.max_steps {
        let batch = source.train_batch(&mut rng, cfg.batch_size)?;
        let mut g = Graph::new();
        let (loss, _, vars) = batch_loss(model, &mut g, scope, &batch)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(LabError::Numeric(format!("non-finite training loss {loss_value} at step {step}")));
        }
        g.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
        drop(g);
        let lr = cosine_lr(step, cfg);
        let mut slots = model.trainable_tensors_mut(scope);
        touched = adamw_step(&mut slots, &grads, &names, &mut state, lr, cfg)?;
        steps = step + 1;
        window.0 += loss_value;
        window.1 += 1;

        if steps % cfg.val_interval == 0 || steps == cfg.max_steps {
            let (vl, vm) = validate(model, &val)?;
            if !vl.is_finite() {
                return Err(LabError::Numeric(format!("non-finite validation loss at step {steps}")));
            }
            records.push(ValRecord {
                step: steps,
                train_loss: Some(window.0 / window.1 as f64),
                val_loss: vl,
                val_metric: vm,
                lr: cosine_lr(steps, cfg),
            });
            window = (0.0, 0);
            if vl < best.1 {
                best = (steps, vl, snapshot(model, scope));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stop_reason = StopReason::EarlyStop;
                    break;
                }
            }
        }
    }

    for (slot, saved) in model.trainable_tensors_mut(scope).into_iter().zip(best.2) {
        *slot = saved;
    }
    if model.frozen_fingerprints(scope) != frozen_before {
        return Err(LabError::Verification("a frozen tensor changed during training".into()));
    }
    log::debug!("training stopped at step {steps} ({stop_reason:?}); best step {}", best.0);
    Ok(TrainReport {
        records,
        stop_reason,
        best_step: best.0,
        best_val_loss: best.1,
        steps,
        touched_per_step: touched,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Overwrites every trainable adapter slot with Uniform(−scale, scale) entries.
///
/// Gradient checks at a zero-start initialization are nearly vacuous (most
/// slots then have exactly zero gradient), so checks perturb first.
pub fn perturb_trainables(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.trainable_tensors_mut(GradScope::Adapter) {
        for x in t.data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}

/// Worst relative error between backward gradients and central finite
/// differences, over the named adapter slots (all trainable slots if `only` is `None`).
pub fn grad_check(model: &Model, batch: &Batch, eps: f64, only: Option<&[&str]>) -> Result<f64> {
    let names = model.trainable_names(GradScope::Adapter);
    if names.is_empty() {
        return Err(LabError::Contract("grad_check needs an attached adapter with trainable slots".into()));
    }
    let selected: Vec<usize> = match only {
        None => (0..names.len()).collect(),
        Some(req) => req
            .iter()
            .map(|r| {
                names.iter().position(|n| n == r).ok_or_else(|| {
                    LabError::Contract(format!("slot {r:?} is not trainable in this mode"))
                })
            })
            .collect::<Result<_>>()?,
    };

    let mut g = Graph::new();
    let (loss, _, vars) = batch_loss(model, &mut g, GradScope::Adapter, batch)?;
    g.backward(loss)?;

    let mut worst: f64 = 0.0;
    for i in selected {
        let analytic = g.grad_or_zeros(vars[i]);
        let mut probe_model = model.clone();
        let current = probe_model.trainable_tensors_mut(GradScope::Adapter)[i].clone();
        let numeric = finite_diff_grad(
            |p| {
                *probe_model.trainable_tensors_mut(GradScope::Adapter)[i] = p.clone();
                let mut g = Graph::new();
                let (l, _, _) = batch_loss(&probe_model, &mut g, GradScope::None, batch)?;
                Ok(g.value(l).item())
            },
            &current,
            eps,
        )?;
        let err = grad_rel_err(&analytic, &numeric);
        log::debug!("grad_check {}: {err:.3e}", names[i]);
        worst = worst.max(err);
    }
    Ok(worst)
}
