//! Two-stage training harness.
//!
//! Stage one trains only the additions of the dual-path layers (shared and
//! routing experts, router, mixing scalars, and their norms) while every
//! base parameter stays frozen. Stage two keeps those trainable and adds the
//! low-rank adapters; base weights and the static anchors never move in
//! either stage. Optimization is AdamW with decoupled weight decay and a
//! linear-warmup cosine schedule.

use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Model, SequenceInput};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
}

/// Run plan for one training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub lr_peak: f64,
    pub warmup_ratio: f64,
    /// 0 means "derive from epochs × steps per epoch".
    pub total_steps: usize,
    pub weight_decay: f64,
    pub gamma: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl TrainPlan {
    pub fn stage_i(seed: u64) -> Self {
        TrainPlan {
            stage: Stage::I,
            lr_peak: 1e-3,
            warmup_ratio: 0.03,
            total_steps: 0,
            weight_decay: 0.0,
            gamma: 0.001,
            seed,
            batch_size: 5,
            epochs: 1,
        }
    }

    pub fn stage_ii(seed: u64) -> Self {
        TrainPlan { stage: Stage::II, lr_peak: 2e-5, ..TrainPlan::stage_i(seed) }
    }
}

/// Which role a parameter plays for freezing purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    /// Pre-existing weights: embeddings, positions, head, visual pipeline,
    /// attention, block norms ahead of attention.
    Base,
    /// The frozen anchor copy inside each dual-path layer. Never trains.
    StaticAnchor,
    /// Shared/routing experts, router, mixing scalars, and their norms.
    MoeAddition,
    /// Low-rank adapter matrices.
    Adapter,
}

pub fn param_class(name: &str) -> Result<ParamClass> {
    if name.starts_with("lora.") {
        return Ok(ParamClass::Adapter);
    }
    if name.contains(".moe.static.") {
        return Ok(ParamClass::StaticAnchor);
    }
    if name.contains(".moe.") {
        return Ok(ParamClass::MoeAddition);
    }
    let base = name == "emb"
        || name == "pos"
        || name == "head"
        || name.starts_with("vis.")
        || (name.starts_with("block") && (name.contains(".ln1.") || name.contains(".attn.")));
    if base {
        Ok(ParamClass::Base)
    } else {
        Err(Error::Config(format!("unknown parameter namespace {name:?}")))
    }
}

/// Frozen flag per parameter for the given stage, in store order.
pub fn freeze_mask(store: &ParamStore, stage: Stage) -> Result<Vec<bool>> {
    store
        .iter()
        .map(|(_, e)| {
            let frozen = match param_class(&e.name)? {
                ParamClass::Base | ParamClass::StaticAnchor => true,
                ParamClass::MoeAddition => false,
                ParamClass::Adapter => stage == Stage::I,
            };
            Ok(frozen)
        })
        .collect()
}

pub fn apply_freeze(store: &mut ParamStore, stage: Stage) -> Result<()> {
    let mask = freeze_mask(store, stage)?;
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, frozen) in ids.into_iter().zip(mask) {
        store.set_frozen(id, frozen);
    }
    Ok(())
}

/// Learning rate at a (possibly fractional) step: linear ramp to the peak
/// over the first `ceil(warmup_ratio × total)` steps, then cosine decay to
/// zero at `total`.
pub fn lr_at(step: f64, lr_peak: f64, warmup_ratio: f64, total_steps: usize) -> f64 {
    let total = total_steps as f64;
    if total <= 0.0 || step >= total {
        return 0.0;
    }
    let warm = (warmup_ratio * total).ceil();
    if warm > 0.0 && step <= warm {
        return lr_peak * (step / warm).max(0.0);
    }
    let t = (step - warm) / (total - warm);
    lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW accumulators. Moments exist only for parameters that have received
/// a gradient, i.e. only for trainable parameters.
pub struct OptimState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl OptimState {
    pub fn new(n_params: usize) -> Self {
        OptimState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: vec![None; n_params],
        }
    }

    pub fn tracked_params(&self) -> usize {
        self.moments.iter().filter(|m| m.is_some()).count()
    }
}

/// One decoupled-weight-decay Adam step with bias correction. Gradients are
/// scanned for non-finite values first; a NaN aborts the whole step and
/// names the parameter. Frozen parameters are untouched by construction —
/// the tape never reports gradients for them.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (pid, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::Train(format!(
                "non-finite gradient for parameter {:?}; step aborted",
                store.name(pid)
            )));
        }
        debug_assert!(!store.is_frozen(pid), "gradient for frozen {}", store.name(pid));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (pid, g) in grads.iter() {
        let slot = &mut state.moments[pid.index()];
        if slot.is_none() {
            let z = Tensor::zeros(g.shape().to_vec());
            *slot = Some((z.clone(), z));
        }
        let (m, v) = slot.as_mut().expect("moment just created");
        let mut p = store.value(pid).clone();
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let pi = p.data()[i];
            p.data_mut()[i] = pi - lr * (m_hat / (v_hat.sqrt() + state.eps) + weight_decay * pi);
        }
        store.set_value(pid, p);
    }
    Ok(())
}

/// Per-layer routing numbers logged every step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerLog {
    pub dispatch: Vec<f64>,
    pub mean_gate: Vec<f64>,
    pub dispatch_image: Vec<f64>,
    pub dispatch_text: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub ar_loss: f64,
    pub bal_loss: f64,
    pub total_loss: f64,
    pub layers: Vec<LayerLog>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepMetrics>,
    /// Evaluation-mode per-token loss over the whole corpus after training.
    pub final_ar: f64,
    pub total_steps: usize,
    pub trainable_elements: usize,
    pub adapter_elements: Option<usize>,
}

/// Train over the corpus. Batches follow a seeded per-epoch shuffle; every
/// source of randomness derives from the plan seed, so identical inputs
/// produce identical loss traces and identical final parameters.
pub fn train_loop(
    model: &mut Model,
    plan: &TrainPlan,
    corpus: &[SequenceInput],
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    if plan.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if plan.stage == Stage::II && model.adapters.is_none() {
        return Err(Error::Config(
            "stage II requires adapters attached to the model".into(),
        ));
    }
    apply_freeze(&mut model.store, plan.stage)?;

    // Adapter accounting: the element count must equal sum_sites r·(d+d').
    let adapter_elements = match (&model.adapters, plan.stage) {
        (Some(set), Stage::II) => {
            let counted = set.trainable_params(&model.store);
            let formula: usize = set
                .adapters
                .iter()
                .map(|a| {
                    let w0 = model.store.value(a.base);
                    set.rank * (w0.shape()[0] + w0.shape()[1])
                })
                .sum();
            assert_eq!(counted, formula, "adapter parameter accounting diverged");
            Some(counted)
        }
        _ => None,
    };
    let trainable_elements = model.store.count_elements(|e| !e.frozen);

    let steps_per_epoch = corpus.len().div_ceil(plan.batch_size);
    let total_steps = if plan.total_steps > 0 {
        plan.total_steps
    } else {
        plan.epochs * steps_per_epoch
    };

    let mut optim = OptimState::new(model.store.len());
    let mut steps = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut shuffle_rng = SplitMix64::labeled(plan.seed, &format!("shuffle.epoch{epoch}"));
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(plan.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            step += 1;
            let lr = lr_at(step as f64, plan.lr_peak, plan.warmup_ratio, total_steps);
            let batch: Vec<SequenceInput> =
                chunk.iter().map(|&i| corpus[i].clone()).collect();
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::train(plan.seed, step);
            let fwd = model.batch_loss(&mut tape, &batch, plan.gamma, &mut ctx)?;
            let ar = tape.value(fwd.ar).scalar_value();
            let bal = tape.value(fwd.bal).scalar_value();
            let total = tape.value(fwd.total).scalar_value();
            if !total.is_finite() {
                return Err(Error::Train(format!("non-finite loss at step {step}")));
            }
            let grads = tape.backward(fwd.total, model.store.len())?;
            adamw_step(&mut model.store, &grads, &mut optim, lr, plan.weight_decay)?;
            steps.push(StepMetrics {
                step,
                lr,
                ar_loss: ar,
                bal_loss: bal,
                total_loss: total,
                layers: fwd
                    .layer_stats
                    .iter()
                    .map(|s| LayerLog {
                        dispatch: s.dispatch.clone(),
                        mean_gate: s.mean_gate.clone(),
                        dispatch_image: s.dispatch_image.clone(),
                        dispatch_text: s.dispatch_text.clone(),
                    })
                    .collect(),
            });
        }
    }

    let final_ar = eval_ar(model, corpus, plan.gamma)?;
    Ok(TrainReport {
        steps,
        final_ar,
        total_steps,
        trainable_elements,
        adapter_elements,
    })
}

/// Evaluation-mode per-token autoregressive loss over a corpus.
pub fn eval_ar(model: &Model, corpus: &[SequenceInput], gamma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval();
    let fwd = model.batch_loss(&mut tape, corpus, gamma, &mut ctx)?;
    Ok(tape.value(fwd.ar).scalar_value())
}

/// Serialize a training report as one JSON object per line, preceded by a
/// single header object that echoes the run configuration.
pub fn write_metrics_jsonl(
    path: &std::path::Path,
    report: &TrainReport,
    config_echo: &serde_json::Value,
) -> Result<()> {
    let mut out = String::new();
    let header = serde_json::json!({ "_meta": { "config": config_echo } });
    out.push_str(&header.to_string());
    out.push('\n');
    for s in &report.steps {
        out.push_str(
            &serde_json::to_string(s).map_err(|e| Error::Data(format!("metrics encode: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::Train(format!("metrics write failed at {}: {e}", path.display())))?;
    Ok(())
}
