//! DQN over trajectory slices: Bellman targets with the double-evaluation
//! split (online network selects the bootstrap action, target network
//! evaluates it), MSE loss over action positions only, Adam with linear
//! warm-up, and a Polyak-averaged target network updated once per batch.

use crate::codec::{self, ActionTargetEntry, Token, TokenStream};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    forward_on_tape, infer_q, register_params, DropoutCtx, ModelConfig, ModelParams,
};
use crate::numerics::{adam_step, real, OptimizerState, Real, Tape, Tensor};
use crate::util::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub gamma: f64,
    pub reward_scale: f64,
    /// Polyak constant.
    pub alpha: f64,
    pub base_lr: f64,
    pub warmup_batches: u64,
    pub batch_slices: usize,
    pub slice_len: usize,
    pub total_batches: usize,
    pub seed: u64,
    /// Global-norm gradient clip; the paper is silent on clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            reward_scale: 30.0,
            alpha: 0.1,
            base_lr: 1e-2,
            warmup_batches: 10,
            batch_slices: 10,
            slice_len: 4096,
            total_batches: 20_000,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Validation(format!("gamma {} not in (0,1)", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Validation(format!("alpha {} not in (0,1]", self.alpha)));
        }
        if self.reward_scale <= 0.0 {
            return Err(Error::Validation(format!(
                "reward_scale {} must be positive",
                self.reward_scale
            )));
        }
        if self.batch_slices == 0 {
            return Err(Error::Validation("batch_slices must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Anything that can report Q-values at stream positions. The trainer uses
/// model-backed sources; tests substitute tabular stand-ins.
pub trait QSource<F: Real> {
    fn q_values(&self, tokens: &[Token], positions: &[usize]) -> Result<Vec<[F; 4]>>;
}

/// Model-backed Q source.
pub struct ModelQSource<'a, F: Real> {
    pub params: &'a ModelParams<F>,
    pub cfg: &'a ModelConfig,
}

impl<F: Real> QSource<F> for ModelQSource<'_, F> {
    fn q_values(&self, tokens: &[Token], positions: &[usize]) -> Result<Vec<[F; 4]>> {
        infer_q(self.params, self.cfg, tokens, positions)
    }
}

/// Per-action-position Bellman targets, aligned with the layout that
/// produced them. No gradients ever flow through these values.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch<F> {
    pub positions: Vec<usize>,
    pub values: Vec<F>,
}

/// Greedy index with ties broken toward the lowest action index.
pub fn argmax4<F: Real>(q: &[F; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if q[i] > q[best] {
            best = i;
        }
    }
    best
}

/// Bellman targets for one slice. Non-terminal action at t: the online
/// network picks `a* = argmax Q_online(tau_{t+1}, .)` at the next action
/// position and the target network supplies the value, so
/// `y = scale * r + gamma * Q_target(tau_{t+1}, a*)`. Terminal actions get
/// `y = scale * r` exactly.
pub fn compute_targets<F: Real>(
    online: &dyn QSource<F>,
    target: &dyn QSource<F>,
    tokens: &[Token],
    layout: &[ActionTargetEntry],
    gamma: f64,
    reward_scale: f64,
) -> Result<TargetBatch<F>> {
    let next_positions: Vec<usize> = layout.iter().filter_map(|e| e.next_pos).collect();
    let (online_next, target_next) = if next_positions.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (
            online.q_values(tokens, &next_positions)?,
            target.q_values(tokens, &next_positions)?,
        )
    };
    compute_targets_from_q(&next_positions, &online_next, &target_next, layout, gamma, reward_scale)
}

/// Same rule, with the bootstrap Q-rows already in hand (the training loop
/// reads the online rows off its gradient forward pass).
pub fn compute_targets_from_q<F: Real>(
    next_positions: &[usize],
    online_next: &[[F; 4]],
    target_next: &[[F; 4]],
    layout: &[ActionTargetEntry],
    gamma: f64,
    reward_scale: f64,
) -> Result<TargetBatch<F>> {
    if online_next.len() != next_positions.len() || target_next.len() != next_positions.len() {
        return Err(Error::Contract(format!(
            "bootstrap rows ({}, {}) do not match {} next positions",
            online_next.len(),
            target_next.len(),
            next_positions.len()
        )));
    }
    let row_of: HashMap<usize, usize> = next_positions
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let mut positions = Vec::with_capacity(layout.len());
    let mut values = Vec::with_capacity(layout.len());
    for entry in layout {
        let y = match entry.next_pos {
            None => real::<F>(reward_scale * entry.reward_after),
            Some(np) => {
                let row = *row_of.get(&np).ok_or_else(|| {
                    Error::Contract(format!("layout next position {np} missing from slice"))
                })?;
                let a_star = argmax4(&online_next[row]);
                real::<F>(reward_scale * entry.reward_after)
                    + real::<F>(gamma) * target_next[row][a_star]
            }
        };
        positions.push(entry.pos);
        values.push(y);
    }
    Ok(TargetBatch { positions, values })
}

/// Mean squared error over action positions. `q_pred[i]` must be
/// Q(tau_t, a_t) for the action actually taken at `targets.positions[i]`;
/// non-action positions never enter.
pub fn masked_loss<F: Real>(q_pred: &[F], targets: &TargetBatch<F>) -> Result<F> {
    if q_pred.len() != targets.values.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} targets",
            q_pred.len(),
            targets.values.len()
        )));
    }
    if q_pred.is_empty() {
        return Ok(F::zero());
    }
    let n = real::<F>(q_pred.len() as f64);
    let sum: F = q_pred
        .iter()
        .zip(&targets.values)
        .map(|(&q, &y)| (y - q) * (y - q))
        .sum();
    Ok(sum / n)
}

/// phi <- alpha * theta + (1 - alpha) * phi, elementwise.
pub fn polyak_update<F: Real>(
    target: &mut ModelParams<F>,
    online: &ModelParams<F>,
    alpha: f64,
) -> Result<()> {
    let online_fields = online.fields();
    let mut target_fields = target.fields_mut();
    if online_fields.len() != target_fields.len() {
        return Err(Error::Contract(
            "target/online parameter sets differ in layout".to_string(),
        ));
    }
    let a = real::<F>(alpha);
    let b = real::<F>(1.0 - alpha);
    for (t, (_, o)) in target_fields.iter_mut().zip(online_fields) {
        t.same_shape(o, "polyak_update")?;
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = a * ov + b * *tv;
        }
    }
    Ok(())
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMetrics {
    pub batch: usize,
    pub loss: f64,
    pub mean_abs_target: f64,
    pub lr: f64,
    pub alpha: f64,
}

pub fn metrics_csv(metrics: &[BatchMetrics]) -> String {
    let mut s = String::from("batch,loss,mean_abs_target,lr,alpha\n");
    for m in metrics {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            m.batch, m.loss, m.mean_abs_target, m.lr, m.alpha
        ));
    }
    s
}

pub struct TrainOutcome<F> {
    pub params: ModelParams<F>,
    pub target_params: ModelParams<F>,
    pub metrics: Vec<BatchMetrics>,
}

struct SlicePrep {
    tokens: Vec<Token>,
    layout: Vec<ActionTargetEntry>,
    /// All action positions of the slice, in order.
    positions: Vec<usize>,
    /// Taken-action index per action position.
    taken: Vec<usize>,
}

fn prep_slice(tokens: &[Token]) -> Result<SlicePrep> {
    let stream = TokenStream::from_tokens(tokens.to_vec())?;
    let layout = codec::action_targets_layout(&stream);
    let positions = layout.iter().map(|e| e.pos).collect();
    let taken = layout.iter().map(|e| e.action.index()).collect();
    Ok(SlicePrep {
        tokens: tokens.to_vec(),
        layout,
        positions,
        taken,
    })
}

struct SliceGrad<F> {
    grads: Vec<Tensor<F>>,
    sse: f64,
    abs_target_sum: f64,
    count: usize,
}

/// Forward + backward for one slice. Returns gradients of the *sum* of
/// squared errors so the batch can normalize by its global action count.
fn slice_pass<F: Real>(
    prep: &SlicePrep,
    params: &ModelParams<F>,
    target_params: &ModelParams<F>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dropout_seed: Option<u64>,
) -> Result<SliceGrad<F>> {
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params, true);
    let mut dropout_rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let dropout = dropout_rng.as_mut().map(|rng| DropoutCtx {
        rng,
        p: model_cfg.dropout,
    });
    let q_all = forward_on_tape(&mut tape, &ids, model_cfg, &prep.tokens, &prep.positions, dropout)?;

    // Bellman targets: online bootstrap rows come from this same forward
    // pass (values only, so no gradient path into the targets).
    let row_of: HashMap<usize, usize> = prep
        .positions
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let q_all_values: Vec<[F; 4]> = tape
        .value(q_all)
        .data()
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let next_positions: Vec<usize> = prep.layout.iter().filter_map(|e| e.next_pos).collect();
    let online_next: Vec<[F; 4]> = next_positions
        .iter()
        .map(|p| q_all_values[row_of[p]])
        .collect();
    let target_next = if next_positions.is_empty() {
        Vec::new()
    } else {
        infer_q(target_params, model_cfg, &prep.tokens, &next_positions)?
    };
    let targets = compute_targets_from_q(
        &next_positions,
        &online_next,
        &target_next,
        &prep.layout,
        cfg.gamma,
        cfg.reward_scale,
    )?;

    let q_taken = tape.select_cols(q_all, prep.taken.clone())?;
    let y = tape.constant(Tensor::new(vec![targets.values.len()], targets.values.clone())?);
    let diff = tape.sub(q_taken, y)?;
    let sq = tape.mul(diff, diff)?;
    let sse = tape.sum_all(sq);
    let sse_value = tape.value(sse).item().as_f64();
    if !sse_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "slice produced non-finite loss (sse = {sse_value})"
        )));
    }
    let mut grads = tape.backward(sse)?;
    let grad_tensors: Vec<Tensor<F>> = ids.ids.iter().map(|&id| grads.take(id, &tape)).collect();
    let abs_target_sum = targets.values.iter().map(|v| v.as_f64().abs()).sum();
    Ok(SliceGrad {
        grads: grad_tensors,
        sse: sse_value,
        abs_target_sum,
        count: targets.values.len(),
    })
}

/// Full training loop. Deterministic in `cfg.seed` regardless of worker
/// count: slices within a batch are processed in parallel but reduced in
/// batch order.
pub fn train<F: Real>(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_batch: Option<&mut dyn FnMut(usize, &ModelParams<F>) -> Result<()>>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.slices.is_empty() {
        return Err(Error::Validation("dataset has no slices".to_string()));
    }
    if dataset.slice_len != cfg.slice_len {
        return Err(Error::Validation(format!(
            "dataset slice_len {} != configured slice_len {}",
            dataset.slice_len, cfg.slice_len
        )));
    }
    if cfg.slice_len > model_cfg.max_context {
        return Err(Error::Validation(format!(
            "slice_len {} exceeds model max_context {}",
            cfg.slice_len, model_cfg.max_context
        )));
    }

    let preps: Vec<SlicePrep> = dataset
        .slices
        .par_iter()
        .map(|s| prep_slice(&s.tokens))
        .collect::<Result<_>>()?;

    let mut params: ModelParams<F> = crate::model::init(model_cfg, derive_seed(cfg.seed, 10))?;
    let mut target_params = crate::model::clone_params(&params);
    let shapes: Vec<Vec<usize>> = params
        .fields()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut opt = OptimizerState::<F>::new(&shapes, cfg.base_lr, cfg.warmup_batches);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11));
    let mut metrics = Vec::with_capacity(cfg.total_batches);

    for batch in 0..cfg.total_batches {
        let chosen: Vec<usize> = if preps.len() >= cfg.batch_slices {
            rand::seq::index::sample(&mut batch_rng, preps.len(), cfg.batch_slices).into_vec()
        } else {
            use rand::Rng;
            (0..cfg.batch_slices)
                .map(|_| batch_rng.random_range(0..preps.len()))
                .collect()
        };

        let passes: Vec<Result<SliceGrad<F>>> = chosen
            .par_iter()
            .enumerate()
            .map(|(slot, &s)| {
                let dropout_seed = (model_cfg.dropout > 0.0)
                    .then(|| derive_seed(cfg.seed, 1_000_000 + (batch * cfg.batch_slices + slot) as u64));
                slice_pass(&preps[s], &params, &target_params, model_cfg, cfg, dropout_seed)
            })
            .collect();

        let mut total_count = 0usize;
        let mut total_sse = 0.0;
        let mut total_abs = 0.0;
        let mut grad_sum: Option<Vec<Tensor<F>>> = None;
        for (slot, pass) in passes.into_iter().enumerate() {
            let pass = pass.map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!(
                    "batch {batch}, slice {}: {msg}",
                    chosen[slot]
                )),
                other => other,
            })?;
            total_count += pass.count;
            total_sse += pass.sse;
            total_abs += pass.abs_target_sum;
            match &mut grad_sum {
                None => grad_sum = Some(pass.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&pass.grads) {
                        for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = grad_sum.expect("batch_slices >= 1");
        if total_count > 0 {
            let inv = real::<F>(1.0 / total_count as f64);
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
        }
        if let Some(clip) = cfg.grad_clip {
            let norm: f64 = grads
                .iter()
                .flat_map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = real::<F>(clip / norm);
                for g in &mut grads {
                    for x in g.data_mut() {
                        *x *= scale;
                    }
                }
            }
        }

        let lr_used = opt.effective_lr();
        {
            let mut fields = params.fields_mut();
            adam_step(&mut fields, &grads, &mut opt)?;
        }
        polyak_update(&mut target_params, &params, cfg.alpha)?;

        metrics.push(BatchMetrics {
            batch,
            loss: if total_count > 0 {
                total_sse / total_count as f64
            } else {
                0.0
            },
            mean_abs_target: if total_count > 0 {
                total_abs / total_count as f64
            } else {
                0.0
            },
            lr: lr_used,
            alpha: cfg.alpha,
        });
        if let Some(cb) = on_batch.as_mut() {
            cb(batch + 1, &params)?;
        }
    }

    Ok(TrainOutcome {
        params,
        target_params,
        metrics,
    })
}
