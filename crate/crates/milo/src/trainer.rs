//! Deterministic training loop: AdamW with decoupled weight decay, linear
//! warmup + cosine decay, global-norm gradient clipping, per-step metric
//! capture, and held-out perplexity evaluation.
//!
//! Reproducibility contract: a (config, seed, corpus) triple fixes every
//! bit of the run. Data order comes from its own rng stream so the loss
//! choice cannot perturb batching, and evaluation consumes no randomness.

use crate::error::{Error, Result};
use crate::losses::{batch_loss, kahan_add, log_probs_into, LossSpec};
use crate::model::{ModelParams, OptimizerSnapshot};
use crate::numcore::{Graph, Tensor};
use crate::rng::{stream_rng, STREAM_DATA};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub const ADAM_EPS: f64 = 1e-8;

/// Fraction of chunked sequences held out for evaluation (1/50), taken
/// from the end of the corpus before any shuffling.
pub const EVAL_HOLDOUT_DIVISOR: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr_ratio: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub grad_clip: f64,
    pub eval_interval: u64,
    pub loss: LossSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3.0e-4,
            warmup_steps: 100,
            total_steps: 3000,
            min_lr_ratio: 0.1,
            batch_size: 32,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            grad_clip: 1.0,
            eval_interval: 100,
            loss: LossSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad(format!(
                "min_lr_ratio must lie in [0, 1], got {}",
                self.min_lr_ratio
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return bad(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            ));
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        self.loss.validate()
    }
}

/// Learning rate at a 1-based step: linear warmup to the peak, then cosine
/// decay to peak * min_lr_ratio at total_steps.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let peak = config.peak_lr;
    if step >= config.total_steps {
        return peak * config.min_lr_ratio;
    }
    if config.warmup_steps > 0 && step <= config.warmup_steps {
        return peak * step as f64 / config.warmup_steps as f64;
    }
    let progress =
        (step - config.warmup_steps) as f64 / (config.total_steps - config.warmup_steps) as f64;
    let floor = config.min_lr_ratio;
    peak * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First/second moment accumulators, parallel to `named_params` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named_params()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moment buffers as named tensors for the checkpoint's optimizer
    /// section.
    pub fn snapshot(&self, params: &ModelParams) -> OptimizerSnapshot {
        let mut tensors = Vec::new();
        for ((name, t), (m, v)) in params.named_params().iter().zip(self.m.iter().zip(&self.v)) {
            tensors.push((format!("{name}.m"), Tensor::param(&t.shape, m.clone())));
            tensors.push((format!("{name}.v"), Tensor::param(&t.shape, v.clone())));
        }
        OptimizerSnapshot {
            step: self.step,
            tensors,
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `clip`;
/// returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], clip: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum();
    let norm = sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// One AdamW update. Decoupled weight decay (param *= 1 - lr*wd) is
/// applied before the bias-corrected Adam step. A non-finite gradient
/// aborts before any parameter changes.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let mut slots = params.named_params_mut();
    if grads.len() != slots.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            detail: format!("{} gradients for {} parameters", grads.len(), slots.len()),
        });
    }
    for ((name, t), g) in slots.iter().zip(grads) {
        if t.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                detail: format!(
                    "{name}: {} gradient entries for {} elements",
                    g.len(),
                    t.len()
                ),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    state.step += 1;
    let t = state.step;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let decay = 1.0 - lr * config.weight_decay;
    for (i, (_, tensor)) in slots.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data.iter_mut().enumerate() {
            let g = grads[i][j];
            *p *= decay;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub grad_norm: f64,
    pub val_ppl: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,ce,grad_norm,val_ppl\n");
        for r in &self.rows {
            let val = r.val_ppl.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.lr, r.loss, r.ce, r.grad_norm, val
            ));
        }
        out
    }
}

/// Number of trailing sequences held out for evaluation.
pub fn held_out_count(n_sequences: usize) -> usize {
    if n_sequences >= 2 {
        (n_sequences / EVAL_HOLDOUT_DIVISOR).max(1)
    } else {
        0
    }
}

/// Splits chunked sequences into (training, evaluation) parts; the
/// evaluation part is the unshuffled tail.
pub fn split_sequences(sequences: &[Vec<u32>]) -> (&[Vec<u32>], &[Vec<u32>]) {
    let eval = held_out_count(sequences.len());
    sequences.split_at(sequences.len() - eval)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub metrics: RunMetrics,
    pub optimizer: OptimizerState,
}

fn check_sequences(sequences: &[Vec<u32>], vocab_size: usize) -> Result<usize> {
    let first = sequences
        .first()
        .ok_or(Error::EmptyInput("training sequences"))?;
    let t = first.len();
    if t < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequences must hold at least 2 tokens for input/target pairs, got {t}"
        )));
    }
    for seq in sequences {
        if seq.len() != t {
            return Err(Error::ShapeMismatch {
                op: "train",
                detail: format!("ragged sequences: {} vs {t}", seq.len()),
            });
        }
        for &tok in seq {
            if tok as usize >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: tok,
                    vocab_size,
                });
            }
        }
    }
    Ok(t)
}

/// Runs `config.total_steps` optimizer steps over the training split of
/// `sequences`, evaluating held-out perplexity every `eval_interval`
/// steps. Metrics are collected in memory; callers persist them.
pub fn train(
    params: &mut ModelParams,
    sequences: &[Vec<u32>],
    config: &TrainConfig,
) -> Result<TrainRun> {
    config.validate()?;
    let seq_len = check_sequences(sequences, params.config.vocab_size)?;
    if seq_len > params.config.seq_len + 1 {
        return Err(Error::InvalidConfig(format!(
            "sequences of {} tokens exceed the model's {}-token window plus target",
            seq_len, params.config.seq_len
        )));
    }
    let (train_seqs, eval_seqs) = split_sequences(sequences);
    if train_seqs.is_empty() {
        return Err(Error::EmptyInput("training sequences"));
    }

    let mut state = OptimizerState::new(params);
    let mut metrics = RunMetrics::default();
    let mut data_rng = stream_rng(config.seed, STREAM_DATA);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    order.shuffle(&mut data_rng);
    let mut cursor = 0usize;

    let rows_per_seq = seq_len - 1;
    for step in 1..=config.total_steps {
        let at = |e: Error| Error::AtStep {
            step,
            source: Box::new(e),
        };

        let mut inputs = Vec::with_capacity(config.batch_size * rows_per_seq);
        let mut targets = Vec::with_capacity(config.batch_size * rows_per_seq);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut data_rng);
                cursor = 0;
            }
            let seq = &train_seqs[order[cursor]];
            cursor += 1;
            inputs.extend_from_slice(&seq[..seq_len - 1]);
            targets.extend_from_slice(&seq[1..]);
        }

        let mut g = Graph::new();
        let pass = params
            .forward_graph(&mut g, &inputs, config.batch_size)
            .map_err(at)?;
        let mask = vec![true; targets.len()];
        let b = batch_loss(&mut g, pass.logits, &targets, &mask, &config.loss).map_err(at)?;
        let loss_value = g.scalar_value(b.node);
        g.backward(b.node).map_err(at)?;

        let mut grads: Vec<Vec<f64>> = pass
            .param_nodes
            .iter()
            .map(|&n| {
                g.grad(n)
                    .expect("parameters always receive gradients")
                    .to_vec()
            })
            .collect();
        drop(g);
        let grad_norm = clip_gradients(&mut grads, config.grad_clip);
        let lr = lr_at(step, config);
        adamw_step(params, &grads, &mut state, lr, config).map_err(at)?;

        let val_ppl = if step % config.eval_interval == 0 && !eval_seqs.is_empty() {
            Some(evaluate_ppl(params, eval_seqs, config.batch_size).map_err(at)?)
        } else {
            None
        };
        metrics.rows.push(MetricsRow {
            step,
            lr,
            loss: loss_value,
            ce: b.mean_ce,
            grad_norm,
            val_ppl,
        });
    }
    Ok(TrainRun {
        metrics,
        optimizer: state,
    })
}

/// exp(mean per-token cross-entropy) over the sequences, in evaluation
/// batches of whole sequences. Always raw CE, whatever the training loss.
/// Accumulation is compensated and follows sequence order, so the result
/// does not depend on the batch partition.
pub fn evaluate_ppl(
    params: &ModelParams,
    sequences: &[Vec<u32>],
    batch_size: usize,
) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("evaluation sequences"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let seq_len = check_sequences(sequences, params.config.vocab_size)?;
    let n = params.config.vocab_size;
    let rows_per_seq = seq_len - 1;
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    let mut count = 0u64;
    let mut lp = vec![0.0; n];
    for batch in sequences.chunks(batch_size) {
        let mut inputs = Vec::with_capacity(batch.len() * rows_per_seq);
        for seq in batch {
            inputs.extend_from_slice(&seq[..seq_len - 1]);
        }
        let logits = params.logits(&inputs, batch.len())?;
        for (s, seq) in batch.iter().enumerate() {
            for pos in 0..rows_per_seq {
                let row = &logits[(s * rows_per_seq + pos) * n..][..n];
                log_probs_into(row, &mut lp);
                kahan_add(&mut sum, &mut comp, -lp[seq[pos + 1] as usize]);
                count += 1;
            }
        }
    }
    Ok((sum / count as f64).exp())
}
