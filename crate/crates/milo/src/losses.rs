//! Per-token training losses over logits.
//!
//! Three losses share one shape: `value = factor * ce` where `ce` is the
//! natural-log cross-entropy of the target under softmax(logits).
//!
//! * cross-entropy: `factor = 1`
//! * focal:         `factor = (1 - p_target)^gamma`
//! * mile:          `factor = (1 + H)^gamma`, `H` the entropy of the
//!   predicted distribution, so hard (high-entropy) predictions are
//!   amplified instead of confident ones.
//!
//! At `gamma = 0` both scaled losses take the plain cross-entropy code path
//! and match it exactly. The factor can be treated as a constant during
//! differentiation ([`FactorGrad::Detached`]) or differentiated through
//! ([`FactorGrad::Differentiable`]).
//!
//! All probabilities flow through log-softmax; entropy is computed as
//! `lse(z) - Σ p_j z_j`, so nothing ever takes `log(0)`.

use crate::error::{Error, Result};
use crate::numcore::{CustomOp, Graph, NodeId};
use serde::{Deserialize, Serialize};

/// Largest accepted focusing exponent.
pub const GAMMA_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal,
    #[serde(rename = "mile")]
    MiLe,
}

/// Whether the scaling factor is differentiated through or treated as a
/// per-token constant during the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorGrad {
    Detached,
    Differentiable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub kind: LossKind,
    pub gamma: f64,
    pub factor_grad: FactorGrad,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::MiLe,
            gamma: 1.0,
            factor_grad: FactorGrad::Differentiable,
        }
    }
}

impl LossSpec {
    pub fn new(kind: LossKind, gamma: f64, factor_grad: FactorGrad) -> Result<Self> {
        let spec = LossSpec {
            kind,
            gamma,
            factor_grad,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn cross_entropy() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropy,
            gamma: 0.0,
            factor_grad: FactorGrad::Detached,
        }
    }

    pub fn mile(gamma: f64) -> Result<Self> {
        LossSpec::new(LossKind::MiLe, gamma, FactorGrad::Differentiable)
    }

    pub fn focal(gamma: f64) -> Result<Self> {
        LossSpec::new(LossKind::Focal, gamma, FactorGrad::Differentiable)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 || self.gamma > GAMMA_MAX {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in [0, {GAMMA_MAX}], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// One token's loss, with the scaling factor and unscaled cross-entropy
/// kept separate for logging and analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerTokenLoss {
    pub value: f64,
    pub factor: f64,
    pub ce_value: f64,
}

/// A normalized distribution with its log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ProbDist {
    pub fn from_logits(z: &[f64]) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::EmptyInput("logits"));
        }
        let mut log_probs = vec![0.0; z.len()];
        log_probs_into(z, &mut log_probs);
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        Ok(ProbDist { probs, log_probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Log-sum-exp with max subtraction.
pub fn lse(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}

/// Fills `out` with `z - lse(z)` and returns the lse.
pub fn log_probs_into(z: &[f64], out: &mut [f64]) -> f64 {
    debug_assert_eq!(z.len(), out.len());
    let l = lse(z);
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - l;
    }
    l
}

/// Entropy in nats of the distribution given by `dist`, clamped into its
/// mathematical range `[0, ln N]`.
pub fn entropy(dist: &ProbDist) -> f64 {
    let raw = -dist
        .probs
        .iter()
        .zip(&dist.log_probs)
        .map(|(&p, &lp)| p * lp)
        .sum::<f64>();
    clamp_entropy(raw, dist.len())
}

/// Entropy in nats of softmax(z).
pub fn entropy_from_logits(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    let mut lp = vec![0.0; z.len()];
    let l = log_probs_into(z, &mut lp);
    Ok(entropy_core(z, &lp, l))
}

fn clamp_entropy(h: f64, n: usize) -> f64 {
    h.max(0.0).min((n as f64).ln())
}

/// `H = lse(z) - Σ p_j z_j`, clamped to `[0, ln N]`.
pub(crate) fn entropy_core(z: &[f64], lp: &[f64], lse: f64) -> f64 {
    let mean_logit: f64 = z.iter().zip(lp).map(|(&zv, &lpv)| lpv.exp() * zv).sum();
    clamp_entropy(lse - mean_logit, z.len())
}

fn check_target(z: &[f64], target: usize) -> Result<()> {
    if z.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    if target >= z.len() {
        return Err(Error::TargetOutOfRange { target, n: z.len() });
    }
    Ok(())
}

/// Core per-token computation over precomputed log-probs.
/// `lp` must be `z - lse(z)`; `l` the lse of `z`.
fn token_loss_core(z: &[f64], lp: &[f64], l: f64, target: usize, spec: &LossSpec) -> PerTokenLoss {
    let ce = -lp[target];
    let factor = match spec.kind {
        LossKind::CrossEntropy => 1.0,
        _ if spec.gamma == 0.0 => 1.0,
        LossKind::Focal => {
            let p_t = lp[target].exp();
            if p_t < 1.0 {
                (spec.gamma * (-p_t).ln_1p()).exp()
            } else {
                0.0
            }
        }
        LossKind::MiLe => (1.0 + entropy_core(z, lp, l)).powf(spec.gamma),
    };
    PerTokenLoss {
        value: factor * ce,
        factor,
        ce_value: ce,
    }
}

fn token_loss(z: &[f64], target: usize, spec: &LossSpec) -> Result<PerTokenLoss> {
    check_target(z, target)?;
    spec.validate()?;
    let mut lp = vec![0.0; z.len()];
    let l = log_probs_into(z, &mut lp);
    Ok(token_loss_core(z, &lp, l, target, spec))
}

/// Cross-entropy `-ln p_target`.
pub fn ce_loss(z: &[f64], target: usize) -> Result<PerTokenLoss> {
    token_loss(z, target, &LossSpec::cross_entropy())
}

/// Focal loss `(1 - p_target)^gamma * ce`.
pub fn focal_loss(z: &[f64], target: usize, gamma: f64) -> Result<PerTokenLoss> {
    token_loss(
        z,
        target,
        &LossSpec::new(LossKind::Focal, gamma, FactorGrad::Differentiable)?,
    )
}

/// MiLe loss `(1 + H)^gamma * ce`.
pub fn mile_loss(z: &[f64], target: usize, gamma: f64) -> Result<PerTokenLoss> {
    token_loss(
        z,
        target,
        &LossSpec::new(LossKind::MiLe, gamma, FactorGrad::Differentiable)?,
    )
}

/// Per-token loss under an arbitrary spec.
pub fn per_token_loss(z: &[f64], target: usize, spec: &LossSpec) -> Result<PerTokenLoss> {
    token_loss(z, target, spec)
}

/// Analytic gradient of the per-token loss w.r.t. the logits.
pub fn loss_grad(z: &[f64], target: usize, spec: &LossSpec) -> Result<Vec<f64>> {
    check_target(z, target)?;
    spec.validate()?;
    let mut lp = vec![0.0; z.len()];
    let mut out = vec![0.0; z.len()];
    loss_grad_into(z, target, spec, &mut lp, &mut out);
    Ok(out)
}

/// Gradient kernel over scratch buffers; `lp` and `out` must match `z` in
/// length. Inputs are assumed validated.
fn loss_grad_into(z: &[f64], target: usize, spec: &LossSpec, lp: &mut [f64], out: &mut [f64]) {
    let l = log_probs_into(z, lp);
    let softmax_minus_onehot = |out: &mut [f64], lp: &[f64], scale: f64| {
        for (j, (o, &lpv)) in out.iter_mut().zip(lp.iter()).enumerate() {
            let delta = if j == target { 1.0 } else { 0.0 };
            *o = scale * (lpv.exp() - delta);
        }
    };
    match spec.kind {
        LossKind::CrossEntropy => softmax_minus_onehot(out, lp, 1.0),
        _ if spec.gamma == 0.0 => softmax_minus_onehot(out, lp, 1.0),
        LossKind::Focal => {
            let p_t = lp[target].exp();
            if p_t >= 1.0 {
                // Hard one-hot limit: loss plateaus at zero.
                out.fill(0.0);
                return;
            }
            let log1m = (-p_t).ln_1p();
            let factor = (spec.gamma * log1m).exp();
            softmax_minus_onehot(out, lp, factor);
            if spec.factor_grad == FactorGrad::Differentiable {
                let ce = -lp[target];
                let fprime = spec.gamma * ((spec.gamma - 1.0) * log1m).exp();
                for (j, (o, &lpv)) in out.iter_mut().zip(lp.iter()).enumerate() {
                    let delta = if j == target { 1.0 } else { 0.0 };
                    *o -= fprime * p_t * (delta - lpv.exp()) * ce;
                }
            }
        }
        LossKind::MiLe => {
            let h = entropy_core(z, lp, l);
            let factor = (1.0 + h).powf(spec.gamma);
            if spec.factor_grad == FactorGrad::Differentiable {
                let ce = -lp[target];
                let fprime = spec.gamma * (1.0 + h).powf(spec.gamma - 1.0);
                for (j, o) in out.iter_mut().enumerate() {
                    let lpv = lp[j];
                    let p = lpv.exp();
                    let delta = if j == target { 1.0 } else { 0.0 };
                    // dH/dz_j = -p_j (ln p_j + H)
                    *o = factor * (p - delta) + fprime * ce * (-p * (lpv + h));
                }
            } else {
                softmax_minus_onehot(out, lp, factor);
            }
        }
    }
}

/// Handle to a batch loss recorded on a graph, with the unscaled mean
/// cross-entropy kept for logging.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub node: NodeId,
    pub mean_ce: f64,
    pub token_count: usize,
}

struct TokenLossOp {
    targets: Vec<u32>,
    mask: Vec<bool>,
    spec: LossSpec,
    n: usize,
    count: usize,
}

impl CustomOp for TokenLossOp {
    fn label(&self) -> &'static str {
        "batch_loss"
    }

    fn backward(&self, grad_out: &[f64], input: &[f64], grad_in: &mut [f64]) {
        let w = grad_out[0] / self.count as f64;
        let mut lp = vec![0.0; self.n];
        let mut g = vec![0.0; self.n];
        for (row, (&target, &keep)) in self.targets.iter().zip(&self.mask).enumerate() {
            if !keep {
                continue;
            }
            let z = &input[row * self.n..(row + 1) * self.n];
            loss_grad_into(z, target as usize, &self.spec, &mut lp, &mut g);
            for (o, &gv) in grad_in[row * self.n..(row + 1) * self.n].iter_mut().zip(&g) {
                *o += w * gv;
            }
        }
    }
}

/// Mean per-token loss over the unmasked rows of a (rows, n) logits node.
/// The backward pass uses the analytic per-token gradients.
pub fn batch_loss(
    g: &mut Graph,
    logits: NodeId,
    targets: &[u32],
    mask: &[bool],
    spec: &LossSpec,
) -> Result<BatchLoss> {
    spec.validate()?;
    let shape = g.shape(logits).to_vec();
    let (rows, n) = match shape[..] {
        [r, c] => (r, c),
        ref s => {
            return Err(Error::ShapeMismatch {
                op: "batch_loss",
                detail: format!("expected 2-d logits, got {s:?}"),
            })
        }
    };
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "batch_loss",
            detail: format!(
                "{rows} logit rows vs {} targets, {} mask",
                targets.len(),
                mask.len()
            ),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::DegenerateBatch);
    }
    let data = g.value(logits);
    let mut lp = vec![0.0; n];
    // Kahan-compensated sums keep the mean independent of batch splits.
    let (mut sum_v, mut c_v) = (0.0f64, 0.0f64);
    let (mut sum_ce, mut c_ce) = (0.0f64, 0.0f64);
    for (row, (&target, &keep)) in targets.iter().zip(mask).enumerate() {
        if !keep {
            continue;
        }
        let z = &data[row * n..(row + 1) * n];
        check_target(z, target as usize)?;
        let l = log_probs_into(z, &mut lp);
        let tl = token_loss_core(z, &lp, l, target as usize, spec);
        kahan_add(&mut sum_v, &mut c_v, tl.value);
        kahan_add(&mut sum_ce, &mut c_ce, tl.ce_value);
    }
    let mean = sum_v / count as f64;
    let mean_ce = sum_ce / count as f64;
    let op = TokenLossOp {
        targets: targets.to_vec(),
        mask: mask.to_vec(),
        spec: *spec,
        n,
        count,
    };
    let node = g.custom_unary(logits, &[1], vec![mean], Box::new(op))?;
    Ok(BatchLoss {
        node,
        mean_ce,
        token_count: count,
    })
}

pub(crate) fn kahan_add(sum: &mut f64, comp: &mut f64, x: f64) {
    let y = x - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

/// Summary of a finite-difference check of [`loss_grad`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub trials: usize,
    pub max_rel_err: f64,
}

/// Relative-error floor for [`grad_check`]. Loss values reach O(100) at large
/// N, so central-difference noise reaches ~5e-9 per component; below this
/// magnitude the check is absolute at `floor * tol` rather than relative.
pub const GRAD_CHECK_FLOOR: f64 = 1e-2;

/// Compares [`loss_grad`] against central finite differences of the forward
/// loss on random logit vectors. In detached mode the factor is frozen at
/// the evaluation point, matching what that mode treats as constant.
pub fn grad_check(spec: &LossSpec, n: usize, trials: usize, seed: u64) -> Result<GradCheckReport> {
    use rand::Rng;
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("logits"));
    }
    let mut rng = crate::rng::stream_rng(seed, "loss-grad-check");
    let mut max_rel = 0.0f64;
    for _ in 0..trials {
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let target = rng.gen_range(0..n);
        let analytic = loss_grad(&z, target, spec)?;
        let frozen_factor = per_token_loss(&z, target, spec)?.factor;
        let mut f = |zs: &[f64]| -> f64 {
            match spec.factor_grad {
                FactorGrad::Differentiable => per_token_loss(zs, target, spec).unwrap().value,
                FactorGrad::Detached => frozen_factor * ce_loss(zs, target).unwrap().value,
            }
        };
        let numeric = crate::gradcheck::central_diff(&mut f, &z, crate::gradcheck::DEFAULT_H);
        let report = crate::gradcheck::compare_floored(&analytic, &numeric, GRAD_CHECK_FLOOR);
        max_rel = max_rel.max(report.max_rel_err);
    }
    Ok(GradCheckReport {
        trials,
        max_rel_err: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_4: f64 = 1.3862943611198906;

    fn logits_from_probs(p: &[f64]) -> Vec<f64> {
        p.iter().map(|&x| x.ln()).collect()
    }

    // ── entropy ──

    #[test]
    fn entropy_of_uniform_is_ln_n() {
        let d = ProbDist::from_logits(&[0.7; 4]).unwrap();
        assert!((entropy(&d) - LN_4).abs() < 1e-15);
        let h = entropy_from_logits(&[0.7; 4]).unwrap();
        assert!((h - LN_4).abs() < 1e-15);
    }

    #[test]
    fn entropy_of_near_one_hot_tends_to_zero() {
        let h = entropy_from_logits(&[60.0, 0.0, 0.0]).unwrap();
        assert!((0.0..1e-12).contains(&h), "h = {h}");
    }

    #[test]
    fn entropy_matches_frozen_value() {
        // H(0.7, 0.2, 0.1), high-precision reference.
        let h = entropy_from_logits(&logits_from_probs(&[0.7, 0.2, 0.1])).unwrap();
        assert!((h - 0.8018185525433373).abs() < 1e-13, "h = {h}");
    }

    #[test]
    fn entropy_is_shift_invariant() {
        let z = [0.3, -1.2, 2.0, 0.9, -0.4];
        let h0 = entropy_from_logits(&z).unwrap();
        for shift in [-50.0, -3.0, 0.5, 40.0] {
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let h1 = entropy_from_logits(&shifted).unwrap();
            assert!((h0 - h1).abs() <= 1e-10, "shift {shift}: {h0} vs {h1}");
        }
    }

    #[test]
    fn prob_dist_sums_to_one_and_exponentiates_log_probs() {
        let d = ProbDist::from_logits(&[0.1, -2.0, 3.5, 1.0]).unwrap();
        let total: f64 = d.probs.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        for (p, lp) in d.probs.iter().zip(&d.log_probs) {
            assert_eq!(p.to_bits(), lp.exp().to_bits());
        }
    }

    // ── cross-entropy ──

    #[test]
    fn ce_of_equal_logits_is_ln_n() {
        let l = ce_loss(&[0.0; 4], 2).unwrap();
        assert!((l.value - LN_4).abs() < 1e-15);
        assert_eq!(l.factor, 1.0);
    }

    #[test]
    fn ce_of_confident_correct_prediction_is_tiny_but_nonnegative() {
        let l = ce_loss(&[10.0, -10.0], 0).unwrap();
        // log1p(exp(-20)), high-precision reference.
        assert!((l.value - 2.061_153_620_314_381e-9).abs() < 1e-15);
        assert!(l.value >= 0.0);
    }

    #[test]
    fn ce_matches_frozen_value() {
        let l = ce_loss(&logits_from_probs(&[0.7, 0.2, 0.1]), 0).unwrap();
        assert!((l.value - 0.3566749439387324).abs() < 1e-15);
    }

    #[test]
    fn ce_rejects_bad_target() {
        match ce_loss(&[0.0, 0.0], 2) {
            Err(Error::TargetOutOfRange { target: 2, n: 2 }) => {}
            other => panic!("expected TargetOutOfRange, got {other:?}"),
        }
        match ce_loss(&[], 0) {
            Err(Error::EmptyInput(_)) => {}
            other => panic!("expected EmptyInput, got {other:?}"),
        }
    }

    // ── focal ──

    #[test]
    fn focal_gamma_zero_equals_ce_exactly() {
        let z = [1.3, -0.2, 0.8, -2.0];
        for t in 0..4 {
            let f = focal_loss(&z, t, 0.0).unwrap();
            let c = ce_loss(&z, t).unwrap();
            assert_eq!(f.value.to_bits(), c.value.to_bits());
            assert_eq!(f.factor, 1.0);
        }
    }

    #[test]
    fn focal_matches_frozen_value() {
        // (1 - 0.7) * (-ln 0.7), high-precision reference.
        let l = focal_loss(&logits_from_probs(&[0.7, 0.2, 0.1]), 0, 1.0).unwrap();
        assert!((l.value - 0.10700248318161971).abs() < 1e-15, "{}", l.value);
    }

    #[test]
    fn focal_at_hard_one_hot_is_zero() {
        // p_target rounds to exactly 1.0 here.
        let l = focal_loss(&[800.0, 0.0, 0.0], 0, 2.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.factor, 0.0);
    }

    #[test]
    fn focal_downweights_relative_to_ce() {
        let z = [1.0, 0.3, -0.5];
        for t in 0..3 {
            let f = focal_loss(&z, t, 2.0).unwrap();
            let c = ce_loss(&z, t).unwrap();
            assert!(f.value <= c.value);
            assert!(f.factor >= 0.0 && f.factor <= 1.0);
        }
    }

    // ── mile ──

    #[test]
    fn mile_gamma_zero_equals_ce_exactly() {
        let z = [0.4, 2.0, -1.1];
        for t in 0..3 {
            let m = mile_loss(&z, t, 0.0).unwrap();
            let c = ce_loss(&z, t).unwrap();
            assert_eq!(m.value.to_bits(), c.value.to_bits());
        }
    }

    #[test]
    fn mile_of_uniform_matches_frozen_value() {
        // (1 + ln 4) * ln 4, high-precision reference.
        let m = mile_loss(&[0.0; 4], 1, 1.0).unwrap();
        assert!((m.value - 3.3081064167926963).abs() < 1e-13, "{}", m.value);
    }

    #[test]
    fn mile_matches_frozen_value() {
        // (1 + H(0.7,0.2,0.1)) * (-ln 0.7), high-precision reference.
        let m = mile_loss(&logits_from_probs(&[0.7, 0.2, 0.1]), 0, 1.0).unwrap();
        assert!((m.value - 0.6426635312161628).abs() < 1e-13, "{}", m.value);
    }

    #[test]
    fn mile_amplifies_relative_to_ce() {
        let z = [1.0, 0.3, -0.5, 0.1];
        for t in 0..4 {
            let m = mile_loss(&z, t, 1.5).unwrap();
            let c = ce_loss(&z, t).unwrap();
            assert!(m.value >= c.value);
            assert!(m.factor >= 1.0);
        }
    }

    #[test]
    fn mile_factor_bounded_by_vocab_size() {
        let n = 16;
        let z: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = mile_loss(&z, 3, 1.0).unwrap();
        assert!(m.factor >= 1.0);
        assert!(m.factor <= 1.0 + (n as f64).ln());
    }

    #[test]
    fn higher_entropy_gives_larger_mile_at_equal_target_prob() {
        // Same p_target = 0.3; rest concentrated vs spread out.
        let concentrated = logits_from_probs(&[0.3, 0.699, 0.0005, 0.0005]);
        let spread = logits_from_probs(&[0.3, 0.2334, 0.2333, 0.2333]);
        let lo = mile_loss(&concentrated, 0, 1.0).unwrap();
        let hi = mile_loss(&spread, 0, 1.0).unwrap();
        assert!((lo.ce_value - hi.ce_value).abs() < 1e-12);
        assert!(hi.value > lo.value);
    }

    #[test]
    fn gamma_outside_range_is_rejected() {
        assert!(LossSpec::mile(10.0).is_ok());
        for bad in [-0.1, 10.1, f64::NAN, f64::INFINITY] {
            assert!(LossSpec::mile(bad).is_err(), "gamma {bad} accepted");
            assert!(LossSpec::focal(bad).is_err());
        }
    }

    // ── gradients ──

    #[test]
    fn ce_grad_of_uniform_two_class() {
        let g = loss_grad(&[0.0, 0.0], 0, &LossSpec::cross_entropy()).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-15);
        assert!((g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mile_entropy_term_vanishes_at_uniform() {
        // At the entropy maximum dH/dz = 0, so both modes agree exactly.
        let spec_d = LossSpec::new(LossKind::MiLe, 1.0, FactorGrad::Differentiable).unwrap();
        let spec_f = LossSpec::new(LossKind::MiLe, 1.0, FactorGrad::Detached).unwrap();
        let gd = loss_grad(&[0.0; 4], 1, &spec_d).unwrap();
        let gf = loss_grad(&[0.0; 4], 1, &spec_f).unwrap();
        for (a, b) in gd.iter().zip(&gf) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grads_match_finite_differences_for_all_specs() {
        let specs = [
            LossSpec::cross_entropy(),
            LossSpec::new(LossKind::Focal, 1.0, FactorGrad::Detached).unwrap(),
            LossSpec::new(LossKind::Focal, 2.0, FactorGrad::Differentiable).unwrap(),
            LossSpec::new(LossKind::MiLe, 1.0, FactorGrad::Detached).unwrap(),
            LossSpec::new(LossKind::MiLe, 1.0, FactorGrad::Differentiable).unwrap(),
            LossSpec::new(LossKind::MiLe, 5.0, FactorGrad::Differentiable).unwrap(),
        ];
        for (i, spec) in specs.iter().enumerate() {
            let report = grad_check(spec, 5, 25, 1000 + i as u64).unwrap();
            assert!(
                report.max_rel_err <= 1e-5,
                "spec {spec:?}: {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn loss_is_minimized_at_argmax_target() {
        let z = [0.2, 1.7, -0.3, 0.9];
        let argmax = 1;
        for spec in [
            LossSpec::cross_entropy(),
            LossSpec::focal(2.0).unwrap(),
            LossSpec::mile(1.0).unwrap(),
        ] {
            let vals: Vec<f64> = (0..4)
                .map(|t| per_token_loss(&z, t, &spec).unwrap().value)
                .collect();
            let best = vals
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(best, argmax, "{spec:?}: {vals:?}");
        }
    }

    // ── batch loss ──

    fn graph_with_logits(rows: usize, n: usize, data: Vec<f64>) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let t = crate::numcore::Tensor::param(&[rows, n], data);
        let id = g.input(&t).unwrap();
        (g, id)
    }

    #[test]
    fn batch_of_one_equals_per_token_loss() {
        let z = vec![0.3, -0.9, 1.4];
        let spec = LossSpec::mile(1.0).unwrap();
        let (mut g, logits) = graph_with_logits(1, 3, z.clone());
        let b = batch_loss(&mut g, logits, &[2], &[true], &spec).unwrap();
        let single = per_token_loss(&z, 2, &spec).unwrap();
        assert_eq!(g.scalar_value(b.node).to_bits(), single.value.to_bits());
        assert_eq!(b.token_count, 1);
    }

    #[test]
    fn identical_rows_average_to_the_single_row_value() {
        let row = vec![0.5, -0.2, 0.1];
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let spec = LossSpec::focal(2.0).unwrap();
        let (mut g, logits) = graph_with_logits(2, 3, data);
        let b = batch_loss(&mut g, logits, &[1, 1], &[true, true], &spec).unwrap();
        let single = per_token_loss(&row, 1, &spec).unwrap();
        assert!((g.scalar_value(b.node) - single.value).abs() < 1e-15);
    }

    #[test]
    fn masked_rows_are_excluded() {
        let data = vec![
            0.5, -0.2, 0.1, //
            9.0, -3.0, 4.0, //
        ];
        let spec = LossSpec::cross_entropy();
        let (mut g, logits) = graph_with_logits(2, 3, data.clone());
        let b = batch_loss(&mut g, logits, &[1, 0], &[true, false], &spec).unwrap();
        let single = per_token_loss(&data[..3], 1, &spec).unwrap();
        assert_eq!(g.scalar_value(b.node).to_bits(), single.value.to_bits());
        assert_eq!(b.token_count, 1);
    }

    #[test]
    fn batch_mean_matches_per_token_oracle() {
        let rows = 5;
        let n = 7;
        let data: Vec<f64> = (0..rows * n)
            .map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.3)
            .collect();
        let targets: Vec<u32> = (0..rows as u32).map(|i| i % n as u32).collect();
        let mask = vec![true; rows];
        let spec = LossSpec::mile(2.0).unwrap();
        let (mut g, logits) = graph_with_logits(rows, n, data.clone());
        let b = batch_loss(&mut g, logits, &targets, &mask, &spec).unwrap();
        let mut want = 0.0;
        for r in 0..rows {
            want += per_token_loss(&data[r * n..(r + 1) * n], targets[r] as usize, &spec)
                .unwrap()
                .value;
        }
        want /= rows as f64;
        assert!((g.scalar_value(b.node) - want).abs() < 1e-13);
    }

    #[test]
    fn all_masked_batch_is_degenerate() {
        let (mut g, logits) = graph_with_logits(2, 3, vec![0.0; 6]);
        match batch_loss(
            &mut g,
            logits,
            &[0, 1],
            &[false, false],
            &LossSpec::cross_entropy(),
        ) {
            Err(Error::DegenerateBatch) => {}
            other => panic!("expected DegenerateBatch, got {other:?}"),
        }
    }

    #[test]
    fn batch_loss_backward_matches_per_token_grads() {
        let rows = 3;
        let n = 4;
        let data: Vec<f64> = (0..rows * n).map(|i| ((i as f64) * 0.61).sin()).collect();
        let targets = [3u32, 0, 2];
        let mask = [true, false, true];
        for spec in [
            LossSpec::cross_entropy(),
            LossSpec::new(LossKind::Focal, 1.5, FactorGrad::Differentiable).unwrap(),
            LossSpec::new(LossKind::MiLe, 1.0, FactorGrad::Detached).unwrap(),
        ] {
            let (mut g, logits) = graph_with_logits(rows, n, data.clone());
            let b = batch_loss(&mut g, logits, &targets, &mask, &spec).unwrap();
            g.backward(b.node).unwrap();
            let got = g.grad(logits).unwrap();
            for r in 0..rows {
                if !mask[r] {
                    assert!(got[r * n..(r + 1) * n].iter().all(|&x| x == 0.0));
                    continue;
                }
                let want =
                    loss_grad(&data[r * n..(r + 1) * n], targets[r] as usize, &spec).unwrap();
                for (a, w) in got[r * n..(r + 1) * n].iter().zip(&want) {
                    assert!((a - w / 2.0).abs() < 1e-15, "{spec:?}");
                }
            }
        }
    }
}
