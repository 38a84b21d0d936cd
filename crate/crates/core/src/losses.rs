//! Classification losses with analytical gradients with respect to logits.
//!
//! All single-record losses depend on the logits only through the softmax,
//! and most only through `ln p_t`, the log-probability of the true class.
//! For those, `dL/dz_j = (dL/d ln p_t) * (delta_jt - p_j)`, which is how the
//! gradients below are assembled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Softmax with max-subtraction; finite for any finite input.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Log-softmax with `log1p` for the normaliser, so the log-probability of a
/// dominant class keeps full relative precision as it approaches zero.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let (arg, max) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, z)| {
                if z > best.1 {
                    (i, z)
                } else {
                    best
                }
            });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, z)| (z - max).exp())
        .sum();
    let log_total = rest.ln_1p();
    logits.iter().map(|z| z - max - log_total).collect()
}

/// Logits together with their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    logits: Vec<f64>,
    log_probs: Vec<f64>,
    probs: Vec<f64>,
}

impl PredictionVector {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let log_probs = log_softmax(&logits);
        let probs = log_probs.iter().map(|v| v.exp()).collect();
        Self {
            logits,
            log_probs,
            probs,
        }
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    /// Index of the largest logit; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    }

    /// `1 - p_t` summed from the other classes, accurate when `p_t` is near 1.
    fn complement(&self, target: usize) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != target)
            .map(|(_, p)| p)
            .sum()
    }

    /// Chain rule from `dL/d ln p_t` to the logits.
    fn grad_from_log_prob(&self, target: usize, d_log_p: f64) -> Vec<f64> {
        self.probs
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                if j == target {
                    d_log_p * self.complement(target)
                } else {
                    -d_log_p * p
                }
            })
            .collect()
    }
}

/// Index of the hot entry of a one-hot label vector.
pub fn target_from_one_hot(y: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::Spec(format!("label vector is not one-hot: {y:?}")));
        }
    }
    hot.ok_or_else(|| Error::Spec("label vector has no hot entry".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

pub fn cross_entropy(pred: &PredictionVector, target: usize) -> LossOutput {
    let grad_logits = pred
        .probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            if j == target {
                -pred.complement(target)
            } else {
                p
            }
        })
        .collect();
    LossOutput {
        value: -pred.log_probs[target],
        grad_logits,
    }
}

/// Logarithm base used inside the IWL loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Ten,
}

impl LogBase {
    fn ln_base(self) -> f64 {
        match self {
            LogBase::Natural => 1.0,
            LogBase::Ten => std::f64::consts::LN_10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IwlConfig {
    /// Temperature exponent on the weight term.
    pub beta: f64,
    pub epsilon: f64,
    pub log_base: LogBase,
    /// Treat the weight as a constant during backpropagation.
    pub stop_weight_gradient: bool,
}

impl Default for IwlConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            epsilon: 1e-12,
            log_base: LogBase::Natural,
            stop_weight_gradient: false,
        }
    }
}

impl IwlConfig {
    pub fn with_beta(beta: f64) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "iwl.beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "iwl.epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn log_weight_base(&self, p: f64) -> f64 {
        (10.0 / (p + self.epsilon)).ln() / self.log_base.ln_base()
    }

    /// `(log(10 / (p + eps)))^beta`.
    pub fn weight(&self, p: f64) -> f64 {
        self.log_weight_base(p).powf(self.beta)
    }
}

/// Inverted-weight logarithmic loss on the true-class probability `p`:
/// `(log(10 / (p + eps)))^beta * (-log p)`.
///
/// The weight grows as `p` falls, so confidently wrong (typically tail-class)
/// records dominate the update while well-classified ones keep a small but
/// nonzero weight.
pub fn iwl_loss(pred: &PredictionVector, target: usize, cfg: &IwlConfig) -> LossOutput {
    let log_p = pred.log_probs[target];
    let p = pred.probs[target];
    let ln_base = cfg.log_base.ln_base();
    let base = cfg.log_weight_base(p);
    let weight = base.powf(cfg.beta);
    let nll = -log_p / ln_base;
    let value = weight * nll;

    // d(nll)/d(ln p) = -1/ln b;  d(base)/d(ln p) = -p / ((p + eps) ln b).
    let mut d_log_p = -weight / ln_base;
    if !cfg.stop_weight_gradient && cfg.beta != 0.0 {
        let d_base = -p / ((p + cfg.epsilon) * ln_base);
        d_log_p += cfg.beta * base.powf(cfg.beta - 1.0) * d_base * nll;
    }
    LossOutput {
        value,
        grad_logits: pred.grad_from_log_prob(target, d_log_p),
    }
}

/// `-(1 - p)^gamma * ln p` on the true class.
pub fn focal_loss(pred: &PredictionVector, target: usize, gamma: f64) -> LossOutput {
    let log_p = pred.log_probs[target];
    let p = pred.probs[target];
    let q = pred.complement(target);
    let modulator = q.powf(gamma);
    let value = -modulator * log_p;
    let mut d_log_p = -modulator;
    if gamma != 0.0 && log_p != 0.0 {
        d_log_p += gamma * q.powf(gamma - 1.0) * p * log_p;
    }
    LossOutput {
        value,
        grad_logits: pred.grad_from_log_prob(target, d_log_p),
    }
}

/// Inner loss wrapped by the class-balanced reweighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InnerLoss {
    CrossEntropy,
    Focal { gamma: f64 },
}

/// Effective-number weights `(1 - beta) / (1 - beta^n_m)`, rescaled to mean 1.
pub fn class_balanced_weights(class_counts: &[usize], cb_beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&cb_beta) {
        return Err(Error::Config(format!(
            "cb.beta must lie in [0, 1), got {cb_beta}"
        )));
    }
    if class_counts.is_empty() || class_counts.contains(&0) {
        return Err(Error::Config(
            "class-balanced weights need positive class counts".into(),
        ));
    }
    let raw: Vec<f64> = class_counts
        .iter()
        .map(|&n| (1.0 - cb_beta) / (1.0 - cb_beta.powf(n as f64)))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

pub fn class_balanced_loss(
    pred: &PredictionVector,
    target: usize,
    weights: &[f64],
    inner: InnerLoss,
) -> LossOutput {
    let base = match inner {
        InnerLoss::CrossEntropy => cross_entropy(pred, target),
        InnerLoss::Focal { gamma } => focal_loss(pred, target, gamma),
    };
    let w = weights[target];
    LossOutput {
        value: w * base.value,
        grad_logits: base.grad_logits.into_iter().map(|g| w * g).collect(),
    }
}

/// Label-distribution-aware margins `C / n_m^(1/4)`, scaled so the largest is `mu`.
pub fn ldam_margins(class_counts: &[usize], mu: f64) -> Result<Vec<f64>> {
    if class_counts.is_empty() || class_counts.contains(&0) {
        return Err(Error::Config(
            "LDAM margins need positive class counts".into(),
        ));
    }
    let raw: Vec<f64> = class_counts
        .iter()
        .map(|&n| (n as f64).powf(-0.25))
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    Ok(raw.into_iter().map(|d| mu * d / max).collect())
}

/// Cross-entropy on `s * (z - margin_t * e_t)`.
pub fn ldam_loss(pred: &PredictionVector, target: usize, margins: &[f64], s: f64) -> LossOutput {
    let shifted: Vec<f64> = pred
        .logits
        .iter()
        .enumerate()
        .map(|(j, &z)| s * if j == target { z - margins[target] } else { z })
        .collect();
    let inner = cross_entropy(&PredictionVector::from_logits(shifted), target);
    LossOutput {
        value: inner.value,
        grad_logits: inner.grad_logits.into_iter().map(|g| s * g).collect(),
    }
}

/// Central differences `(L(z + h e_m) - L(z - h e_m)) / 2h`.
pub fn finite_difference_grad(loss: impl Fn(&[f64]) -> f64, logits: &[f64], h: f64) -> Vec<f64> {
    let mut z = logits.to_vec();
    (0..z.len())
        .map(|m| {
            let orig = z[m];
            z[m] = orig + h;
            let plus = loss(&z);
            z[m] = orig - h;
            let minus = loss(&z);
            z[m] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// `max |a - b|` relative to the larger of the two vectors' max-norms.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Loss selector as it appears in configuration files and CLI flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Iwl,
    Ce,
    Focal,
    Cb,
    CbFocal,
    Ldam,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Iwl,
        LossKind::Ce,
        LossKind::Focal,
        LossKind::Cb,
        LossKind::CbFocal,
        LossKind::Ldam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Iwl => "iwl",
            LossKind::Ce => "ce",
            LossKind::Focal => "focal",
            LossKind::Cb => "cb",
            LossKind::CbFocal => "cb_focal",
            LossKind::Ldam => "ldam",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss {s:?}; expected one of iwl, ce, focal, cb, cb_focal, ldam"
                ))
            })
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbParams {
    pub beta: f64,
}

impl Default for CbParams {
    fn default() -> Self {
        Self { beta: 0.999 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdamParams {
    pub mu: f64,
    pub s: f64,
}

impl Default for LdamParams {
    fn default() -> Self {
        Self { mu: 0.2, s: 20.0 }
    }
}

/// Loss choice plus the parameters of every loss family, keyed as
/// `loss`, `iwl.*`, `focal.gamma`, `cb.beta`, `ldam.mu`, `ldam.s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub loss: LossKind,
    pub iwl: IwlConfig,
    pub focal: FocalParams,
    pub cb: CbParams,
    pub ldam: LdamParams,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            loss: LossKind::Iwl,
            iwl: IwlConfig::default(),
            focal: FocalParams::default(),
            cb: CbParams::default(),
            ldam: LdamParams::default(),
        }
    }
}

impl LossSettings {
    /// Resolves the settings against training class counts. Classes absent
    /// from training are counted as one record for CB and LDAM.
    pub fn build(&self, class_counts: &[usize]) -> Result<Loss> {
        let counts: Vec<usize> = class_counts.iter().map(|&n| n.max(1)).collect();
        Ok(match self.loss {
            LossKind::Ce => Loss::CrossEntropy,
            LossKind::Iwl => {
                self.iwl.validate()?;
                Loss::Iwl(self.iwl)
            }
            LossKind::Focal => Loss::Focal {
                gamma: self.focal.gamma,
            },
            LossKind::Cb => Loss::ClassBalanced {
                weights: class_balanced_weights(&counts, self.cb.beta)?,
                inner: InnerLoss::CrossEntropy,
            },
            LossKind::CbFocal => Loss::ClassBalanced {
                weights: class_balanced_weights(&counts, self.cb.beta)?,
                inner: InnerLoss::Focal {
                    gamma: self.focal.gamma,
                },
            },
            LossKind::Ldam => Loss::Ldam {
                margins: ldam_margins(&counts, self.ldam.mu)?,
                s: self.ldam.s,
            },
        })
    }
}

/// A fully resolved loss, ready to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    CrossEntropy,
    Iwl(IwlConfig),
    Focal { gamma: f64 },
    ClassBalanced { weights: Vec<f64>, inner: InnerLoss },
    Ldam { margins: Vec<f64>, s: f64 },
}

impl Loss {
    pub fn evaluate(&self, pred: &PredictionVector, target: usize) -> LossOutput {
        match self {
            Loss::CrossEntropy => cross_entropy(pred, target),
            Loss::Iwl(cfg) => iwl_loss(pred, target, cfg),
            Loss::Focal { gamma } => focal_loss(pred, target, *gamma),
            Loss::ClassBalanced { weights, inner } => {
                class_balanced_loss(pred, target, weights, *inner)
            }
            Loss::Ldam { margins, s } => ldam_loss(pred, target, margins, *s),
        }
    }

    pub fn value(&self, logits: &[f64], target: usize) -> f64 {
        self.evaluate(&PredictionVector::from_logits(logits.to_vec()), target)
            .value
    }

    /// Mean loss over a batch; each gradient is already divided by the batch
    /// size. Summation runs in record order.
    pub fn evaluate_batch(&self, preds: &[PredictionVector], targets: &[usize]) -> BatchLoss {
        let n = preds.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(preds.len());
        for (pred, &t) in preds.iter().zip(targets) {
            let out = self.evaluate(pred, t);
            total += out.value;
            grads.push(out.grad_logits.into_iter().map(|g| g / n).collect());
        }
        BatchLoss {
            value: if preds.is_empty() { 0.0 } else { total / n },
            grad_logits: grads,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub grad_logits: Vec<Vec<f64>>,
}

/// Outcome of a randomized analytical-vs-numerical gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub loss: Loss,
    pub errors: Vec<f64>,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn failures(&self) -> usize {
        self.errors
            .iter()
            .filter(|&&e| e.is_nan() || e >= self.threshold)
            .count()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }
}

/// Compares analytical and central-difference gradients on `trials` random
/// instances with logits drawn from U(-3, 3) over `num_classes` classes.
/// CB and LDAM use the long-tail counts of a 640-per-class pool at
/// alpha = 0.01.
pub fn gradcheck(
    settings: &LossSettings,
    num_classes: usize,
    trials: usize,
    seed: u64,
    threshold: f64,
) -> Result<GradcheckReport> {
    use rand::{Rng, SeedableRng};

    if num_classes < 2 {
        return Err(Error::Config("gradcheck needs at least 2 classes".into()));
    }
    let counts = crate::imbalance::longtail_counts(&vec![640; num_classes], 0.01)?;
    let loss = settings.build(counts.target_counts())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let errors = (0..trials)
        .map(|_| {
            let z: Vec<f64> = (0..num_classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = rng.gen_range(0..num_classes);
            let exact = loss.evaluate(&PredictionVector::from_logits(z.clone()), t);
            let numeric = finite_difference_grad(|x| loss.value(x, t), &z, DEFAULT_FD_STEP);
            relative_error(&exact.grad_logits, &numeric)
        })
        .collect();
    Ok(GradcheckReport {
        loss,
        errors,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(logits: &[f64]) -> PredictionVector {
        PredictionVector::from_logits(logits.to_vec())
    }

    /// Logits whose softmax puts probability `p` on class 0 of `m` classes.
    fn logits_for_p(p: f64, m: usize) -> Vec<f64> {
        let mut z = vec![0.0; m];
        z[0] = (p * (m - 1) as f64 / (1.0 - p)).ln();
        z
    }

    #[test]
    fn softmax_cases() {
        for v in softmax(&[0.0, 0.0, 0.0]) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax(&[1000.0, 0.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-15 && big[1] < 1e-300);
        let s = softmax(&[1.0, 2.0]);
        assert!((s[0] - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((s[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn one_hot_parsing() {
        assert_eq!(target_from_one_hot(&[0.0, 1.0, 0.0]).unwrap(), 1);
        assert!(target_from_one_hot(&[0.0, 0.0]).is_err());
        assert!(target_from_one_hot(&[1.0, 1.0]).is_err());
        assert!(target_from_one_hot(&[0.5, 0.5]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let perfect = cross_entropy(&pred(&[1000.0, 0.0, 0.0]), 0);
        assert_eq!(perfect.value, 0.0);
        assert!(perfect.grad_logits.iter().all(|g| g.abs() < 1e-300));
        let uniform = cross_entropy(&pred(&[0.0; 9]), 4);
        assert!((uniform.value - 9f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn iwl_zero_at_certainty() {
        for beta in [0.0, 0.3, 1.0, 5.0] {
            let out = iwl_loss(&pred(&[800.0, 0.0]), 0, &IwlConfig::with_beta(beta));
            assert_eq!(out.value, 0.0);
        }
    }

    #[test]
    fn iwl_beta_zero_is_cross_entropy() {
        let p = pred(&[0.3, -1.2, 2.5, 0.0]);
        let iwl = iwl_loss(&p, 1, &IwlConfig::with_beta(0.0));
        let ce = cross_entropy(&p, 1);
        assert_eq!(iwl.value, ce.value);
        assert_eq!(iwl.grad_logits, ce.grad_logits);
    }

    #[test]
    fn iwl_beta_one_at_p_tenth() {
        // ln(10 / (0.1 + 1e-12)) * ln(10), evaluated at 50 digits.
        let cfg = IwlConfig {
            beta: 1.0,
            epsilon: 1e-12,
            ..IwlConfig::default()
        };
        let out = iwl_loss(&pred(&logits_for_p(0.1, 2)), 0, &cfg);
        assert!(
            (out.value - 10.603_796_220_933_77).abs() < 1e-9,
            "{}",
            out.value
        );
        assert!((out.value - 100f64.ln() * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn iwl_orders_low_and_high_confidence() {
        let cfg = IwlConfig::with_beta(0.3);
        let lo = iwl_loss(&pred(&logits_for_p(0.1, 3)), 0, &cfg).value;
        let hi = iwl_loss(&pred(&logits_for_p(0.9, 3)), 0, &cfg).value;
        assert!(lo > hi);
        assert!(cfg.weight(0.1) > cfg.weight(0.9));
    }

    #[test]
    fn base_ten_weight_is_one_at_certainty() {
        let cfg = IwlConfig {
            log_base: LogBase::Ten,
            ..IwlConfig::with_beta(2.0)
        };
        assert!((cfg.weight(1.0) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn focal_cases() {
        let p = pred(&[0.4, -0.3, 1.1]);
        let f0 = focal_loss(&p, 2, 0.0);
        let ce = cross_entropy(&p, 2);
        assert_eq!(f0.value, ce.value);
        for (a, b) in f0.grad_logits.iter().zip(&ce.grad_logits) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(focal_loss(&pred(&[900.0, 0.0]), 0, 2.0).value, 0.0);
    }

    #[test]
    fn cb_degenerate_weights() {
        assert_eq!(
            class_balanced_weights(&[100, 10, 3], 0.0).unwrap(),
            vec![1.0; 3]
        );
        for w in class_balanced_weights(&[40, 40], 0.999).unwrap() {
            assert!((w - 1.0).abs() < 1e-15);
        }
        let p = pred(&[0.2, 0.9]);
        let w = class_balanced_weights(&[7, 7], 0.9).unwrap();
        let cb = class_balanced_loss(&p, 1, &w, InnerLoss::CrossEntropy);
        assert!((cb.value - cross_entropy(&p, 1).value).abs() < 1e-15);
        assert!(class_balanced_weights(&[3, 0], 0.9).is_err());
        assert!(class_balanced_weights(&[3, 1], 1.0).is_err());
    }

    #[test]
    fn cb_tail_weight_dominates() {
        // Effective numbers: (1 - 0.999^100) / 0.001 = 95.2079...
        // and (1 - 0.999^10) / 0.001 = 9.9551...; weights are reciprocals.
        let w = class_balanced_weights(&[100, 10], 0.999).unwrap();
        assert!(w[1] > w[0]);
        let ratio = (1.0 - 0.999f64.powi(100)) / (1.0 - 0.999f64.powi(10));
        assert!((w[1] / w[0] - ratio).abs() < 1e-12);
        assert!((w[1] / w[0] - 9.563_707_408).abs() < 1e-8);
    }

    #[test]
    fn ldam_cases() {
        let p = pred(&[0.5, -0.25, 1.0]);
        let zero = ldam_loss(&p, 1, &ldam_margins(&[50, 10, 5], 0.0).unwrap(), 20.0);
        let scaled = cross_entropy(&pred(&[10.0, -5.0, 20.0]), 1);
        assert!((zero.value - scaled.value).abs() < 1e-12);
        let equal = ldam_margins(&[30, 30, 30], 0.2).unwrap();
        assert!(equal.iter().all(|&d| (d - 0.2).abs() < 1e-15));
        let skewed = ldam_margins(&[625, 16, 1], 0.2).unwrap();
        assert!((skewed[2] - 0.2).abs() < 1e-15);
        assert!((skewed[1] - 0.1).abs() < 1e-15);
        assert!((skewed[0] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_closed_form() {
        let g = finite_difference_grad(
            |z| Loss::CrossEntropy.value(z, 0),
            &[0.0, 0.0, 0.0],
            DEFAULT_FD_STEP,
        );
        let expected = [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let z = [0.3, -0.7, 1.1, 0.05];
        let loss = Loss::Iwl(IwlConfig::with_beta(1.0));
        let exact = loss.evaluate(&pred(&z), 2).grad_logits;
        let err = |h| relative_error(&finite_difference_grad(|x| loss.value(x, 2), &z, h), &exact);
        let (coarse, fine) = (err(1e-2), err(1e-3));
        // Halving the exponent of h should cut the error by about 100x.
        assert!(
            coarse / fine > 50.0 && coarse / fine < 200.0,
            "{coarse} {fine}"
        );
        assert!(err(1e-6) < 1e-8);
    }

    fn all_losses() -> Vec<Loss> {
        let counts = [120, 40, 9, 3];
        let settings = |loss| LossSettings {
            loss,
            ..LossSettings::default()
        };
        let mut out: Vec<Loss> = LossKind::ALL
            .into_iter()
            .map(|k| settings(k).build(&counts).unwrap())
            .collect();
        out.push(Loss::Iwl(IwlConfig::with_beta(3.0)));
        out.push(Loss::Iwl(IwlConfig {
            log_base: LogBase::Ten,
            ..IwlConfig::with_beta(1.0)
        }));
        out
    }

    #[test]
    fn analytical_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for loss in all_losses() {
            for _ in 0..100 {
                let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let t = rng.gen_range(0..4);
                let exact = loss.evaluate(&pred(&z), t).grad_logits;
                let numeric = finite_difference_grad(|x| loss.value(x, t), &z, DEFAULT_FD_STEP);
                let err = relative_error(&exact, &numeric);
                assert!(
                    err < 1e-5,
                    "{loss:?}: {err} z={z:?} t={t} {exact:?} {numeric:?}"
                );
            }
        }
    }

    #[test]
    fn stop_gradient_drops_weight_derivative() {
        let z = [0.1, 0.4, -0.2];
        let full = iwl_loss(&pred(&z), 0, &IwlConfig::default());
        let stopped = iwl_loss(
            &pred(&z),
            0,
            &IwlConfig {
                stop_weight_gradient: true,
                ..IwlConfig::default()
            },
        );
        assert_eq!(full.value, stopped.value);
        let w = IwlConfig::default().weight(pred(&z).probs()[0]);
        let ce = cross_entropy(&pred(&z), 0).grad_logits;
        for (s, c) in stopped.grad_logits.iter().zip(&ce) {
            assert!((s - w * c).abs() < 1e-15);
        }
        assert!(full.grad_logits[0].abs() > stopped.grad_logits[0].abs());
    }

    #[test]
    fn batch_is_mean_of_records() {
        let preds = vec![pred(&[0.1, 0.2]), pred(&[2.0, -1.0]), pred(&[0.0, 0.5])];
        let targets = [0, 1, 1];
        let loss = Loss::Iwl(IwlConfig::default());
        let batch = loss.evaluate_batch(&preds, &targets);
        let singles: Vec<_> = preds
            .iter()
            .zip(targets)
            .map(|(p, t)| loss.evaluate(p, t))
            .collect();
        let mean = singles.iter().map(|o| o.value).sum::<f64>() / 3.0;
        assert!((batch.value - mean).abs() < 1e-15);
        for (g, s) in batch.grad_logits.iter().zip(&singles) {
            for (a, b) in g.iter().zip(&s.grad_logits) {
                assert!((a - b / 3.0).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("mse".parse::<LossKind>().is_err());
    }

    #[test]
    fn settings_from_dotted_keys() {
        let s: LossSettings = toml::from_str(
            "loss = \"ldam\"\niwl.beta = 1.5\nfocal.gamma = 1.0\ncb.beta = 0.99\nldam.mu = 0.5\nldam.s = 10.0\n",
        )
        .unwrap();
        assert_eq!(s.loss, LossKind::Ldam);
        assert_eq!(s.iwl.beta, 1.5);
        assert_eq!(s.iwl.epsilon, 1e-12);
        assert_eq!((s.ldam.mu, s.ldam.s), (0.5, 10.0));
        assert!(toml::from_str::<LossSettings>("iwl.temperature = 2.0").is_err());
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_zero_only_at_certainty(
            z in prop::collection::vec(-20.0f64..20.0, 2..8),
            t_seed in any::<usize>(),
        ) {
            let t = t_seed % z.len();
            let p = pred(&z);
            for out in [
                cross_entropy(&p, t),
                iwl_loss(&p, t, &IwlConfig::default()),
                focal_loss(&p, t, 2.0),
            ] {
                prop_assert!(out.value >= 0.0);
                prop_assert!(out.value.is_finite());
                prop_assert!(out.grad_logits.iter().all(|g| g.is_finite()));
                if p.probs()[t] < 1.0 {
                    prop_assert!(out.value > 0.0);
                }
            }
        }

        #[test]
        fn softmax_sums_to_one(z in prop::collection::vec(-700.0f64..700.0, 1..12)) {
            let s: f64 = softmax(&z).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
