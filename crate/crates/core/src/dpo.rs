//! Step-wise DPO objective on log-probabilities, plus a tabular softmax
//! policy and full-batch trainer used to exercise it without a real model.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::sha256_hex;

#[derive(Debug, Error, PartialEq)]
pub enum DpoError {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("unknown context {context} or action {action}")]
    UnknownContextOrAction { context: usize, action: usize },
    #[error("loss increased for {0} consecutive epochs")]
    DivergenceDetected(usize),
}

/// Policy and reference log-probabilities of the preferred and
/// dispreferred action of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogProbs {
    pub lp_pre_policy: f64,
    pub lp_pre_ref: f64,
    pub lp_dis_policy: f64,
    pub lp_dis_ref: f64,
}

impl PairLogProbs {
    pub fn new(lp_pre_policy: f64, lp_pre_ref: f64, lp_dis_policy: f64, lp_dis_ref: f64) -> Self {
        PairLogProbs {
            lp_pre_policy,
            lp_pre_ref,
            lp_dis_policy,
            lp_dis_ref,
        }
    }

    fn values(&self) -> [f64; 4] {
        [self.lp_pre_policy, self.lp_pre_ref, self.lp_dis_policy, self.lp_dis_ref]
    }

    pub fn check(&self) -> Result<(), DpoError> {
        let v = self.values();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DpoError::NonFiniteInput);
        }
        if v.iter().any(|&x| x > 0.0) {
            return Err(DpoError::InvalidInput("log-probabilities must be <= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            learning_rate: 0.5,
            epochs: 200,
        }
    }
}

impl DpoConfig {
    pub fn check(&self) -> Result<(), DpoError> {
        if !self.beta.is_finite() || !self.learning_rate.is_finite() {
            return Err(DpoError::NonFiniteInput);
        }
        if self.beta <= 0.0 || self.learning_rate <= 0.0 {
            return Err(DpoError::InvalidInput("beta and learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<(), DpoError> {
    if !beta.is_finite() {
        return Err(DpoError::NonFiniteInput);
    }
    if beta < 0.0 {
        return Err(DpoError::InvalidInput("beta must be >= 0".into()));
    }
    Ok(())
}

pub fn pair_margin(lp: &PairLogProbs, beta: f64) -> Result<f64, DpoError> {
    lp.check()?;
    check_beta(beta)?;
    Ok(beta * ((lp.lp_pre_policy - lp.lp_pre_ref) - (lp.lp_dis_policy - lp.lp_dis_ref)))
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and derivative for a given margin: (softplus(-m), σ(m) - 1).
pub fn loss_from_margin(margin: f64) -> (f64, f64) {
    (softplus(-margin), -sigmoid(-margin))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_wrt_margin: f64,
}

pub fn pair_loss(lp: &PairLogProbs, beta: f64) -> Result<PairLoss, DpoError> {
    let (loss, grad_wrt_margin) = loss_from_margin(pair_margin(lp, beta)?);
    Ok(PairLoss { loss, grad_wrt_margin })
}

/// Mean pair loss, summed in input order.
pub fn batch_loss(pairs: &[PairLogProbs], beta: f64) -> Result<f64, DpoError> {
    if pairs.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += pair_loss(p, beta)?.loss;
    }
    Ok(sum / pairs.len() as f64)
}

/// Softmax policy over a context × action logit table (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub contexts: usize,
    pub actions: usize,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyPair {
    pub context: usize,
    pub preferred: usize,
    pub dispreferred: usize,
}

impl ToyPolicy {
    pub fn uniform(contexts: usize, actions: usize) -> ToyPolicy {
        ToyPolicy {
            contexts,
            actions,
            logits: vec![0.0; contexts * actions],
        }
    }

    pub fn from_logits(contexts: usize, actions: usize, logits: Vec<f64>) -> Result<ToyPolicy, DpoError> {
        if logits.len() != contexts * actions {
            return Err(DpoError::InvalidInput(format!(
                "expected {} logits, got {}",
                contexts * actions,
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(DpoError::NonFiniteInput);
        }
        Ok(ToyPolicy {
            contexts,
            actions,
            logits,
        })
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.logits[context * self.actions..(context + 1) * self.actions]
    }

    fn check(&self, context: usize, action: usize) -> Result<(), DpoError> {
        if context >= self.contexts || action >= self.actions {
            return Err(DpoError::UnknownContextOrAction { context, action });
        }
        Ok(())
    }

    fn log_normalizer(&self, context: usize) -> f64 {
        let row = self.row(context);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    }

    pub fn probs(&self, context: usize) -> Vec<f64> {
        let z = self.log_normalizer(context);
        self.row(context).iter().map(|x| (x - z).exp()).collect()
    }

    /// Highest-probability action; ties resolve to the lowest index.
    pub fn argmax(&self, context: usize) -> usize {
        let row = self.row(context);
        (0..self.actions).fold(0, |best, a| if row[a] > row[best] { a } else { best })
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.logits.len() != self.contexts * self.actions {
            v.push("logit table has the wrong size".into());
            return v;
        }
        for c in 0..self.contexts {
            let s: f64 = self.probs(c).iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                v.push(format!("context {c} probabilities sum to {s}"));
            }
        }
        v
    }
}

pub fn toy_logprob(policy: &ToyPolicy, context: usize, action: usize) -> Result<f64, DpoError> {
    policy.check(context, action)?;
    Ok(policy.row(context)[action] - policy.log_normalizer(context))
}

fn toy_pair_logprobs(policy: &ToyPolicy, reference: &ToyPolicy, p: &ToyPair) -> Result<PairLogProbs, DpoError> {
    Ok(PairLogProbs::new(
        toy_logprob(policy, p.context, p.preferred)?,
        toy_logprob(reference, p.context, p.preferred)?,
        toy_logprob(policy, p.context, p.dispreferred)?,
        toy_logprob(reference, p.context, p.dispreferred)?,
    ))
}

fn check_shapes(policy: &ToyPolicy, reference: &ToyPolicy) -> Result<(), DpoError> {
    if policy.contexts != reference.contexts || policy.actions != reference.actions {
        return Err(DpoError::InvalidInput("policy and reference shapes differ".into()));
    }
    Ok(())
}

pub fn toy_loss(policy: &ToyPolicy, reference: &ToyPolicy, pairs: &[ToyPair], beta: f64) -> Result<f64, DpoError> {
    check_shapes(policy, reference)?;
    let lps = pairs
        .iter()
        .map(|p| toy_pair_logprobs(policy, reference, p))
        .collect::<Result<Vec<_>, _>>()?;
    batch_loss(&lps, beta)
}

/// Gradient of [`toy_loss`] with respect to every policy logit.
///
/// The log-normalizer of a context appears in both log-probabilities of a
/// pair and cancels, so d margin / d logit[c][k] = β(1[k=pre] − 1[k=dis]).
pub fn toy_grad(policy: &ToyPolicy, reference: &ToyPolicy, pairs: &[ToyPair], beta: f64) -> Result<Vec<f64>, DpoError> {
    check_shapes(policy, reference)?;
    if pairs.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let mut grad = vec![0.0; policy.logits.len()];
    let scale = 1.0 / pairs.len() as f64;
    for p in pairs {
        let lp = toy_pair_logprobs(policy, reference, p)?;
        let dm = pair_loss(&lp, beta)?.grad_wrt_margin * beta * scale;
        let base = p.context * policy.actions;
        grad[base + p.preferred] += dm;
        grad[base + p.dispreferred] -= dm;
    }
    Ok(grad)
}

/// Central finite-difference gradient of [`toy_loss`] with step `h`.
pub fn toy_grad_fd(policy: &ToyPolicy, reference: &ToyPolicy, pairs: &[ToyPair], beta: f64, h: f64) -> Result<Vec<f64>, DpoError> {
    let mut probe = policy.clone();
    let mut grad = Vec::with_capacity(policy.logits.len());
    for i in 0..policy.logits.len() {
        let w = policy.logits[i];
        probe.logits[i] = w + h;
        let up = toy_loss(&probe, reference, pairs, beta)?;
        probe.logits[i] = w - h;
        let down = toy_loss(&probe, reference, pairs, beta)?;
        probe.logits[i] = w;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error of a gradient vector in the max norm:
/// ‖a − n‖∞ / max(‖a‖∞, ‖n‖∞), or 0 when both are zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    /// Loss at the start of each epoch.
    pub trace: Vec<f64>,
}

/// Consecutive loss increases tolerated before giving up.
pub const DIVERGENCE_PATIENCE: usize = 10;

/// Tracks consecutive loss increases.
#[derive(Debug, Default)]
pub struct DivergenceMonitor {
    last: Option<f64>,
    rising: usize,
}

impl DivergenceMonitor {
    pub fn observe(&mut self, loss: f64) -> Result<(), DpoError> {
        if !loss.is_finite() {
            return Err(DpoError::NonFiniteInput);
        }
        if let Some(prev) = self.last {
            self.rising = if loss > prev { self.rising + 1 } else { 0 };
        }
        self.last = Some(loss);
        if self.rising >= DIVERGENCE_PATIENCE {
            return Err(DpoError::DivergenceDetected(self.rising));
        }
        Ok(())
    }
}

/// Full-batch gradient descent with the initial policy as reference.
pub fn toy_train(initial: &ToyPolicy, pairs: &[ToyPair], cfg: &DpoConfig) -> Result<TrainOutcome, DpoError> {
    cfg.check()?;
    let reference = initial.clone();
    let mut policy = initial.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut monitor = DivergenceMonitor::default();
    for _ in 0..cfg.epochs {
        let loss = toy_loss(&policy, &reference, pairs, cfg.beta)?;
        monitor.observe(loss)?;
        trace.push(loss);
        let grad = toy_grad(&policy, &reference, pairs, cfg.beta)?;
        for (w, g) in policy.logits.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * g;
        }
    }
    Ok(TrainOutcome { policy, trace })
}

/// One pair per (context, non-planted action), planted action preferred.
pub fn planted_pairs(planted: &[usize], actions: usize) -> Vec<ToyPair> {
    planted
        .iter()
        .enumerate()
        .flat_map(|(c, &best)| {
            (0..actions).filter(move |&a| a != best).map(move |a| ToyPair {
                context: c,
                preferred: best,
                dispreferred: a,
            })
        })
        .collect()
}

/// Fraction of contexts whose argmax equals the planted action.
pub fn planted_accuracy(policy: &ToyPolicy, planted: &[usize]) -> f64 {
    if planted.is_empty() {
        return 0.0;
    }
    let hits = planted
        .iter()
        .enumerate()
        .filter(|(c, &a)| policy.argmax(*c) == a)
        .count();
    hits as f64 / planted.len() as f64
}

#[derive(Debug, Deserialize)]
struct ExportRecord {
    prompt: String,
    chosen: String,
    rejected: String,
}

fn bucket(text: &str, modulus: usize) -> usize {
    let h = sha256_hex(text.as_bytes());
    (u64::from_str_radix(&h[..16], 16).unwrap_or(0) % modulus as u64) as usize
}

/// Maps exported `{prompt, chosen, rejected}` records onto toy indices by
/// hashing. Records whose two sides land in the same action bucket are
/// skipped.
pub fn toy_pairs_from_export(ndjson: &str, contexts: usize, actions: usize) -> Result<Vec<ToyPair>, DpoError> {
    if contexts == 0 || actions < 2 {
        return Err(DpoError::InvalidInput("need >= 1 context and >= 2 actions".into()));
    }
    let records: Vec<ExportRecord> =
        crate::canonical::from_ndjson(ndjson).map_err(|e| DpoError::InvalidInput(e.to_string()))?;
    Ok(records
        .iter()
        .map(|r| ToyPair {
            context: bucket(&r.prompt, contexts),
            preferred: bucket(&r.chosen, actions),
            dispreferred: bucket(&r.rejected, actions),
        })
        .filter(|p| p.preferred != p.dispreferred)
        .collect())
}

pub fn write_trace_csv<W: Write>(trace: &[f64], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}
