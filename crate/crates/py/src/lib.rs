//! Python bindings for the DPO objective, the toy policy, pair building and
//! dataset diagnostics. Structured inputs cross the boundary as JSON text.

use std::collections::HashMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use stepwise_core::dpo::{self, DpoConfig, PairLogProbs, ToyPair};
use stepwise_core::stats::{self, ToolHistogram};
use stepwise_core::{canonical, explorer, store, PreferencePair, ToolRegistrySpec, Trajectory};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn toy_pairs(pairs: Vec<(usize, usize, usize)>) -> Vec<ToyPair> {
    pairs
        .into_iter()
        .map(|(context, preferred, dispreferred)| ToyPair {
            context,
            preferred,
            dispreferred,
        })
        .collect()
}

fn registry(json: &str) -> PyResult<ToolRegistrySpec> {
    serde_json::from_str(json).map_err(value_err)
}

/// β-scaled log-ratio margin of one pair.
#[pyfunction]
fn pair_margin(lp_pre_policy: f64, lp_pre_ref: f64, lp_dis_policy: f64, lp_dis_ref: f64, beta: f64) -> PyResult<f64> {
    dpo::pair_margin(&PairLogProbs::new(lp_pre_policy, lp_pre_ref, lp_dis_policy, lp_dis_ref), beta).map_err(value_err)
}

/// Returns `(loss, d loss / d margin)`.
#[pyfunction]
fn pair_loss(lp_pre_policy: f64, lp_pre_ref: f64, lp_dis_policy: f64, lp_dis_ref: f64, beta: f64) -> PyResult<(f64, f64)> {
    let l = dpo::pair_loss(&PairLogProbs::new(lp_pre_policy, lp_pre_ref, lp_dis_policy, lp_dis_ref), beta)
        .map_err(value_err)?;
    Ok((l.loss, l.grad_wrt_margin))
}

/// Mean loss over `(pre_policy, pre_ref, dis_policy, dis_ref)` tuples.
#[pyfunction]
fn batch_loss(pairs: Vec<(f64, f64, f64, f64)>, beta: f64) -> PyResult<f64> {
    let lps: Vec<PairLogProbs> = pairs.into_iter().map(|(a, b, c, d)| PairLogProbs::new(a, b, c, d)).collect();
    dpo::batch_loss(&lps, beta).map_err(value_err)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    stats::tokenize(text)
}

#[pyfunction]
fn bleu_n(candidate: Vec<String>, reference: Vec<String>, n: usize) -> f64 {
    stats::bleu_n(&candidate, &reference, n)
}

/// Total-variation distance between two tool-count maps, in percent.
#[pyfunction]
fn distribution_diff(a: HashMap<String, u64>, b: HashMap<String, u64>) -> PyResult<f64> {
    let hist = |m: &HashMap<String, u64>| ToolHistogram::from_counts(m.iter().map(|(k, v)| (k.as_str(), *v)));
    stats::distribution_diff(&hist(&a), &hist(&b)).map_err(value_err)
}

#[pyfunction]
fn extract_tools(code: &str, registry_json: &str) -> PyResult<Vec<String>> {
    Ok(stats::extract_tools(code, &registry(registry_json)?))
}

/// Splits a controller reply into `(thought, code)`.
#[pyfunction]
fn parse_action(reply: &str) -> PyResult<(String, String)> {
    let a = explorer::parse_action(reply).map_err(PyValueError::new_err)?;
    Ok((a.thought, a.code))
}

/// Preference pairs of a trajectory, one JSON document per pair.
#[pyfunction]
fn build_pairs(trajectory_json: &str) -> PyResult<Vec<String>> {
    let t: Trajectory = serde_json::from_str(trajectory_json).map_err(value_err)?;
    store::build_pairs(&t)
        .iter()
        .map(|p| canonical::to_canonical_string(p).map_err(value_err))
        .collect()
}

/// Diagnostics of NDJSON pairs as a JSON document.
#[pyfunction]
fn diagnostics(pairs_ndjson: &str, registry_json: &str) -> PyResult<String> {
    let pairs: Vec<PreferencePair> = canonical::from_ndjson(pairs_ndjson).map_err(value_err)?;
    let report = stats::report(&pairs, &registry(registry_json)?).map_err(value_err)?;
    canonical::to_canonical_string(&report).map_err(value_err)
}

/// Tabular softmax policy over `contexts × actions`.
#[pyclass(name = "ToyPolicy", from_py_object)]
#[derive(Clone)]
struct PyToyPolicy {
    inner: dpo::ToyPolicy,
}

#[pymethods]
impl PyToyPolicy {
    #[new]
    #[pyo3(signature = (contexts, actions, logits=None))]
    fn new(contexts: usize, actions: usize, logits: Option<Vec<f64>>) -> PyResult<Self> {
        let inner = match logits {
            Some(l) => dpo::ToyPolicy::from_logits(contexts, actions, l).map_err(value_err)?,
            None => dpo::ToyPolicy::uniform(contexts, actions),
        };
        Ok(PyToyPolicy { inner })
    }

    #[getter]
    fn contexts(&self) -> usize {
        self.inner.contexts
    }

    #[getter]
    fn actions(&self) -> usize {
        self.inner.actions
    }

    #[getter]
    fn logits(&self) -> Vec<f64> {
        self.inner.logits.clone()
    }

    fn probs(&self, context: usize) -> PyResult<Vec<f64>> {
        self.check_context(context)?;
        Ok(self.inner.probs(context))
    }

    fn argmax(&self, context: usize) -> PyResult<usize> {
        self.check_context(context)?;
        Ok(self.inner.argmax(context))
    }

    /// Mean DPO loss against `reference` on `(context, preferred, dispreferred)` triples.
    fn loss(&self, reference: &PyToyPolicy, pairs: Vec<(usize, usize, usize)>, beta: f64) -> PyResult<f64> {
        dpo::toy_loss(&self.inner, &reference.inner, &toy_pairs(pairs), beta).map_err(value_err)
    }

    fn grad(&self, reference: &PyToyPolicy, pairs: Vec<(usize, usize, usize)>, beta: f64) -> PyResult<Vec<f64>> {
        dpo::toy_grad(&self.inner, &reference.inner, &toy_pairs(pairs), beta).map_err(value_err)
    }

    /// Full-batch training with this policy as reference. Returns the
    /// trained policy and the per-epoch loss trace.
    #[pyo3(signature = (pairs, beta=0.1, learning_rate=0.5, epochs=200))]
    fn train(
        &self,
        pairs: Vec<(usize, usize, usize)>,
        beta: f64,
        learning_rate: f64,
        epochs: usize,
    ) -> PyResult<(PyToyPolicy, Vec<f64>)> {
        let cfg = DpoConfig {
            beta,
            learning_rate,
            epochs,
        };
        let out = dpo::toy_train(&self.inner, &toy_pairs(pairs), &cfg).map_err(value_err)?;
        Ok((PyToyPolicy { inner: out.policy }, out.trace))
    }

    fn __repr__(&self) -> String {
        format!("ToyPolicy(contexts={}, actions={})", self.inner.contexts, self.inner.actions)
    }
}

impl PyToyPolicy {
    fn check_context(&self, context: usize) -> PyResult<()> {
        if context >= self.inner.contexts {
            return Err(value_err(format!("context {context} out of range")));
        }
        Ok(())
    }
}

#[pymodule]
fn stepwise_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyToyPolicy>()?;
    m.add_function(wrap_pyfunction!(pair_margin, m)?)?;
    m.add_function(wrap_pyfunction!(pair_loss, m)?)?;
    m.add_function(wrap_pyfunction!(batch_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(bleu_n, m)?)?;
    m.add_function(wrap_pyfunction!(distribution_diff, m)?)?;
    m.add_function(wrap_pyfunction!(extract_tools, m)?)?;
    m.add_function(wrap_pyfunction!(parse_action, m)?)?;
    m.add_function(wrap_pyfunction!(build_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(diagnostics, m)?)?;
    Ok(())
}
