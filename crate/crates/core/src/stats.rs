//! Dataset diagnostics: tool-usage histograms and their divergence, code
//! error rates of chosen vs rejected steps, and BLEU-1..4 between the two
//! sides of each pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, ObsStatus, PreferencePair, ToolRegistrySpec, Validate};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty histogram")]
    EmptyHistogram,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolHistogram {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl ToolHistogram {
    pub fn add(&mut self, tool: &str) {
        *self.counts.entry(tool.to_string()).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn from_counts<'a>(items: impl IntoIterator<Item = (&'a str, u64)>) -> ToolHistogram {
        let mut h = ToolHistogram::default();
        for (t, c) in items {
            *h.counts.entry(t.to_string()).or_insert(0) += c;
            h.total += c;
        }
        h
    }
}

impl Validate for ToolHistogram {
    fn violations(&self) -> Vec<String> {
        let sum: u64 = self.counts.values().sum();
        if sum == self.total {
            Vec::new()
        } else {
            vec![format!("histogram total {} differs from count sum {sum}", self.total)]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub pair_count: usize,
    pub chosen_hist: ToolHistogram,
    pub rejected_hist: ToolHistogram,
    pub distribution_diff_pct: f64,
    pub chosen_error_rate: f64,
    pub rejected_error_rate: f64,
    /// BLEU-n for n in 1..=4.
    pub bleu: BTreeMap<u32, f64>,
}

impl Validate for DiagnosticsReport {
    fn violations(&self) -> Vec<String> {
        let mut v = self.chosen_hist.violations();
        v.extend(self.rejected_hist.violations());
        if !(0.0..=100.0).contains(&self.distribution_diff_pct) {
            v.push("distribution_diff_pct outside [0, 100]".into());
        }
        for r in [self.chosen_error_rate, self.rejected_error_rate] {
            if !(0.0..=1.0).contains(&r) {
                v.push("error rate outside [0, 1]".into());
            }
        }
        if self.bleu.keys().copied().collect::<Vec<_>>() != [1, 2, 3, 4] {
            v.push("bleu keys must be exactly 1..4".into());
        }
        if self.bleu.values().any(|b| !(0.0..=1.0).contains(b)) {
            v.push("bleu value outside [0, 1]".into());
        }
        v
    }
}

/// Registry tools called in `code`, in source order with multiplicity.
pub fn extract_tools(code: &str, registry: &ToolRegistrySpec) -> Vec<String> {
    call_names(code)
        .into_iter()
        .filter(|n| registry.contains(n))
        .collect()
}

/// Names of all plain function calls in `code`, in source order.
///
/// A call site is an identifier directly followed (after optional
/// whitespace) by `(`, outside string literals and comments, and not an
/// attribute access.
pub fn call_names(code: &str) -> Vec<String> {
    let chars: Vec<char> = code.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let mut prev_significant: Option<char> = None;
    while i < chars.len() {
        let c = chars[i];
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '"' || c == '\'' {
            i = skip_string(&chars, i);
            prev_significant = Some(c);
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            // string prefixes such as f"..." or rb'...'
            if i < chars.len() && (chars[i] == '"' || chars[i] == '\'') && i - start <= 2 {
                let prefix: String = chars[start..i].iter().collect::<String>().to_lowercase();
                if prefix.chars().all(|p| "rbuf".contains(p)) {
                    i = skip_string(&chars, i);
                    prev_significant = Some('"');
                    continue;
                }
            }
            let ident: String = chars[start..i].iter().collect();
            let mut j = i;
            while j < chars.len() && (chars[j] == ' ' || chars[j] == '\t') {
                j += 1;
            }
            let is_call = j < chars.len() && chars[j] == '(';
            if is_call && prev_significant != Some('.') {
                out.push(ident);
            }
            prev_significant = Some('a');
            continue;
        }
        if !c.is_whitespace() {
            prev_significant = Some(c);
        }
        i += 1;
    }
    out
}

/// Index just past the string literal starting at `start`.
fn skip_string(chars: &[char], start: usize) -> usize {
    let q = chars[start];
    let triple = chars.len() >= start + 3 && chars[start + 1] == q && chars[start + 2] == q;
    let mut i = start + if triple { 3 } else { 1 };
    while i < chars.len() {
        match chars[i] {
            '\\' => i += 2,
            c if c == q => {
                if !triple {
                    return i + 1;
                }
                if i + 2 < chars.len() && chars[i + 1] == q && chars[i + 2] == q {
                    return i + 3;
                }
                i += 1;
            }
            '\n' if !triple => return i + 1,
            _ => i += 1,
        }
    }
    chars.len()
}

/// Total-variation distance between the normalized histograms, × 100.
pub fn distribution_diff(a: &ToolHistogram, b: &ToolHistogram) -> Result<f64, StatsError> {
    if a.total == 0 || b.total == 0 {
        return Err(StatsError::EmptyHistogram);
    }
    let tools: BTreeSet<&String> = a.counts.keys().chain(b.counts.keys()).collect();
    let mut sum = 0.0;
    for t in tools {
        let pa = *a.counts.get(t).unwrap_or(&0) as f64 / a.total as f64;
        let pb = *b.counts.get(t).unwrap_or(&0) as f64 / b.total as f64;
        sum += (pa - pb).abs();
    }
    Ok((0.5 * sum * 100.0).clamp(0.0, 100.0))
}

/// Chosen and rejected candidates of a dataset, each counted once even
/// when it appears in several pairs.
struct UniqueSides<'a> {
    chosen: Vec<(&'a Action, ObsStatus)>,
    rejected: Vec<(&'a Action, ObsStatus)>,
}

fn unique_sides(pairs: &[PreferencePair]) -> UniqueSides<'_> {
    let mut seen_c = BTreeSet::new();
    let mut seen_r = BTreeSet::new();
    let mut sides = UniqueSides {
        chosen: Vec::new(),
        rejected: Vec::new(),
    };
    for p in pairs {
        let m = &p.meta;
        if seen_c.insert((&m.task_id, m.step_index)) {
            sides.chosen.push((&p.preferred, m.chosen_status));
        }
        if seen_r.insert((&m.task_id, m.step_index, m.rejected_candidate)) {
            sides.rejected.push((&p.dispreferred, m.rejected_status));
        }
    }
    sides
}

fn failure_rate(items: &[(&Action, ObsStatus)]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().filter(|(_, s)| s.is_failure()).count() as f64 / items.len() as f64
}

/// Share of failed observations (error, timeout, parse error) among unique
/// chosen and unique rejected candidates.
pub fn error_rates(pairs: &[PreferencePair]) -> Result<(f64, f64), StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::EmptyDataset);
    }
    let sides = unique_sides(pairs);
    Ok((failure_rate(&sides.chosen), failure_rate(&sides.rejected)))
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    m
}

/// Individual order-`n` BLEU: clipped n-gram precision times the brevity
/// penalty min(1, e^(1 − |ref|/|cand|)). Zero when the candidate has fewer
/// than `n` tokens or `n` is 0.
pub fn bleu_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> f64 {
    if n == 0 || candidate.len() < n {
        return 0.0;
    }
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let clipped: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    let precision = clipped as f64 / (candidate.len() - n + 1) as f64;
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).exp().min(1.0);
    precision * bp
}

fn tool_histogram(items: &[(&Action, ObsStatus)], registry: &ToolRegistrySpec) -> ToolHistogram {
    let mut h = ToolHistogram::default();
    for (a, _) in items {
        for t in extract_tools(&a.code, registry) {
            h.add(&t);
        }
    }
    h
}

/// Assembles all diagnostics. BLEU-n is bleu_n(dispreferred, preferred)
/// averaged over pairs; the tool divergence is 0 when neither side calls a
/// tool and 100 when exactly one side does.
pub fn report(pairs: &[PreferencePair], registry: &ToolRegistrySpec) -> Result<DiagnosticsReport, StatsError> {
    let (chosen_error_rate, rejected_error_rate) = error_rates(pairs)?;
    let sides = unique_sides(pairs);
    let chosen_hist = tool_histogram(&sides.chosen, registry);
    let rejected_hist = tool_histogram(&sides.rejected, registry);
    let distribution_diff_pct = match (chosen_hist.total, rejected_hist.total) {
        (0, 0) => 0.0,
        (0, _) | (_, 0) => 100.0,
        _ => distribution_diff(&chosen_hist, &rejected_hist)?,
    };
    let tokens: Vec<(Vec<String>, Vec<String>)> = pairs
        .iter()
        .map(|p| (tokenize(&p.dispreferred.text()), tokenize(&p.preferred.text())))
        .collect();
    let bleu = (1..=4u32)
        .map(|n| {
            let sum: f64 = tokens.iter().map(|(c, r)| bleu_n(c, r, n as usize)).sum();
            (n, sum / pairs.len() as f64)
        })
        .collect();
    Ok(DiagnosticsReport {
        pair_count: pairs.len(),
        chosen_hist,
        rejected_hist,
        distribution_diff_pct,
        chosen_error_rate,
        rejected_error_rate,
        bleu,
    })
}

/// `tool,chosen,rejected` rows for every tool seen on either side.
pub fn write_tool_csv<W: Write>(report: &DiagnosticsReport, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tool", "chosen", "rejected"])?;
    let tools: BTreeSet<&String> = report
        .chosen_hist
        .counts
        .keys()
        .chain(report.rejected_hist.counts.keys())
        .collect();
    for t in tools {
        let c = report.chosen_hist.counts.get(t).unwrap_or(&0);
        let r = report.rejected_hist.counts.get(t).unwrap_or(&0);
        w.write_record([t.as_str(), &c.to_string(), &r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
