//! Metrics over an edit session: accuracy on edited and paraphrased prompts,
//! unchanged predictions on unrelated prompts, routing statistics and memory
//! accounting.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FactRecord;
use crate::network::{forward, NetworkError};
use crate::pipeline::EditSession;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyEvalSet,
    #[error("layer {0} has no hook to analyze")]
    NoHook(usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub reliability: usize,
    pub generality: usize,
    pub locality: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub reliability: f64,
    pub generality: f64,
    pub locality: f64,
    pub average: f64,
    pub n_eval: EvalCounts,
}

impl MetricsReport {
    pub fn new(step: usize, reliability: f64, generality: f64, locality: f64, n_eval: EvalCounts) -> Self {
        Self {
            step,
            reliability,
            generality,
            locality,
            average: (reliability + generality + locality) / 3.0,
            n_eval,
        }
    }
}

/// Which prompt of a record to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSet {
    Reliability,
    Generality,
    Locality,
}

impl PromptSet {
    pub fn tokens(self, r: &FactRecord) -> (&[u32], usize) {
        match self {
            PromptSet::Reliability => (&r.prompt_tokens, r.subject_token_index),
            PromptSet::Generality => (&r.rephrase_tokens, r.rephrase_subject_index),
            PromptSet::Locality => (&r.locality_tokens, r.locality_subject_index),
        }
    }

    fn expected(self, r: &FactRecord) -> u32 {
        match self {
            PromptSet::Reliability | PromptSet::Generality => r.target_label,
            PromptSet::Locality => r.locality_reference_label,
        }
    }
}

fn accuracy(session: &EditSession, records: &[FactRecord], set: PromptSet) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let hits = records
        .par_iter()
        .map(|r| {
            let (tokens, _) = set.tokens(r);
            let cap = forward(&session.network, &session.hooks, tokens)?;
            Ok(usize::from(cap.prediction() == Some(set.expected(r))))
        })
        .collect::<Result<Vec<_>, NetworkError>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction of edit prompts predicting their target.
pub fn eval_reliability(session: &EditSession, records: &[FactRecord]) -> Result<f64, EvalError> {
    accuracy(session, records, PromptSet::Reliability)
}

/// Fraction of paraphrased prompts predicting their target.
pub fn eval_generality(session: &EditSession, records: &[FactRecord]) -> Result<f64, EvalError> {
    accuracy(session, records, PromptSet::Generality)
}

/// Fraction of unrelated prompts whose prediction is unchanged.
pub fn eval_locality(session: &EditSession, records: &[FactRecord]) -> Result<f64, EvalError> {
    accuracy(session, records, PromptSet::Locality)
}

pub fn evaluate(session: &EditSession, records: &[FactRecord], step: usize) -> Result<MetricsReport, EvalError> {
    let n = records.len();
    Ok(MetricsReport::new(
        step,
        eval_reliability(session, records)?,
        eval_generality(session, records)?,
        eval_locality(session, records)?,
        EvalCounts {
            reliability: n,
            generality: n,
            locality: n,
        },
    ))
}

/// z-score margin that counts as a clear separation of the edited subject.
pub const SCOPE_MARGIN: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeRow {
    pub record_index: usize,
    pub record_id: String,
    pub prompt: PromptSet,
    pub subject_z: f64,
    pub mean_z: f64,
    pub max_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeSummary {
    pub layer: usize,
    pub min_reliability_z: f64,
    pub median_reliability_z: f64,
    pub min_generality_z: f64,
    pub median_generality_z: f64,
    /// Share of reliability prompts whose subject z exceeds the record mean
    /// by [`SCOPE_MARGIN`].
    pub reliability_separated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeAnalysis {
    pub rows: Vec<ScopeRow>,
    pub summary: ScopeSummary,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// z-scores at the subject token of every reliability and generality
/// prompt, read at `layer` (the last edit layer by default).
pub fn analyze_scope(
    session: &EditSession,
    records: &[FactRecord],
    layer: Option<usize>,
) -> Result<ScopeAnalysis, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let layer = layer.unwrap_or_else(|| session.config.last_edit_layer());
    if !session.hooks.contains_key(&layer) {
        return Err(EvalError::NoHook(layer));
    }
    let sets = [PromptSet::Reliability, PromptSet::Generality];
    let rows = records
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, r)| sets.iter().map(move |&set| (i, r, set)))
        .map(|(i, r, set)| {
            let (tokens, subject) = set.tokens(r);
            let cap = forward(&session.network, &session.hooks, tokens)?;
            let trace = &cap.traces[&layer];
            let z = &trace.z_scores;
            Ok(ScopeRow {
                record_index: i,
                record_id: r.id.clone(),
                prompt: set,
                subject_z: z[subject],
                mean_z: z.iter().sum::<f64>() / z.len() as f64,
                max_z: trace.max_z,
            })
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    let pick = |set: PromptSet| -> Vec<f64> { rows.iter().filter(|r| r.prompt == set).map(|r| r.subject_z).collect() };
    let rel = pick(PromptSet::Reliability);
    let gen = pick(PromptSet::Generality);
    let separated = rows
        .iter()
        .filter(|r| r.prompt == PromptSet::Reliability && r.subject_z - r.mean_z > SCOPE_MARGIN)
        .count();
    let summary = ScopeSummary {
        layer,
        min_reliability_z: rel.iter().copied().fold(f64::INFINITY, f64::min),
        median_reliability_z: median(rel.clone()),
        min_generality_z: gen.iter().copied().fold(f64::INFINITY, f64::min),
        median_generality_z: median(gen),
        reliability_separated: separated as f64 / rel.len() as f64,
    };
    Ok(ScopeAnalysis { rows, summary })
}

/// How often the hooks are used. A token counts as hooked when any edited
/// layer routes it to the hook weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmploymentStats {
    pub prompt: PromptSet,
    pub n_instances: usize,
    /// Instances whose subject token is hooked (always 0 for locality).
    pub n_instances_hooked: usize,
    pub n_tokens: usize,
    pub n_tokens_hooked: usize,
    /// `A′/A`; not defined for locality prompts, which carry no edited key.
    pub instance_rate: Option<f64>,
    /// `T′/T`.
    pub overall_token_rate: f64,
    /// `(T′ − A′)/T`.
    pub unwanted_token_rate: f64,
}

/// Per-token hook usage of one prompt: `hooked[i]` is true when any layer
/// swapped token `i`.
pub fn hooked_tokens(session: &EditSession, tokens: &[u32]) -> Result<Vec<bool>, NetworkError> {
    let cap = forward(&session.network, &session.hooks, tokens)?;
    let mut hooked = vec![false; tokens.len()];
    for trace in cap.traces.values() {
        for (h, s) in hooked.iter_mut().zip(&trace.swapped) {
            *h |= *s;
        }
    }
    Ok(hooked)
}

pub fn employment_stats(
    session: &EditSession,
    records: &[FactRecord],
    set: PromptSet,
) -> Result<EmploymentStats, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let per_record = records
        .par_iter()
        .map(|r| {
            let (tokens, subject) = set.tokens(r);
            let hooked = hooked_tokens(session, tokens)?;
            let subject_hooked = set != PromptSet::Locality && hooked[subject];
            Ok((tokens.len(), hooked.iter().filter(|h| **h).count(), subject_hooked))
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    Ok(EmploymentStats::from_counts(
        set,
        records.len(),
        per_record.iter().filter(|p| p.2).count(),
        per_record.iter().map(|p| p.0).sum(),
        per_record.iter().map(|p| p.1).sum(),
    ))
}

impl EmploymentStats {
    /// Rates from `A`, `A′`, `T`, `T′`.
    pub fn from_counts(
        prompt: PromptSet,
        n_instances: usize,
        n_instances_hooked: usize,
        n_tokens: usize,
        n_tokens_hooked: usize,
    ) -> Self {
        let t = n_tokens as f64;
        Self {
            prompt,
            n_instances,
            n_instances_hooked,
            n_tokens,
            n_tokens_hooked,
            instance_rate: (prompt != PromptSet::Locality).then(|| n_instances_hooked as f64 / n_instances as f64),
            overall_token_rate: n_tokens_hooked as f64 / t,
            unwanted_token_rate: n_tokens_hooked.saturating_sub(n_instances_hooked) as f64 / t,
        }
    }
}

/// One token of a routing trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub layer: usize,
    pub instance_id: String,
    pub token_index: usize,
    pub m_norm: f64,
    pub z: f64,
    pub swapped: bool,
}

/// Routing traces of every hooked layer for the chosen prompt of each record.
pub fn trace_rows(session: &EditSession, records: &[FactRecord], set: PromptSet) -> Result<Vec<TraceRow>, EvalError> {
    let step = session.steps_completed;
    let per_record = records
        .par_iter()
        .map(|r| {
            let (tokens, _) = set.tokens(r);
            let cap = forward(&session.network, &session.hooks, tokens)?;
            let mut rows = Vec::new();
            for (&layer, trace) in &cap.traces {
                for i in 0..tokens.len() {
                    rows.push(TraceRow {
                        step,
                        layer,
                        instance_id: r.id.clone(),
                        token_index: i,
                        m_norm: trace.m_norms[i],
                        z: trace.z_scores[i],
                        swapped: trace.swapped[i],
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>, NetworkError>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

/// Bytes of one dense hook weight.
pub fn hook_layer_bytes(d_out: u64, d_in: u64, bytes_per_entry: u64) -> u64 {
    d_out * d_in * bytes_per_entry
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub per_layer_bytes: BTreeMap<usize, u64>,
    pub total_bytes: u64,
    /// Accumulated key covariances. Not part of the hook weight budget but
    /// held for the whole run.
    pub covariance_bytes: u64,
}

impl MemoryReport {
    pub fn total_gib(&self) -> f64 {
        self.total_bytes as f64 / GIB
    }
}

pub fn memory_report(session: &EditSession) -> MemoryReport {
    let entry = std::mem::size_of::<f64>() as u64;
    let per_layer_bytes: BTreeMap<usize, u64> = session
        .hooks
        .iter()
        .map(|(&l, h)| {
            let w = h.w_hook();
            (l, hook_layer_bytes(w.nrows() as u64, w.ncols() as u64, entry))
        })
        .collect();
    MemoryReport {
        total_bytes: per_layer_bytes.values().sum(),
        per_layer_bytes,
        covariance_bytes: session.covariances.values().map(|c| c.bytes() as u64).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::network::{forward_until, NetworkConfig, ToyNetwork};
    use crate::pipeline::{predict, run_consecutive, Bootstrap, EditConfig};

    fn setup(n: usize) -> (EditSession, Vec<FactRecord>) {
        let net = ToyNetwork::new(NetworkConfig {
            d_model: 32,
            d_ffn: 64,
            n_blocks: 6,
            n_labels: 32,
            vocab_size: 512,
            seed: 5,
            ..NetworkConfig::default()
        })
        .unwrap();
        let cfg = SyntheticConfig {
            vocab_size: 512,
            filler_tokens: 128,
            ..SyntheticConfig::default()
        };
        let recs = generate_synthetic(&net, n, &cfg).unwrap();
        let edit = EditConfig {
            lambda: 64.0,
            edit_layers: vec![1, 2, 3],
            batch_size: 4,
            bootstrap: Bootstrap::Sampled { n_samples: 256 },
            ..EditConfig::default()
        };
        (EditSession::new(net, edit).unwrap(), recs)
    }

    #[test]
    fn accuracy_counts_hits() {
        let (s, mut recs) = setup(4);
        for r in recs.iter_mut().take(3) {
            r.target_label = r.original_label;
        }
        assert_eq!(eval_reliability(&s, &recs).unwrap(), 0.75);
        assert!(matches!(eval_generality(&s, &[]), Err(EvalError::EmptyEvalSet)));
    }

    #[test]
    fn unedited_session_has_perfect_locality() {
        let (s, recs) = setup(6);
        let m = evaluate(&s, &recs, 0).unwrap();
        assert_eq!(m.locality, 1.0);
        assert_eq!(m.reliability, 0.0);
    }

    #[test]
    fn average_is_mean_of_three() {
        let counts = EvalCounts {
            reliability: 3,
            generality: 3,
            locality: 3,
        };
        let m = MetricsReport::new(7, 0.9, 0.6, 0.3, counts);
        assert!((m.average - 0.6).abs() <= 1e-12);

        let (mut s, recs) = setup(8);
        let all = run_consecutive(&mut s, &recs, 4, &[2]).unwrap();
        let m = &all[0];
        assert!((m.average - (m.reliability + m.generality + m.locality) / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn evaluation_matches_direct_prediction() {
        let (mut s, recs) = setup(8);
        run_consecutive(&mut s, &recs, 4, &[]).unwrap();
        let hits = recs
            .iter()
            .filter(|r| predict(&s, &r.prompt_tokens).unwrap() == r.target_label)
            .count();
        assert_eq!(eval_reliability(&s, &recs).unwrap(), hits as f64 / 8.0);
        let kept = recs
            .iter()
            .filter(|r| predict(&s, &r.locality_tokens).unwrap() == r.locality_reference_label)
            .count();
        assert_eq!(eval_locality(&s, &recs).unwrap(), kept as f64 / 8.0);
    }

    #[test]
    fn employment_rate_arithmetic() {
        let e = EmploymentStats::from_counts(PromptSet::Reliability, 200, 198, 2000, 250);
        assert_eq!(e.instance_rate, Some(0.99));
        assert_eq!(e.overall_token_rate, 0.125);
        assert_eq!(e.unwanted_token_rate, 52.0 / 2000.0);
        let loc = EmploymentStats::from_counts(PromptSet::Locality, 10, 0, 100, 4);
        assert_eq!(loc.instance_rate, None);
        assert_eq!(loc.unwanted_token_rate, 0.04);
    }

    #[test]
    fn no_swaps_means_zero_rates() {
        let (s, recs) = setup(4);
        for set in [PromptSet::Reliability, PromptSet::Generality, PromptSet::Locality] {
            let e = employment_stats(&s, &recs, set).unwrap();
            assert_eq!(e.n_tokens_hooked, 0);
            assert_eq!(e.overall_token_rate, 0.0);
            assert_eq!(e.unwanted_token_rate, 0.0);
        }
    }

    #[test]
    fn employment_agrees_with_trace_recount() {
        let (mut s, recs) = setup(12);
        run_consecutive(&mut s, &recs, 4, &[]).unwrap();
        let rows = trace_rows(&s, &recs, PromptSet::Generality).unwrap();
        let mut hooked: BTreeMap<(String, usize), bool> = BTreeMap::new();
        for row in &rows {
            *hooked.entry((row.instance_id.clone(), row.token_index)).or_default() |= row.swapped;
        }
        let t_hooked = hooked.values().filter(|h| **h).count();
        let a_hooked = recs
            .iter()
            .filter(|r| hooked[&(r.id.clone(), r.rephrase_subject_index)])
            .count();
        let e = employment_stats(&s, &recs, PromptSet::Generality).unwrap();
        assert_eq!(e.n_tokens, hooked.len());
        assert_eq!(e.n_tokens_hooked, t_hooked);
        assert_eq!(e.n_instances_hooked, a_hooked);
        assert!(e.n_tokens_hooked > 0);
    }

    #[test]
    fn scope_z_matches_hand_computation() {
        let (s, recs) = setup(4);
        let a = analyze_scope(&s, &recs, None).unwrap();
        assert!(a.rows.iter().all(|r| r.subject_z == 0.0 && r.max_z == 0.0));
        assert!(matches!(analyze_scope(&s, &recs, Some(5)), Err(EvalError::NoHook(5))));

        let (mut s, recs) = setup(8);
        run_consecutive(&mut s, &recs, 4, &[]).unwrap();
        let a = analyze_scope(&s, &recs, Some(2)).unwrap();
        assert_eq!(a.rows.len(), 16);
        let r = &recs[5];
        let cap = forward_until(&s.network, &s.hooks, &r.prompt_tokens, 2).unwrap();
        let hook = &s.hooks[&2];
        let diff = hook.w_hook() - hook.w_original();
        let m: Vec<f64> = (0..r.prompt_tokens.len())
            .map(|i| (&diff * cap.key_at(2, i)).norm())
            .collect();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        let sd = (m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m.len() as f64).sqrt();
        let z = (m[r.subject_token_index] - mean) / sd;
        let row = a
            .rows
            .iter()
            .find(|row| row.record_index == 5 && row.prompt == PromptSet::Reliability)
            .unwrap();
        assert!((row.subject_z - z).abs() < 1e-10);
    }

    #[test]
    fn memory_accounting() {
        let gib = |b: u64| b as f64 / GIB;
        assert_eq!(gib(hook_layer_bytes(16384, 4096, 4)), 0.25);
        assert_eq!(gib(6 * hook_layer_bytes(16384, 4096, 4)), 1.5);
        assert_eq!(hook_layer_bytes(64, 256, 8), 131_072);

        let (mut s, recs) = setup(8);
        let before = memory_report(&s);
        assert_eq!(before.total_bytes, 3 * hook_layer_bytes(32, 64, 8));
        run_consecutive(&mut s, &recs, 4, &[]).unwrap();
        assert_eq!(memory_report(&s), before);

        s.hooks.clear();
        assert_eq!(memory_report(&s).total_bytes, 0);
    }
}
