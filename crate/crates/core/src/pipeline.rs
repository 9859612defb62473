//! Consecutive batch editing across several hook layers.
//!
//! One step: compute target states with the validated hooks, switch every
//! hook to temporary, then update the layers in ascending order. Each layer
//! receives an even share of the remaining residual, recomputed from a fresh
//! forward pass after the previous layer's update. Finally the per-layer
//! thresholds are refreshed on the batch's edit prompts.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FactRecord;
use crate::eval::{evaluate, EvalError, MetricsReport};
use crate::hook::{HookError, HookLayerState, HookMode, ModeTransition};
use crate::linalg::{frobenius, project, Matrix};
use crate::memory::{self, bootstrap_covariance, CovarianceAccumulator, MemoryError, PretrainSet};
use crate::network::{forward, forward_until, optimize_target_value, HookSet, NetworkError, ToyNetwork, ValueOptConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid edit config: {0}")]
    InvalidConfig(String),
    #[error("eval schedule step {step} exceeds the {total} steps of this run")]
    InvalidSchedule { step: usize, total: usize },
    #[error("layer {layer}, step {step}: {source}")]
    Memory {
        layer: usize,
        step: usize,
        #[source]
        source: MemoryError,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Hook(#[from] HookError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// True for solver failures (singular Gram matrices, non-finite data).
    pub fn is_numerical(&self) -> bool {
        matches!(self, PipelineError::Memory { .. })
    }
}

/// How the initial covariance of each edited layer is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Bootstrap {
    /// `λ · E[k kᵀ]` over keys of randomly sampled tokens.
    Sampled { n_samples: usize },
    /// Keep the sampled keys and their original outputs as an explicit
    /// pretraining set; the covariance is `K₀K₀ᵀ` and λ is unused.
    Exact { n_samples: usize },
}

impl Bootstrap {
    pub fn n_samples(&self) -> usize {
        match *self {
            Bootstrap::Sampled { n_samples } | Bootstrap::Exact { n_samples } => n_samples,
        }
    }
}

/// Where updates land.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateTarget {
    /// Hook layers own every change; original weights stay frozen.
    Hooked,
    /// No hooks: deltas are added straight into the session's copy of the
    /// projection weights.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub lambda: f64,
    pub alpha_z: f64,
    pub batch_size: usize,
    pub edit_layers: Vec<usize>,
    pub reg_beta: f64,
    pub v_opt: ValueOptConfig,
    pub bootstrap: Bootstrap,
    /// Keeps α at this value instead of the dynamic schedule.
    pub fixed_alpha: Option<f64>,
    pub update_target: UpdateTarget,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            lambda: 250.0,
            alpha_z: 2.2,
            batch_size: 10,
            edit_layers: vec![2, 3, 4],
            reg_beta: 0.0,
            v_opt: ValueOptConfig::default(),
            bootstrap: Bootstrap::Sampled { n_samples: 1024 },
            fixed_alpha: None,
            update_target: UpdateTarget::Hooked,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, n_blocks: usize) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.alpha_z > 0.0 && self.alpha_z.is_finite()) {
            return bad(format!("alpha_z must be positive, got {}", self.alpha_z));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.reg_beta >= 0.0 && self.reg_beta.is_finite()) {
            return bad(format!("reg_beta must be nonnegative, got {}", self.reg_beta));
        }
        if self.edit_layers.is_empty() {
            return bad("edit_layers is empty".into());
        }
        if self.edit_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("edit_layers must be strictly ascending".into());
        }
        if let Some(&l) = self.edit_layers.iter().find(|&&l| l >= n_blocks) {
            return bad(format!("edit layer {l} is outside [0, {n_blocks})"));
        }
        if self.bootstrap.n_samples() == 0 {
            return bad("bootstrap needs at least one sample".into());
        }
        if let Some(a) = self.fixed_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("fixed_alpha must be positive, got {a}"));
            }
        }
        if self.v_opt.lr <= 0.0 || self.v_opt.tol < 0.0 {
            return bad("v_opt needs lr > 0 and tol >= 0".into());
        }
        Ok(())
    }

    pub fn last_edit_layer(&self) -> usize {
        *self.edit_layers.last().expect("validated config has edit layers")
    }
}

/// One row of the step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLogRow {
    pub step: usize,
    pub layer: usize,
    pub alpha: f64,
    pub delta_fro: f64,
    pub cond_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub rows: Vec<StepLogRow>,
    pub n_instances: usize,
    /// Instances whose target search stopped above the tolerance.
    pub n_unconverged: usize,
    pub mean_final_loss: f64,
    /// Subject tokens edited in an earlier step (or twice in this batch).
    pub duplicate_subjects: Vec<u32>,
    /// Wall-clock time, kept out of the deterministic step log.
    pub wallclock_ms: f64,
}

/// Explicit key/value history of one layer, kept in exact bootstrap mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistory {
    pub keys: Matrix,
    pub values: Matrix,
}

impl LayerHistory {
    fn push(&mut self, k: &Matrix, v: &Matrix) {
        self.keys = hstack(&self.keys, k);
        self.values = hstack(&self.values, v);
    }
}

fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// The full editing state.
#[derive(Debug, Clone)]
pub struct EditSession {
    pub network: ToyNetwork,
    pub hooks: HookSet,
    pub covariances: BTreeMap<usize, CovarianceAccumulator>,
    /// Per-layer key/value history, exact bootstrap only. Starts with the
    /// pretraining set.
    pub history: Option<BTreeMap<usize, LayerHistory>>,
    pub config: EditConfig,
    pub step_log: Vec<StepLogRow>,
    pub reports: Vec<StepReport>,
    pub transitions: Vec<(usize, ModeTransition)>,
    pub steps_completed: usize,
    pub edited_subjects: HashSet<u32>,
}

/// Keys of `n` random tokens at block `layer` of the unedited network.
pub fn sample_keys(net: &ToyNetwork, layer: usize, n: usize, seed: u64) -> Result<Matrix, NetworkError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed_0000 + layer as u64);
    let vocab = net.config.vocab_size as u32;
    // distinct tokens when the vocabulary allows it: a repeated token repeats
    // its key and leaves an exact pretraining set rank deficient
    let tokens: Vec<u32> = if n <= vocab as usize {
        rand::seq::index::sample(&mut rng, vocab as usize, n)
            .into_iter()
            .map(|t| t as u32)
            .collect()
    } else {
        (0..n).map(|_| rng.random_range(0..vocab)).collect()
    };
    // tokens never interact before the readout, so one long sequence gives
    // each token's own key
    let cap = forward_until(net, &HookSet::new(), &tokens, layer)?;
    Ok(cap.keys[layer].clone())
}

impl EditSession {
    pub fn new(network: ToyNetwork, config: EditConfig) -> Result<Self, PipelineError> {
        config.validate(network.n_blocks())?;
        let mut hooks = HookSet::new();
        let mut covariances = BTreeMap::new();
        let mut history = match config.bootstrap {
            Bootstrap::Exact { .. } => Some(BTreeMap::new()),
            Bootstrap::Sampled { .. } => None,
        };
        let mut transitions = Vec::new();
        for &l in &config.edit_layers {
            let keys = sample_keys(&network, l, config.bootstrap.n_samples(), config.seed)?;
            let mem_err = |source| PipelineError::Memory { layer: l, step: 0, source };
            let cov = match config.bootstrap {
                Bootstrap::Sampled { .. } => bootstrap_covariance(&keys, config.lambda).map_err(mem_err)?,
                Bootstrap::Exact { .. } => {
                    let values = project(&network.blocks[l].w_proj, &keys);
                    let set = PretrainSet { keys, values };
                    let cov = set.covariance().map_err(mem_err)?;
                    if let Some(h) = history.as_mut() {
                        h.insert(
                            l,
                            LayerHistory {
                                keys: set.keys,
                                values: set.values,
                            },
                        );
                    }
                    cov
                }
            };
            covariances.insert(l, cov);
            if config.update_target == UpdateTarget::Hooked {
                let mut hook = HookLayerState::new(l, network.blocks[l].w_proj.clone(), config.alpha_z);
                if let Some(a) = config.fixed_alpha {
                    hook.set_alpha(a);
                }
                if let Some(t) = hook.set_mode(HookMode::Validated)? {
                    transitions.push((0, t));
                }
                hooks.insert(l, hook);
            }
        }
        Ok(Self {
            network,
            hooks,
            covariances,
            history,
            config,
            step_log: Vec::new(),
            reports: Vec::new(),
            transitions,
            steps_completed: 0,
            edited_subjects: HashSet::new(),
        })
    }

    fn set_all(&mut self, mode: HookMode, step: usize) -> Result<(), PipelineError> {
        for hook in self.hooks.values_mut() {
            if let Some(t) = hook.set_mode(mode)? {
                self.transitions.push((step, t));
            }
        }
        Ok(())
    }

    fn set_one(&mut self, layer: usize, mode: HookMode, step: usize) -> Result<(), PipelineError> {
        if let Some(hook) = self.hooks.get_mut(&layer) {
            if let Some(t) = hook.set_mode(mode)? {
                self.transitions.push((step, t));
            }
        }
        Ok(())
    }

    /// Current weight of an edited layer: the hook weight, or the network's
    /// own projection in direct mode.
    pub fn layer_weight(&self, layer: usize) -> &Matrix {
        match self.hooks.get(&layer) {
            Some(h) => h.w_hook(),
            None => &self.network.blocks[layer].w_proj,
        }
    }

    /// Current per-layer thresholds (empty in direct mode).
    pub fn alphas(&self) -> BTreeMap<usize, f64> {
        self.hooks.iter().map(|(&l, h)| (l, h.alpha())).collect()
    }

    /// Applies one consecutive step to `batch`.
    pub fn edit_batch(&mut self, batch: &[FactRecord]) -> Result<StepReport, PipelineError> {
        if batch.is_empty() {
            return Err(PipelineError::EmptyBatch);
        }
        let started = Instant::now();
        let step = self.steps_completed + 1;
        let last = self.config.last_edit_layer();
        let layers = self.config.edit_layers.clone();

        let mut seen_in_batch = HashSet::new();
        let mut duplicate_subjects = Vec::new();
        for r in batch {
            let s = r.subject_token();
            if self.edited_subjects.contains(&s) || !seen_in_batch.insert(s) {
                duplicate_subjects.push(s);
            }
        }
        if !duplicate_subjects.is_empty() {
            warn!(
                "step {step}: {} subject(s) edited again; their keys are accumulated once more",
                duplicate_subjects.len()
            );
        }

        // (1) target states with the validated hooks
        self.set_all(HookMode::Validated, step)?;
        let targets = {
            let (net, hooks, cfg) = (&self.network, &self.hooks, &self.config.v_opt);
            batch
                .par_iter()
                .map(|r| {
                    optimize_target_value(net, hooks, &r.prompt_tokens, r.subject_token_index, r.target_label, last, cfg)
                })
                .collect::<Result<Vec<_>, _>>()?
        };
        let n_unconverged = targets.iter().filter(|t| !t.converged).count();
        let mean_final_loss = targets.iter().map(|t| t.final_loss).sum::<f64>() / targets.len() as f64;
        if n_unconverged > 0 {
            debug!("step {step}: {n_unconverged} target search(es) stopped above tolerance");
        }

        // (2) temporary hooks, (3) layer-by-layer updates
        self.set_all(HookMode::Temporary, step)?;
        let mut rows = Vec::with_capacity(layers.len());
        for (pos, &l) in layers.iter().enumerate() {
            let remaining = (layers.len() - pos) as f64;
            let captures = {
                let (net, hooks) = (&self.network, &self.hooks);
                batch
                    .par_iter()
                    .map(|r| forward_until(net, hooks, &r.prompt_tokens, last))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let d_ffn = self.network.config.d_ffn;
            let d_model = self.network.config.d_model;
            let mut keys = Matrix::zeros(d_ffn, batch.len());
            let mut residual = Matrix::zeros(d_model, batch.len());
            for (j, ((r, cap), tv)) in batch.iter().zip(&captures).zip(&targets).enumerate() {
                keys.set_column(j, &cap.key_at(l, r.subject_token_index));
                let h_last = cap.hidden_after(last, r.subject_token_index);
                residual.set_column(j, &((&tv.v - h_last) / remaining));
            }
            let sol = memory::delta_from_residual(&residual, &keys, &self.covariances[&l], self.config.reg_beta)
                .map_err(|source| PipelineError::Memory { layer: l, step, source })?;
            if self.history.is_some() {
                let values = project(self.layer_weight(l), &keys) + &residual;
                if let Some(h) = self.history.as_mut().and_then(|h| h.get_mut(&l)) {
                    h.push(&keys, &values);
                }
            }
            match self.hooks.get_mut(&l) {
                Some(hook) => hook.apply_delta(&sol.delta)?,
                None => self.network.blocks[l].w_proj += &sol.delta,
            }
            self.covariances.insert(l, sol.covariance);
            self.set_one(l, HookMode::Validated, step)?;
            rows.push(StepLogRow {
                step,
                layer: l,
                alpha: f64::NAN,
                delta_fro: frobenius(&sol.delta),
                cond_estimate: sol.cond_estimate,
            });
        }

        // (4) thresholds, ascending so that later layers see the final
        // routing of earlier ones
        for row in rows.iter_mut() {
            let l = row.layer;
            if !self.hooks.contains_key(&l) {
                continue;
            }
            let inputs = {
                let (net, hooks) = (&self.network, &self.hooks);
                batch
                    .par_iter()
                    .map(|r| forward_until(net, hooks, &r.prompt_tokens, l).map(|c| c.keys[l].clone()))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let hook = self.hooks.get_mut(&l).expect("checked above");
            row.alpha = match self.config.fixed_alpha {
                Some(a) => {
                    hook.set_alpha(a);
                    a
                }
                None => hook.update_alpha(&inputs, step)?,
            };
        }

        // (5)
        self.set_all(HookMode::Validated, step)?;
        self.edited_subjects.extend(batch.iter().map(|r| r.subject_token()));
        self.step_log.extend(rows.iter().copied());
        self.steps_completed = step;
        let report = StepReport {
            step,
            rows,
            n_instances: batch.len(),
            n_unconverged,
            mean_final_loss,
            duplicate_subjects,
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.reports.push(report.clone());
        Ok(report)
    }

    /// Joint least-squares weight over the full exact history of `layer`.
    pub fn joint_solution(&self, layer: usize) -> Option<Result<Matrix, MemoryError>> {
        let h = self.history.as_ref()?.get(&layer)?;
        Some(memory::solve_initial_weight(&h.keys, &h.values, self.config.reg_beta))
    }
}

/// Total number of steps for `n` records in batches of `batch_size`.
pub fn n_steps(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Runs every remaining batch of `records` in order, evaluating after the
/// scheduled steps on the records edited so far. Steps already completed by
/// the session are skipped, so a restored session resumes where it stopped.
pub fn run_consecutive(
    session: &mut EditSession,
    records: &[FactRecord],
    batch_size: usize,
    eval_schedule: &[usize],
) -> Result<Vec<MetricsReport>, PipelineError> {
    if batch_size == 0 {
        return Err(PipelineError::InvalidConfig("batch_size must be at least 1".into()));
    }
    if records.len() < batch_size {
        return Err(PipelineError::InvalidConfig(format!(
            "{} record(s) cannot fill a batch of {batch_size}",
            records.len()
        )));
    }
    let total = n_steps(records.len(), batch_size);
    if let Some(&s) = eval_schedule.iter().find(|&&s| s == 0 || s > total) {
        return Err(PipelineError::InvalidSchedule { step: s, total });
    }
    let schedule: HashSet<usize> = eval_schedule.iter().copied().collect();
    let mut reports = Vec::new();
    for (i, batch) in records.chunks(batch_size).enumerate() {
        let step = i + 1;
        if step <= session.steps_completed {
            continue;
        }
        let rep = session.edit_batch(batch)?;
        debug!(
            "step {step}/{total}: {} instance(s), {:.1} ms",
            rep.n_instances, rep.wallclock_ms
        );
        if schedule.contains(&step) {
            let seen = &records[..(step * batch_size).min(records.len())];
            let m = evaluate(session, seen, step)?;
            info!(
                "step {step}: reliability {:.4} generality {:.4} locality {:.4}",
                m.reliability, m.generality, m.locality
            );
            reports.push(m);
        }
    }
    Ok(reports)
}

/// Predicted label of `tokens` under the session's current state.
pub fn predict(session: &EditSession, tokens: &[u32]) -> Result<u32, NetworkError> {
    Ok(forward(&session.network, &session.hooks, tokens)?
        .prediction()
        .expect("full forward has logits"))
}
