//! Attention-free residual network used as the editing substrate.
//!
//! Each token travels its own residual stream through `n_blocks` feed-forward
//! blocks, `h ← h + W_proj σ(W_fc h)`. Logits come from a linear readout of
//! the mean of the final states over all tokens, so every token of a prompt
//! contributes to the prediction while only the subject token carries the
//! edited association.

use std::collections::BTreeMap;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hook::{HookError, HookLayerState, RoutingTrace};
use crate::linalg::{project, Matrix, Vector};

/// Hook states keyed by block index.
pub type HookSet = BTreeMap<usize, HookLayerState>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("token id {token} outside vocabulary of size {vocab_size}")]
    UnknownToken { token: u32, vocab_size: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("position {index} outside sequence of length {len}")]
    PositionOutOfRange { index: usize, len: usize },
    #[error("label {label} outside readout of size {n_labels}")]
    UnknownLabel { label: u32, n_labels: usize },
    #[error("block {block} does not exist (network has {n_blocks})")]
    NoSuchBlock { block: usize, n_blocks: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("target value did not converge: final loss {final_loss:.4}")]
    NonConvergence { final_loss: f64 },
    #[error(transparent)]
    Hook(#[from] HookError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    /// tanh approximation of GELU.
    Gelu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

fn default_vocab() -> usize {
    4096
}
fn default_fc_gain() -> f64 {
    1.0
}
fn default_proj_gain() -> f64 {
    0.1
}
fn default_readout_gain() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_blocks: usize,
    pub n_labels: usize,
    pub vocab_size: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
    /// Std of `W_fc` entries is `fc_gain`; embeddings are unit norm so
    /// pre-activations start near unit variance.
    pub fc_gain: f64,
    /// Std of `W_proj` entries is `proj_gain / sqrt(d_ffn)`. Larger values
    /// make the residual stream grow geometrically with depth.
    pub proj_gain: f64,
    /// Std of readout entries. Sets how far the target value search must
    /// move a single token of a mean-pooled sequence.
    pub readout_gain: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_ffn: 256,
            n_blocks: 8,
            n_labels: 512,
            vocab_size: default_vocab(),
            nonlinearity: Nonlinearity::Gelu,
            seed: 0,
            fc_gain: default_fc_gain(),
            proj_gain: default_proj_gain(),
            readout_gain: default_readout_gain(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_blocks", self.n_blocks),
            ("n_labels", self.n_labels),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NetworkError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.n_labels < 2 {
            return Err(NetworkError::InvalidConfig("n_labels must be at least 2".into()));
        }
        for (name, g) in [
            ("fc_gain", self.fc_gain),
            ("proj_gain", self.proj_gain),
            ("readout_gain", self.readout_gain),
        ] {
            if !g.is_finite() || g < 0.0 {
                return Err(NetworkError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// d_ffn × d_model
    pub w_fc: Matrix,
    /// d_model × d_ffn, the edited projection.
    pub w_proj: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetwork {
    pub config: NetworkConfig,
    /// d_model × vocab_size; column t is token t's unit-norm embedding.
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    /// n_labels × d_model
    pub readout: Matrix,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    if std == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ToyNetwork {
    /// Deterministic construction from the config seed.
    pub fn new(config: NetworkConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0);
        let mut embedding = gaussian_matrix(config.d_model, config.vocab_size, 1.0, &mut rng);
        for mut col in embedding.column_iter_mut() {
            let n = col.norm();
            col /= n;
        }
        let proj_std = config.proj_gain / (config.d_ffn as f64).sqrt();
        let blocks = (0..config.n_blocks)
            .map(|b| {
                let mut rng = stream_rng(config.seed, 1 + b as u64);
                Block {
                    w_fc: gaussian_matrix(config.d_ffn, config.d_model, config.fc_gain, &mut rng),
                    w_proj: gaussian_matrix(config.d_model, config.d_ffn, proj_std, &mut rng),
                }
            })
            .collect();
        let mut rng = stream_rng(config.seed, 1 + config.n_blocks as u64);
        let readout = gaussian_matrix(config.n_labels, config.d_model, config.readout_gain, &mut rng);
        Ok(Self {
            config,
            embedding,
            blocks,
            readout,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix, NetworkError> {
        if tokens.is_empty() {
            return Err(NetworkError::EmptySequence);
        }
        let vocab = self.embedding.ncols();
        let mut h = Matrix::zeros(self.config.d_model, tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= vocab {
                return Err(NetworkError::UnknownToken {
                    token: t,
                    vocab_size: vocab,
                });
            }
            h.set_column(i, &self.embedding.column(t as usize));
        }
        Ok(h)
    }

    /// `σ(W_fc h)` for block `b`, column per token.
    pub fn block_keys(&self, b: usize, h: &Matrix) -> Matrix {
        let mut pre = project(&self.blocks[b].w_fc, h);
        let f = self.config.nonlinearity;
        pre.apply(|x| *x = f.apply(*x));
        pre
    }

    /// Logits from the mean of the final token states.
    pub fn readout_logits(&self, final_states: &Matrix) -> Vector {
        let n = final_states.ncols() as f64;
        let mut pooled = Vector::zeros(final_states.nrows());
        for col in final_states.column_iter() {
            pooled += col;
        }
        pooled /= n;
        &self.readout * pooled
    }

    /// Keys of a token fed alone (no hooks) at block `b`. Keys are context
    /// independent because tokens never interact before the readout.
    pub fn token_key(&self, token: u32, b: usize) -> Result<Vector, NetworkError> {
        if b >= self.n_blocks() {
            return Err(NetworkError::NoSuchBlock {
                block: b,
                n_blocks: self.n_blocks(),
            });
        }
        let cap = forward_until(self, &HookSet::new(), &[token], b)?;
        Ok(cap.keys[b].column(0).into_owned())
    }

    /// Stable fingerprint of every projection weight, used to prove the
    /// original weights were never touched.
    pub fn proj_fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for b in &self.blocks {
            for v in b.w_proj.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCapture {
    /// `states[0]` is the embedding, `states[b + 1]` the residual stream after
    /// block `b`.
    pub states: Vec<Matrix>,
    /// `keys[b]` = σ(W_fc · states[b]).
    pub keys: Vec<Matrix>,
    /// Projection output added to the stream by each block (after routing).
    pub contributions: Vec<Matrix>,
    pub traces: BTreeMap<usize, RoutingTrace>,
    /// Present only when the pass ran through the final block.
    pub logits: Option<Vector>,
}

impl ForwardCapture {
    pub fn key_at(&self, block: usize, position: usize) -> Vector {
        self.keys[block].column(position).into_owned()
    }

    /// Residual stream after `block` at `position` (the `h` of that layer).
    pub fn hidden_after(&self, block: usize, position: usize) -> Vector {
        self.states[block + 1].column(position).into_owned()
    }

    pub fn prediction(&self) -> Option<u32> {
        self.logits.as_ref().map(argmax)
    }
}

pub fn argmax(v: &Vector) -> u32 {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Full forward pass; blocks present in `hooks` route their projection
/// output through the hook.
pub fn forward(net: &ToyNetwork, hooks: &HookSet, tokens: &[u32]) -> Result<ForwardCapture, NetworkError> {
    forward_until(net, hooks, tokens, net.n_blocks() - 1)
}

/// Forward pass that stops after block `last_block`.
pub fn forward_until(
    net: &ToyNetwork,
    hooks: &HookSet,
    tokens: &[u32],
    last_block: usize,
) -> Result<ForwardCapture, NetworkError> {
    if last_block >= net.n_blocks() {
        return Err(NetworkError::NoSuchBlock {
            block: last_block,
            n_blocks: net.n_blocks(),
        });
    }
    let mut h = net.embed(tokens)?;
    let mut states = Vec::with_capacity(last_block + 2);
    let mut keys = Vec::with_capacity(last_block + 1);
    let mut contributions = Vec::with_capacity(last_block + 1);
    let mut traces = BTreeMap::new();
    states.push(h.clone());
    for b in 0..=last_block {
        let k = net.block_keys(b, &h);
        let out = match hooks.get(&b) {
            Some(hook) => {
                let (out, trace) = hook.forward(&k)?;
                traces.insert(b, trace);
                out
            }
            None => project(&net.blocks[b].w_proj, &k),
        };
        h += &out;
        keys.push(k);
        contributions.push(out);
        states.push(h.clone());
    }
    let logits = if last_block + 1 == net.n_blocks() {
        Some(net.readout_logits(&h))
    } else {
        None
    };
    Ok(ForwardCapture {
        states,
        keys,
        contributions,
        traces,
        logits,
    })
}

/// Gradient-descent settings for the target value search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueOptConfig {
    pub steps: usize,
    pub lr: f64,
    /// Cross-entropy at or below which the search stops.
    pub tol: f64,
}

impl Default for ValueOptConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            lr: 0.5,
            tol: 1e-2,
        }
    }
}

/// Result of [`optimize_target_value`].
#[derive(Debug, Clone, PartialEq)]
pub struct TargetValue {
    /// Desired residual-stream state after the last edit block at the
    /// subject token.
    pub v: Vector,
    /// The state the hooked model currently produces there.
    pub current: Vector,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_taken: usize,
    pub converged: bool,
}

impl TargetValue {
    /// Strict view: non-convergence becomes an error carrying the final loss.
    pub fn into_result(self) -> Result<Self, NetworkError> {
        if self.converged {
            Ok(self)
        } else {
            Err(NetworkError::NonConvergence {
                final_loss: self.final_loss,
            })
        }
    }
}

/// The part of the network downstream of the insertion point, with the
/// other tokens' final states frozen.
pub struct ValueObjective<'a> {
    net: &'a ToyNetwork,
    first_block: usize,
    others_sum: Vector,
    n_tokens: usize,
    target: usize,
}

impl<'a> ValueObjective<'a> {
    /// Objective for replacing the subject token's state after `insert_block`.
    /// Blocks after `insert_block` must be unhooked.
    pub fn new(
        net: &'a ToyNetwork,
        capture: &ForwardCapture,
        subject_index: usize,
        insert_block: usize,
        target_label: u32,
    ) -> Result<Self, NetworkError> {
        let n_labels = net.config.n_labels;
        if target_label as usize >= n_labels {
            return Err(NetworkError::UnknownLabel {
                label: target_label,
                n_labels,
            });
        }
        let last = capture.states.last().expect("capture has states");
        if capture.states.len() != net.n_blocks() + 1 {
            return Err(NetworkError::InvalidConfig("value objective needs a full forward capture".into()));
        }
        let n_tokens = last.ncols();
        if subject_index >= n_tokens {
            return Err(NetworkError::PositionOutOfRange {
                index: subject_index,
                len: n_tokens,
            });
        }
        let mut others_sum = Vector::zeros(last.nrows());
        for (i, col) in last.column_iter().enumerate() {
            if i != subject_index {
                others_sum += col;
            }
        }
        Ok(Self {
            net,
            first_block: insert_block + 1,
            others_sum,
            n_tokens,
            target: target_label as usize,
        })
    }

    fn propagate(&self, v: &Vector) -> (Vector, Vec<(Vector, Vector)>) {
        let f = self.net.config.nonlinearity;
        let mut h = v.clone();
        let mut tape = Vec::new();
        for b in self.first_block..self.net.n_blocks() {
            let block = &self.net.blocks[b];
            let pre = &block.w_fc * &h;
            let act = pre.map(|x| f.apply(x));
            let out = &block.w_proj * act;
            tape.push((h.clone(), pre));
            h += out;
        }
        (h, tape)
    }

    pub fn logits(&self, v: &Vector) -> Vector {
        let (fin, _) = self.propagate(v);
        let pooled = (&self.others_sum + fin) / self.n_tokens as f64;
        &self.net.readout * pooled
    }

    /// Cross-entropy of the target label.
    pub fn loss(&self, v: &Vector) -> f64 {
        cross_entropy(&self.logits(v), self.target).0
    }

    /// Loss and its analytic gradient with respect to `v`.
    pub fn loss_and_grad(&self, v: &Vector) -> (f64, Vector) {
        let f = self.net.config.nonlinearity;
        let (fin, tape) = self.propagate(v);
        let pooled = (&self.others_sum + fin) / self.n_tokens as f64;
        let logits = &self.net.readout * pooled;
        let (loss, probs) = cross_entropy(&logits, self.target);
        let mut dlogits = probs;
        dlogits[self.target] -= 1.0;
        let mut g = self.net.readout.tr_mul(&dlogits) / self.n_tokens as f64;
        for (offset, (_, pre)) in tape.iter().enumerate().rev() {
            let block = &self.net.blocks[self.first_block + offset];
            let mut d_act = block.w_proj.tr_mul(&g);
            for (d, p) in d_act.iter_mut().zip(pre.iter()) {
                *d *= f.derivative(*p);
            }
            g += block.w_fc.tr_mul(&d_act);
        }
        (loss, g)
    }
}

/// Returns `(−log softmax(logits)[target], softmax(logits))`.
pub fn cross_entropy(logits: &Vector, target: usize) -> (f64, Vector) {
    let max = logits.max();
    let exp = logits.map(|x| (x - max).exp());
    let sum = exp.sum();
    let loss = (sum.ln() + max) - logits[target];
    (loss, exp / sum)
}

/// Finds the residual-stream state `v` after `last_edit_block` at the
/// subject token that makes the hooked model predict `target_label`.
///
/// Plain gradient descent on the target cross-entropy, started from the
/// state the hooked model currently produces; stops once the loss is at or
/// below `cfg.tol` and otherwise returns the best iterate.
pub fn optimize_target_value(
    net: &ToyNetwork,
    hooks: &HookSet,
    tokens: &[u32],
    subject_index: usize,
    target_label: u32,
    last_edit_block: usize,
    cfg: &ValueOptConfig,
) -> Result<TargetValue, NetworkError> {
    if last_edit_block >= net.n_blocks() {
        return Err(NetworkError::NoSuchBlock {
            block: last_edit_block,
            n_blocks: net.n_blocks(),
        });
    }
    if let Some((&b, _)) = hooks.range(last_edit_block + 1..).next() {
        return Err(NetworkError::InvalidConfig(format!(
            "hook on block {b} lies downstream of the last edit block {last_edit_block}"
        )));
    }
    let capture = forward(net, hooks, tokens)?;
    if subject_index >= tokens.len() {
        return Err(NetworkError::PositionOutOfRange {
            index: subject_index,
            len: tokens.len(),
        });
    }
    let objective = ValueObjective::new(net, &capture, subject_index, last_edit_block, target_label)?;
    let current = capture.hidden_after(last_edit_block, subject_index);

    let mut v = current.clone();
    let (mut loss, mut grad) = objective.loss_and_grad(&v);
    let initial_loss = loss;
    let mut best = (loss, v.clone());
    let mut steps_taken = 0;
    while loss > cfg.tol && steps_taken < cfg.steps {
        v -= &grad * cfg.lr;
        steps_taken += 1;
        let (l, g) = objective.loss_and_grad(&v);
        loss = l;
        grad = g;
        if loss < best.0 {
            best = (loss, v.clone());
        }
    }
    let converged = best.0 <= cfg.tol;
    if !converged {
        debug!(
            "target value search stopped at loss {:.4} after {} steps",
            best.0, steps_taken
        );
    }
    Ok(TargetValue {
        v: best.1,
        current,
        initial_loss,
        final_loss: best.0,
        steps_taken,
        converged,
    })
}
