//! Hook layers: a shadow copy of a projection weight that owns every edit,
//! plus per-token routing between the original and the edited output.
//!
//! In validated mode a token is routed to the hook when the L2 norm of its
//! output difference `‖(W_h − W₀) kᵢ‖` is an outlier among the tokens of the
//! same input, measured by its z-score against the threshold `α`.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{project, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HookError {
    #[error("hook input has no tokens")]
    EmptyInput,
    #[error("hook input has {got} rows, layer expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("alpha update called with an empty batch")]
    EmptyBatch,
    #[error("illegal hook mode transition {from:?} -> {to:?} on layer {layer}")]
    IllegalTransition { layer: usize, from: HookMode, to: HookMode },
    #[error("hook weight of layer {layer} can only change in temporary mode (currently {mode:?})")]
    NotTemporary { layer: usize, mode: HookMode },
    #[error("hook delta has shape {got:?}, expected {expected:?}")]
    DeltaShape { expected: (usize, usize), got: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HookMode {
    /// Not hung: the layer behaves as the original.
    Detached,
    /// Inside a batch update: every token uses the hook weight.
    Temporary,
    /// After an update: tokens are routed by z-score.
    Validated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeTransition {
    pub layer: usize,
    pub from: HookMode,
    pub to: HookMode,
}

/// Per-token routing record of one hook forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub m_norms: Vec<f64>,
    pub z_scores: Vec<f64>,
    pub swapped: Vec<bool>,
    pub max_z: f64,
}

impl RoutingTrace {
    pub fn n_swapped(&self) -> usize {
        self.swapped.iter().filter(|s| **s).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookLayerState {
    pub layer_index: usize,
    w_original: Matrix,
    w_hook: Matrix,
    alpha: f64,
    alpha_initial: f64,
    mode: HookMode,
}

/// Population z-scores of `m`. A constant vector (σ = 0) standardizes to all
/// zeros.
pub fn standardize(m: &[f64]) -> Vec<f64> {
    let n = m.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = m.iter().sum::<f64>() / n as f64;
    let var = m.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return vec![0.0; n];
    }
    m.iter().map(|x| (x - mean) / std).collect()
}

fn column_norms(diff: &Matrix) -> Vec<f64> {
    diff.column_iter().map(|c| c.norm()).collect()
}

fn max_or_zero(z: &[f64]) -> f64 {
    if z.len() < 2 {
        return 0.0;
    }
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

impl HookLayerState {
    /// A detached hook whose weight starts as a copy of the original.
    pub fn new(layer_index: usize, w_original: Matrix, alpha_initial: f64) -> Self {
        let w_hook = w_original.clone();
        Self {
            layer_index,
            w_original,
            w_hook,
            alpha: alpha_initial,
            alpha_initial,
            mode: HookMode::Detached,
        }
    }

    /// Rebuilds a state from persisted parts.
    pub fn from_parts(
        layer_index: usize,
        w_original: Matrix,
        w_hook: Matrix,
        alpha: f64,
        alpha_initial: f64,
        mode: HookMode,
    ) -> Self {
        Self {
            layer_index,
            w_original,
            w_hook,
            alpha,
            alpha_initial,
            mode,
        }
    }

    pub fn w_original(&self) -> &Matrix {
        &self.w_original
    }

    pub fn w_hook(&self) -> &Matrix {
        &self.w_hook
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn alpha_initial(&self) -> f64 {
        self.alpha_initial
    }

    pub fn mode(&self) -> HookMode {
        self.mode
    }

    pub fn d_in(&self) -> usize {
        self.w_original.ncols()
    }

    /// Changes mode. Setting the current mode again is a no-op and returns
    /// `None`; legal transitions return the transition for logging.
    pub fn set_mode(&mut self, mode: HookMode) -> Result<Option<ModeTransition>, HookError> {
        use HookMode::*;
        if mode == self.mode {
            return Ok(None);
        }
        let legal = matches!(
            (self.mode, mode),
            (Detached, Validated) | (Validated, Detached) | (Validated, Temporary) | (Temporary, Validated)
        );
        if !legal {
            return Err(HookError::IllegalTransition {
                layer: self.layer_index,
                from: self.mode,
                to: mode,
            });
        }
        let t = ModeTransition {
            layer: self.layer_index,
            from: self.mode,
            to: mode,
        };
        self.mode = mode;
        Ok(Some(t))
    }

    /// `W_h ← W_h + Δ`; only legal inside a batch update.
    pub fn apply_delta(&mut self, delta: &Matrix) -> Result<(), HookError> {
        if self.mode != HookMode::Temporary {
            return Err(HookError::NotTemporary {
                layer: self.layer_index,
                mode: self.mode,
            });
        }
        if delta.shape() != self.w_hook.shape() {
            return Err(HookError::DeltaShape {
                expected: self.w_hook.shape(),
                got: delta.shape(),
            });
        }
        self.w_hook += delta;
        Ok(())
    }

    /// Overrides the threshold (fixed-α runs and snapshot restore).
    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    fn check_input(&self, inputs: &Matrix) -> Result<(), HookError> {
        if inputs.nrows() != self.d_in() {
            return Err(HookError::InputShape {
                expected: self.d_in(),
                got: inputs.nrows(),
            });
        }
        if inputs.ncols() == 0 {
            return Err(HookError::EmptyInput);
        }
        Ok(())
    }

    /// Routes every token (column of `inputs`) to the original or the hook
    /// output according to the current mode.
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, RoutingTrace), HookError> {
        self.check_input(inputs)?;
        let n = inputs.ncols();
        let original = project(&self.w_original, inputs);
        if self.mode == HookMode::Detached {
            let trace = RoutingTrace {
                m_norms: vec![0.0; n],
                z_scores: vec![0.0; n],
                swapped: vec![false; n],
                max_z: 0.0,
            };
            return Ok((original, trace));
        }

        let hooked = project(&self.w_hook, inputs);
        let m_norms = column_norms(&(&hooked - &original));
        let z_scores = standardize(&m_norms);
        let max_z = max_or_zero(&z_scores);

        if self.mode == HookMode::Temporary {
            let trace = RoutingTrace {
                m_norms,
                z_scores,
                swapped: vec![true; n],
                max_z,
            };
            return Ok((hooked, trace));
        }

        let swapped: Vec<bool> = z_scores.iter().map(|z| *z >= self.alpha).collect();
        let mut out = original;
        for (i, s) in swapped.iter().enumerate() {
            if *s {
                out.set_column(i, &hooked.column(i));
            }
        }
        Ok((
            out,
            RoutingTrace {
                m_norms,
                z_scores,
                swapped,
                max_z,
            },
        ))
    }

    /// Largest z-score of `‖(W_h − W₀) kᵢ‖` over the tokens of one instance;
    /// zero for fewer than two tokens or constant norms. Computed exactly as
    /// routing computes it, so a threshold taken from here is met bit for bit.
    pub fn instance_max_z(&self, inputs: &Matrix) -> Result<f64, HookError> {
        self.check_input(inputs)?;
        let m = self.change_norms(inputs);
        Ok(max_or_zero(&standardize(&m)))
    }

    fn change_norms(&self, inputs: &Matrix) -> Vec<f64> {
        let hooked = project(&self.w_hook, inputs);
        let original = project(&self.w_original, inputs);
        column_norms(&(&hooked - &original))
    }

    /// Updates `α` after this step's weight change.
    ///
    /// Step 1 resets to `α_z`; later steps take the smallest per-instance
    /// max z-score of the batch and keep the running minimum. Single-token
    /// instances are skipped.
    pub fn update_alpha(&mut self, batch_inputs: &[Matrix], step: usize) -> Result<f64, HookError> {
        if batch_inputs.is_empty() {
            return Err(HookError::EmptyBatch);
        }
        for inputs in batch_inputs {
            self.check_input(inputs)?;
        }
        if step <= 1 {
            self.alpha = self.alpha_initial;
            return Ok(self.alpha);
        }
        let mut candidate = f64::INFINITY;
        let mut skipped = 0usize;
        for inputs in batch_inputs {
            if inputs.ncols() < 2 {
                skipped += 1;
                continue;
            }
            candidate = candidate.min(self.instance_max_z(inputs)?);
        }
        if skipped > 0 {
            warn!(
                "layer {}: {} single-token instance(s) excluded from the alpha update",
                self.layer_index, skipped
            );
        }
        if candidate.is_finite() {
            self.alpha = self.alpha.min(candidate);
        }
        Ok(self.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Builds a validated hook whose weight difference maps token i to a
    /// vector of norm `norms[i]` when the input is the i-th basis vector.
    fn hook_with_norms(norms: &[f64], alpha: f64) -> (HookLayerState, Matrix) {
        let n = norms.len();
        let w0 = Matrix::identity(n, n);
        let mut state = HookLayerState::new(0, w0.clone(), alpha);
        state.set_mode(HookMode::Validated).unwrap();
        state.set_mode(HookMode::Temporary).unwrap();
        let delta = Matrix::from_diagonal(&nalgebra::DVector::from_column_slice(norms));
        state.apply_delta(&delta).unwrap();
        state.set_mode(HookMode::Validated).unwrap();
        (state, Matrix::identity(n, n))
    }

    #[test]
    fn identical_weights_never_swap() {
        let w0 = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut state = HookLayerState::new(3, w0.clone(), 2.2);
        state.set_mode(HookMode::Validated).unwrap();
        let x = Matrix::from_row_slice(3, 4, &[1.0, 0.0, 2.0, 1.0, 0.5, 1.0, 0.0, 3.0, 2.0, 1.0, 1.0, 1.0]);
        let (out, trace) = state.forward(&x).unwrap();
        assert_eq!(out, project(&w0, &x));
        assert!(trace.m_norms.iter().all(|m| *m == 0.0));
        assert!(trace.z_scores.iter().all(|z| *z == 0.0));
        assert!(trace.swapped.iter().all(|s| !s));
    }

    #[test]
    fn temporary_mode_uses_hook_for_every_token() {
        let (mut state, x) = hook_with_norms(&[0.1, 0.2, 3.0], 2.2);
        state.set_mode(HookMode::Temporary).unwrap();
        let (out, trace) = state.forward(&x).unwrap();
        assert_eq!(out, project(state.w_hook(), &x));
        assert!(trace.swapped.iter().all(|s| *s));
    }

    #[test]
    fn detached_mode_is_original_layer() {
        let (mut state, x) = hook_with_norms(&[0.1, 0.2, 3.0], 2.2);
        state.set_mode(HookMode::Detached).unwrap();
        let (out, trace) = state.forward(&x).unwrap();
        assert_eq!(out, project(state.w_original(), &x));
        assert_eq!(trace.n_swapped(), 0);
    }

    #[test]
    fn hand_computed_outlier_swaps_alone() {
        let norms = [0.1, 0.1, 0.1, 0.1, 10.0];
        // scalar oracle
        let mean: f64 = norms.iter().sum::<f64>() / 5.0;
        let std = (norms.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        let z5 = (10.0 - mean) / std;
        assert!((mean - 2.08).abs() < 1e-12);
        assert!((std - 3.96).abs() < 5e-3);
        assert!((z5 - 2.0).abs() < 1e-12);

        let (state, x) = hook_with_norms(&norms, 1.8);
        let (out, trace) = state.forward(&x).unwrap();
        assert_eq!(trace.swapped, vec![false, false, false, false, true]);
        assert!((trace.z_scores[4] - z5).abs() < 1e-12);
        assert!((trace.max_z - z5).abs() < 1e-12);
        let p = project(state.w_original(), &x);
        let o = project(state.w_hook(), &x);
        for i in 0..4 {
            assert_eq!(out.column(i), p.column(i));
        }
        assert_eq!(out.column(4), o.column(4));
        assert!((state.instance_max_z(&x).unwrap() - z5).abs() < 1e-12);
    }

    #[test]
    fn threshold_comparison_is_inclusive() {
        let norms = [0.1, 0.1, 0.1, 0.1, 10.0];
        let (probe, x) = hook_with_norms(&norms, 0.0);
        let z5 = probe.instance_max_z(&x).unwrap();
        let (state, x) = hook_with_norms(&norms, z5);
        let (_, trace) = state.forward(&x).unwrap();
        assert!(trace.swapped[4]);
    }

    #[test]
    fn max_z_degenerate_inputs() {
        let (state, _) = hook_with_norms(&[1.0, 1.0, 1.0], 2.2);
        // constant norms
        assert_eq!(state.instance_max_z(&Matrix::identity(3, 3)).unwrap(), 0.0);
        // single token
        assert_eq!(state.instance_max_z(&Matrix::identity(3, 1)).unwrap(), 0.0);
    }

    #[test]
    fn alpha_schedule() {
        let (mut state, _) = hook_with_norms(&[1.0, 1.0, 1.0, 1.0], 2.2);
        let x = Matrix::identity(4, 4);
        assert_eq!(state.update_alpha(&[x.clone()], 1).unwrap(), 2.2);
        assert_eq!(state.update_alpha(&[], 2).unwrap_err(), HookError::EmptyBatch);
    }

    #[test]
    fn alpha_takes_batch_minimum_then_history_minimum() {
        // Instance max-z values are set by the shape of the norm vector:
        // one outlier among n tokens has z = sqrt(n - 1).
        let n_a = 10; // z = 3.0
        let n_b = 7; // z = sqrt(6) ~ 2.449
        let dim = n_a + n_b;
        let mut norms = vec![0.0; dim];
        norms[n_a - 1] = 5.0;
        norms[dim - 1] = 5.0;
        let mut state = HookLayerState::new(0, Matrix::identity(dim, dim), 2.2);
        state.set_mode(HookMode::Validated).unwrap();
        state.set_mode(HookMode::Temporary).unwrap();
        state
            .apply_delta(&Matrix::from_diagonal(&nalgebra::DVector::from_vec(norms)))
            .unwrap();
        state.set_mode(HookMode::Validated).unwrap();
        let eye = Matrix::identity(dim, dim);
        let inst_a = eye.columns(0, n_a).into_owned();
        let inst_b = eye.columns(n_a, n_b).into_owned();
        let za = state.instance_max_z(&inst_a).unwrap();
        let zb = state.instance_max_z(&inst_b).unwrap();
        assert!((za - 3.0).abs() < 1e-12);
        assert!((zb - 6f64.sqrt()).abs() < 1e-12);

        state.set_alpha(2.8);
        let a = state.update_alpha(&[inst_a.clone(), inst_b.clone()], 2).unwrap();
        assert!((a - zb).abs() < 1e-12);

        // candidate above the running value leaves alpha unchanged
        state.set_alpha(2.2);
        let a = state.update_alpha(&[inst_a.clone()], 3).unwrap();
        assert_eq!(a, 2.2);
        assert!(state.alpha() <= state.alpha_initial());

        // single-token instances are skipped
        let single = eye.columns(0, 1).into_owned();
        let a = state.update_alpha(&[single], 4).unwrap();
        assert_eq!(a, 2.2);
    }

    #[test]
    fn mode_transitions() {
        let mut state = HookLayerState::new(1, Matrix::identity(2, 2), 2.2);
        assert_eq!(
            state.set_mode(HookMode::Temporary).unwrap_err(),
            HookError::IllegalTransition {
                layer: 1,
                from: HookMode::Detached,
                to: HookMode::Temporary
            }
        );
        state.set_mode(HookMode::Validated).unwrap();
        let before = state.w_hook().clone();
        assert!(state.set_mode(HookMode::Temporary).unwrap().is_some());
        assert!(state.set_mode(HookMode::Validated).unwrap().is_some());
        assert_eq!(state.w_hook(), &before);
        assert!(state.set_mode(HookMode::Validated).unwrap().is_none());
        assert!(matches!(
            state.apply_delta(&Matrix::zeros(2, 2)),
            Err(HookError::NotTemporary { .. })
        ));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let state = HookLayerState::new(0, Matrix::identity(2, 2), 2.2);
        assert_eq!(state.forward(&Matrix::zeros(2, 0)).unwrap_err(), HookError::EmptyInput);
        assert!(matches!(
            state.forward(&Matrix::zeros(3, 1)),
            Err(HookError::InputShape { .. })
        ));
    }

    proptest! {
        #[test]
        fn standardized_scores_have_zero_mean_unit_std(m in prop::collection::vec(0.0f64..100.0, 2..40)) {
            let z = standardize(&m);
            let mean_m = m.iter().sum::<f64>() / m.len() as f64;
            let spread = m.iter().map(|x| (x - mean_m).abs()).fold(0.0, f64::max);
            prop_assume!(spread > 1e-6);
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let std = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((std - 1.0).abs() < 1e-10);
        }

        #[test]
        fn validated_routing_is_bitwise_local(
            norms in prop::collection::vec(0.0f64..5.0, 2..12),
            alpha in 0.5f64..3.0,
        ) {
            let (state, x) = hook_with_norms(&norms, alpha);
            let (out, trace) = state.forward(&x).unwrap();
            let p = project(state.w_original(), &x);
            let o = project(state.w_hook(), &x);
            for i in 0..norms.len() {
                prop_assert_eq!(trace.swapped[i], trace.z_scores[i] >= alpha);
                if trace.swapped[i] {
                    prop_assert_eq!(out.column(i), o.column(i));
                } else {
                    prop_assert_eq!(out.column(i), p.column(i));
                }
            }
        }
    }
}
