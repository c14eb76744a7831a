//! Disentangling control module.
//!
//! The speaker embedding x entangles impression with identity. This module
//! strips impression information from x — high-ratio dropout plus an
//! adversary trained through a gradient reversal layer — and reinjects it
//! from the 11-dim impression vector: both are projected to 32 dims, fused
//! by concatenation and one linear layer back to the embedding width, and
//! the result h replaces x as the STL query. Minimizing the combined loss
//! therefore maximizes the adversary's error with respect to everything
//! upstream of the reversal.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::impression::ImpressionVector;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Forward identity whose backward pass multiplies the upstream gradient by
/// `-lambda`.
#[derive(Clone, Copy, Debug)]
pub struct GradientReversal {
    pub lambda: f32,
}

impl Default for GradientReversal {
    fn default() -> Self {
        GradientReversal { lambda: 1.0 }
    }
}

impl GradientReversal {
    pub fn apply(&self, tape: &Tape, t: Var) -> Var {
        tape.grl(t, self.lambda)
    }
}

/// Free-function form of the reversal op.
pub fn grl_apply(tape: &Tape, t: Var, lambda: f32) -> Var {
    tape.grl(t, lambda)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ControlConfig {
    /// Dropout rate on x before projection.
    pub dropout_rate: f32,
    /// Width both x and v are projected to.
    pub proj_dim: usize,
    /// Weight of the adversarial MSE inside the stage loss.
    pub lambda_adv: f32,
    /// GRL scale.
    pub grl_lambda: f32,
    pub adversary_hidden: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            dropout_rate: 0.8,
            proj_dim: 32,
            lambda_adv: 0.1,
            grl_lambda: 1.0,
            adversary_hidden: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Conditioning embedding fed to the backbone in place of x.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedEmbedding(pub Vec<f32>);

pub struct ControlModule {
    pub cfg: ControlConfig,
    pub latent_dim: usize,
    px_w: ParamId,
    px_b: ParamId,
    pv_w: ParamId,
    pv_b: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    adv1_w: ParamId,
    adv1_b: ParamId,
    adv2_w: ParamId,
    adv2_b: ParamId,
}

pub struct ConditionOutputs {
    /// 1×E fused embedding.
    pub h: Var,
    /// 1×proj_dim projection of (dropped-out) x — what the adversary reads.
    pub p_x: Var,
    /// 1×proj_dim projection of the impression vector.
    pub p_v: Var,
}

impl ControlModule {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        latent_dim: usize,
        cfg: &ControlConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let p = cfg.proj_dim;
        let xa = crate::tensor::store::xavier;
        ControlModule {
            cfg: *cfg,
            latent_dim,
            px_w: store.register(&format!("{prefix}.proj_x.w"), xa(&[latent_dim, p], rng)),
            px_b: store.register(&format!("{prefix}.proj_x.b"), Tensor::zeros(&[p])),
            pv_w: store.register(&format!("{prefix}.proj_v.w"), xa(&[11, p], rng)),
            pv_b: store.register(&format!("{prefix}.proj_v.b"), Tensor::zeros(&[p])),
            fuse_w: store.register(&format!("{prefix}.fuse.w"), xa(&[2 * p, latent_dim], rng)),
            fuse_b: store.register(&format!("{prefix}.fuse.b"), Tensor::zeros(&[latent_dim])),
            adv1_w: store.register(&format!("{prefix}.adv.fc1.w"), xa(&[p, cfg.adversary_hidden], rng)),
            adv1_b: store.register(&format!("{prefix}.adv.fc1.b"), Tensor::zeros(&[cfg.adversary_hidden])),
            adv2_w: store.register(&format!("{prefix}.adv.fc2.w"), xa(&[cfg.adversary_hidden, 11], rng)),
            adv2_b: store.register(&format!("{prefix}.adv.fc2.b"), Tensor::zeros(&[11])),
        }
    }

    /// Fuse x with the impression vector. Train mode applies inverted
    /// dropout to x; eval mode is a pure deterministic function.
    pub fn condition_on_tape(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        v: &ImpressionVector,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> ConditionOutputs {
        let v_row = tape.constant(Tensor::from_vec(&[1, 11], v.to_f32().to_vec()));
        let x_dropped = tape.dropout(x, self.cfg.dropout_rate, mode == Mode::Train, rng);
        let p_x = tape.linear(x_dropped, tape.param(store, self.px_w), tape.param(store, self.px_b));
        let p_v = tape.linear(v_row, tape.param(store, self.pv_w), tape.param(store, self.pv_b));
        let fused = tape.concat_cols(&[p_x, p_v]);
        let h = tape.linear(fused, tape.param(store, self.fuse_w), tape.param(store, self.fuse_b));
        ConditionOutputs { h, p_x, p_v }
    }

    /// Eval-mode conditioning of a concrete latent.
    pub fn condition(
        &self,
        store: &ParamStore,
        x: &[f32],
        v: &ImpressionVector,
    ) -> ConditionedEmbedding {
        assert_eq!(x.len(), self.latent_dim);
        let tape = Tape::new();
        let xv = tape.constant(Tensor::from_vec(&[1, x.len()], x.to_vec()));
        // Eval mode never samples, so the RNG is inert.
        let mut rng = crate::corpus::new_rng(0);
        let out = self.condition_on_tape(&tape, store, xv, v, Mode::Eval, &mut rng);
        ConditionedEmbedding(tape.value(out.h).data().to_vec())
    }

    /// Adversary regressor on (GRL-routed) p_x. Returns a 1×11 prediction.
    pub fn adversary_on_tape(&self, tape: &Tape, store: &ParamStore, p_x: Var) -> Var {
        let hidden = tape.relu(tape.linear(
            p_x,
            tape.param(store, self.adv1_w),
            tape.param(store, self.adv1_b),
        ));
        tape.linear(hidden, tape.param(store, self.adv2_w), tape.param(store, self.adv2_b))
    }

    /// Eval-mode adversary prediction from a concrete projection.
    pub fn adversary_predict(&self, store: &ParamStore, p_x: &[f32]) -> Vec<f32> {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(&[1, p_x.len()], p_x.to_vec()));
        let out = self.adversary_on_tape(&tape, store, p);
        tape.value(out).data().to_vec()
    }

    /// Eval-mode p_x of a concrete latent (the representation probes read).
    pub fn project_x(&self, store: &ParamStore, x: &[f32]) -> Vec<f32> {
        let tape = Tape::new();
        let xv = tape.constant(Tensor::from_vec(&[1, x.len()], x.to_vec()));
        let p_x = tape.linear(xv, tape.param(store, self.px_w), tape.param(store, self.px_b));
        tape.value(p_x).data().to_vec()
    }
}

/// Stage loss: `recon + lambda_adv · adv_mse`. The adversarial term is
/// expected to already sit behind the GRL on its encoder-side path.
pub fn control_loss(tape: &Tape, recon: Var, adv_mse: Var, cfg: &ControlConfig) -> Var {
    let rv = tape.value(recon).item();
    let av = tape.value(adv_mse).item();
    assert!(rv.is_finite() && rv >= 0.0, "recon loss must be finite and >= 0");
    assert!(av.is_finite() && av >= 0.0, "adversary loss must be finite and >= 0");
    tape.add(recon, tape.scale(adv_mse, cfg.lambda_adv))
}
