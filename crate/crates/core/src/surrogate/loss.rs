//! Data-fit loss plus a gated volume-conservation penalty:
//!
//! ```text
//! loss = mean((Û - U)²) + λ · mean_b[ gate_b · (V_b - V_origin)² ] (+ w · cosine term)
//! ```
//!
//! where `gate_b = 1` only when `|V_b - V_origin|` exceeds the threshold.
//! The gate is evaluated on the forward values and treated as a constant.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use viscosurr_tensorad::{HexVolume, Ops, Real, Tensor};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight λ of the volume penalty; 0 gives the plain MSE ("generic") loss.
    pub lambda: f64,
    /// Gate threshold as a fraction of the rest volume.
    pub volume_gate_fraction: f64,
    /// Absolute gate threshold in mm³; overrides the fraction when set.
    pub volume_gate_abs: Option<f64>,
    /// Weight of the force/displacement misalignment term (0 disables it).
    pub cosine_term_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.1, volume_gate_fraction: 0.07, volume_gate_abs: None, cosine_term_weight: 0.0 }
    }
}

impl LossConfig {
    /// The plain MSE loss.
    pub fn generic() -> Self {
        LossConfig { lambda: 0.0, ..LossConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda) || !ok(self.volume_gate_fraction) || !ok(self.cosine_term_weight) {
            return Err(CoreError::Config(format!(
                "loss weights and gate must be finite and non-negative (lambda {}, gate {}, cosine {})",
                self.lambda, self.volume_gate_fraction, self.cosine_term_weight
            )));
        }
        if let Some(g) = self.volume_gate_abs {
            if !ok(g) {
                return Err(CoreError::Config(format!("absolute volume gate must be non-negative, got {g}")));
            }
        }
        Ok(())
    }

    /// Gate threshold in mm³ for a body of rest volume `v_origin`.
    pub fn gate_threshold(&self, v_origin: f64) -> f64 {
        self.volume_gate_abs.unwrap_or(self.volume_gate_fraction * v_origin)
    }
}

/// Loss value and its components, all as graph values.
#[derive(Debug, Clone)]
pub struct LossTerms<V> {
    pub total: V,
    pub mse: V,
    /// `λ · mean(gate · ΔV²)`, absent when λ = 0.
    pub physics: Option<V>,
    pub cosine: Option<V>,
    /// Per-item volume change `V_b - V_origin` (mm³), from the forward values.
    pub delta_v: Vec<f64>,
}

/// Builds the loss for a batch of predicted displacements `[B, 3, X, Y, Z]`
/// (mm). `forces` (same layout, physical units) is needed only for the
/// cosine term.
pub fn physics_loss<E: Real, O: Ops<E>>(
    ops: &O,
    pred: &O::V,
    target: &O::V,
    volume: &Arc<HexVolume>,
    v_origin: f64,
    cfg: &LossConfig,
    forces: Option<&Tensor<E>>,
) -> Result<LossTerms<O::V>> {
    cfg.validate()?;
    let mse = ops.mse(pred, target)?;
    let vols = ops.hex_volume(pred, volume)?;
    let delta_v: Vec<f64> = ops.value(&vols).data().iter().map(|&v| v.as_f64() - v_origin).collect();
    let batch = delta_v.len();
    let mut total = mse.clone();
    let mut physics = None;
    if cfg.lambda > 0.0 {
        let threshold = cfg.gate_threshold(v_origin);
        let gate: Vec<E> = delta_v.iter().map(|dv| E::lit(if dv.abs() > threshold { 1.0 } else { 0.0 })).collect();
        let dv = ops.add_scalar(&vols, E::lit(-v_origin));
        let gated = ops.mul(&ops.mul(&dv, &dv)?, &ops.constant(Tensor::new(&[batch], gate)?))?;
        let term = ops.mul_scalar(&ops.sum(&gated), E::lit(cfg.lambda / batch as f64));
        total = ops.add(&total, &term)?;
        physics = Some(term);
    }
    let mut cosine = None;
    if cfg.cosine_term_weight > 0.0 {
        let forces = forces.ok_or_else(|| {
            CoreError::contract("physics_loss", "cosine term enabled but no force field supplied")
        })?;
        let term = ops.mul_scalar(&ops.cosine_misalignment(pred, forces)?, E::lit(cfg.cosine_term_weight));
        total = ops.add(&total, &term)?;
        cosine = Some(term);
    }
    Ok(LossTerms { total, mse, physics, cosine, delta_v })
}
