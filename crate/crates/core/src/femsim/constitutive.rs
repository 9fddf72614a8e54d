//! Neo-Hookean elastic stress and the recursive quasilinear viscoelastic update.
//!
//! Strain energy: `W = C1 (I1 - 3 - 2 ln j) + K/2 (j - 1)²` with `I1 = tr C`,
//! `j = det F`, `C = FᵀF`. Using `∂I1/∂C = I` and `∂j/∂C = j C⁻¹ / 2`, the
//! second Piola-Kirchhoff stress `S = 2 ∂W/∂C` is
//!
//! ```text
//! S_e = 2 C1 (I - C⁻¹) + K j (j - 1) C⁻¹
//! ```
//!
//! The hereditary integral `S(t) = ∫ G(t - s) dS_e(s)` with a Prony-series
//! `G` is advanced by one internal variable per branch, assuming `S_e`
//! varies linearly inside each step:
//!
//! ```text
//! H_k ← e^(-dt/τ_k) H_k + g_k (1 - e^(-dt/τ_k)) / (dt/τ_k) (S_e,new - S_e,prev)
//! S    = g0 S_e,new + Σ H_k
//! ```

use nalgebra::Matrix3;

use crate::error::{CoreError, Result};
use crate::femsim::material::Material;

pub type Mat3 = Matrix3<f64>;

/// Elastic second Piola-Kirchhoff stress for deformation gradient `f`.
pub fn elastic_stress(material: &Material, f: &Mat3) -> Result<Mat3> {
    let j = f.determinant();
    if !(j > 0.0) {
        return Err(CoreError::contract("elastic_stress", format!("det F = {j:.3e} (element inverted)")));
    }
    Ok(elastic_stress_unchecked(material.c1, material.k, f, j))
}

/// Stress for a deformation gradient already known to have `det F = j > 0`.
#[inline]
pub(crate) fn elastic_stress_unchecked(c1: f64, k: f64, f: &Mat3, j: f64) -> Mat3 {
    let c = f.transpose() * f;
    // det C = j², so the adjugate divided by j² is the inverse.
    let c_inv = adjugate_sym(&c) / (j * j);
    (Mat3::identity() - c_inv) * (2.0 * c1) + c_inv * (k * j * (j - 1.0))
}

/// Adjugate of a symmetric 3×3 matrix.
#[inline]
fn adjugate_sym(c: &Mat3) -> Mat3 {
    let a00 = c[(1, 1)] * c[(2, 2)] - c[(1, 2)] * c[(1, 2)];
    let a11 = c[(0, 0)] * c[(2, 2)] - c[(0, 2)] * c[(0, 2)];
    let a22 = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(0, 1)];
    let a01 = c[(0, 2)] * c[(1, 2)] - c[(0, 1)] * c[(2, 2)];
    let a02 = c[(0, 1)] * c[(1, 2)] - c[(0, 2)] * c[(1, 1)];
    let a12 = c[(0, 1)] * c[(0, 2)] - c[(0, 0)] * c[(1, 2)];
    Mat3::new(a00, a01, a02, a01, a11, a12, a02, a12, a22)
}

/// Strain energy density `W(F)` (MPa = mJ/mm³).
pub fn strain_energy(material: &Material, f: &Mat3) -> f64 {
    let j = f.determinant();
    let i1 = (f.transpose() * f).trace();
    material.c1 * (i1 - 3.0 - 2.0 * j.ln()) + 0.5 * material.k * (j - 1.0) * (j - 1.0)
}

/// Per-step decay and gain factors of every relaxation branch.
#[derive(Debug, Clone, PartialEq)]
pub struct QlvCoefficients {
    pub g0: f64,
    pub decay: Vec<f64>,
    pub gain: Vec<f64>,
}

impl QlvCoefficients {
    pub fn new(material: &Material, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(CoreError::contract("QlvCoefficients::new", format!("time step must be positive, got {dt}")));
        }
        let mut decay = Vec::with_capacity(material.prony.len());
        let mut gain = Vec::with_capacity(material.prony.len());
        for p in &material.prony {
            let x = dt / p.tau;
            decay.push((-x).exp());
            // (1 - e^-x) / x without cancellation for tiny x.
            gain.push(p.g * if x < 1e-8 { 1.0 - 0.5 * x } else { -(-x).exp_m1() / x });
        }
        Ok(QlvCoefficients { g0: material.g0, decay, gain })
    }

    pub fn branches(&self) -> usize {
        self.decay.len()
    }
}

/// History of one material point: the previous elastic stress and one
/// internal stress per relaxation branch.
#[derive(Debug, Clone, PartialEq)]
pub struct QlvState {
    pub prev_elastic: Mat3,
    pub history: Vec<Mat3>,
}

impl QlvState {
    pub fn new(branches: usize) -> Self {
        QlvState { prev_elastic: Mat3::zeros(), history: vec![Mat3::zeros(); branches] }
    }
}

/// Advances the history by one step and returns the total stress.
pub fn qlv_update(state: &mut QlvState, elastic_new: &Mat3, coeffs: &QlvCoefficients) -> Mat3 {
    let increment = elastic_new - state.prev_elastic;
    let mut total = elastic_new * coeffs.g0;
    for ((h, &d), &g) in state.history.iter_mut().zip(&coeffs.decay).zip(&coeffs.gain) {
        *h = *h * d + increment * g;
        total += *h;
    }
    state.prev_elastic = *elastic_new;
    total
}
