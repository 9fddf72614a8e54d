//! Constitutive constants and the reduced relaxation function.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One relaxation branch of the Prony series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PronyTerm {
    /// Relaxation modulus fraction (dimensionless).
    pub g: f64,
    /// Relaxation time (s).
    pub tau: f64,
}

/// User-supplied constants; everything else is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Neo-Hookean coefficient (MPa).
    pub c1: f64,
    /// Shear modulus used for the bulk modulus (MPa).
    pub mu: f64,
    /// Poisson ratio.
    pub nu: f64,
    /// Density (tonne/mm³).
    pub rho: f64,
    pub prony: Vec<PronyTerm>,
}

/// Quasilinear viscoelastic Neo-Hookean solid in the mm / N / MPa / s system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaterialParams", into = "MaterialParams")]
pub struct Material {
    pub c1: f64,
    pub mu: f64,
    pub nu: f64,
    /// Bulk modulus (MPa), derived from `mu` and `nu`.
    pub k: f64,
    pub rho: f64,
    pub prony: Vec<PronyTerm>,
    /// Long-term modulus fraction, `1 - Σ g_k`.
    pub g0: f64,
}

/// Density of water in tonne/mm³.
pub const WATER_DENSITY: f64 = 1e-9;

/// `K = 2μ(1 + ν) / (3(1 - 2ν))`.
pub fn derive_bulk_modulus(mu: f64, nu: f64) -> Result<f64> {
    if nu >= 0.5 {
        return Err(CoreError::Material(format!("Poisson ratio {nu} is at or beyond the incompressible limit 0.5")));
    }
    if !(nu >= 0.0) || !(mu > 0.0) {
        return Err(CoreError::Material(format!("need mu > 0 and 0 <= nu < 0.5, got mu = {mu}, nu = {nu}")));
    }
    Ok(2.0 * mu * (1.0 + nu) / (3.0 * (1.0 - 2.0 * nu)))
}

impl Material {
    pub fn new(c1: f64, mu: f64, nu: f64, rho: f64, prony: Vec<PronyTerm>) -> Result<Self> {
        if !(c1 > 0.0) {
            return Err(CoreError::Material(format!("C1 must be positive, got {c1}")));
        }
        if !(rho > 0.0) {
            return Err(CoreError::Material(format!("density must be positive, got {rho}")));
        }
        let k = derive_bulk_modulus(mu, nu)?;
        if let Some(bad) = prony.iter().find(|p| !(p.g > 0.0) || !(p.tau > 0.0)) {
            return Err(CoreError::Material(format!("Prony terms need g > 0 and tau > 0, got {bad:?}")));
        }
        let g0 = 1.0 - prony.iter().map(|p| p.g).sum::<f64>();
        if !(g0 > 0.0) {
            return Err(CoreError::Material(format!("Prony fractions sum to {} (must stay below 1)", 1.0 - g0)));
        }
        Ok(Material { c1, mu, nu, k, rho, prony, g0 })
    }

    /// Brain-tissue constants with relaxation times of 330 s and 11 s.
    pub fn paper() -> Self {
        Self::with_taus(330.0, 11.0)
    }

    /// Same constants with relaxation times scaled by 1/100 so that
    /// viscoelastic effects show up within seconds of simulated time.
    pub fn desk() -> Self {
        Self::with_taus(3.3, 0.11)
    }

    fn with_taus(tau1: f64, tau2: f64) -> Self {
        Material::new(
            0.0002,
            0.0004,
            0.42,
            WATER_DENSITY,
            vec![PronyTerm { g: 0.12, tau: tau1 }, PronyTerm { g: 0.8, tau: tau2 }],
        )
        .expect("built-in constants are valid")
    }

    /// Purely elastic variant (no relaxation branches).
    pub fn elastic(&self) -> Self {
        Material::new(self.c1, self.mu, self.nu, self.rho, Vec::new()).expect("constants already validated")
    }

    pub fn params(&self) -> MaterialParams {
        MaterialParams { c1: self.c1, mu: self.mu, nu: self.nu, rho: self.rho, prony: self.prony.clone() }
    }

    /// Small-strain Lamé constants `(λ, μ)` of the strain energy: linearizing
    /// `S = 2C1(I - C⁻¹) + K j (j - 1) C⁻¹` gives `σ = 4C1 ε + K tr(ε) I`.
    pub fn lame_small_strain(&self) -> (f64, f64) {
        (self.k, 2.0 * self.c1)
    }

    pub fn max_tau(&self) -> f64 {
        self.prony.iter().map(|p| p.tau).fold(0.0, f64::max)
    }

    pub fn min_tau(&self) -> f64 {
        self.prony.iter().map(|p| p.tau).fold(f64::INFINITY, f64::min)
    }
}

impl TryFrom<MaterialParams> for Material {
    type Error = CoreError;

    fn try_from(p: MaterialParams) -> Result<Self> {
        Material::new(p.c1, p.mu, p.nu, p.rho, p.prony)
    }
}

impl From<Material> for MaterialParams {
    fn from(m: Material) -> Self {
        m.params()
    }
}

/// `G(t) = g0 + Σ g_k exp(-t / τ_k)`.
pub fn relaxation_modulus(material: &Material, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(CoreError::contract("relaxation_modulus", format!("time must be non-negative, got {t}")));
    }
    Ok(material.g0 + material.prony.iter().map(|p| p.g * (-t / p.tau).exp()).sum::<f64>())
}
