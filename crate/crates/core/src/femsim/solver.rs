//! Explicit central-difference dynamics on trilinear hexahedra.
//!
//! Total Lagrangian formulation: internal nodal forces are
//! `f_a = Σ_gp F S ∇N_a w`, with `S` the viscoelastic second Piola-Kirchhoff
//! stress. The mass matrix is lumped (each cell gives `ρ V / 8` to every
//! corner) and damping is mass proportional, integrated semi-implicitly:
//!
//! ```text
//! a_n       = M⁻¹ (f_ext - f_int(u_n))
//! v_{n+1/2} = ((1 - α dt/2) v_{n-1/2} + dt a_n) / (1 + α dt/2)
//! u_{n+1}   = u_n + dt v_{n+1/2}
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::femsim::constitutive::{elastic_stress_unchecked, qlv_update, Mat3, QlvCoefficients, QlvState};
use crate::femsim::material::Material;
use crate::meshkit::{Field3, GridMesh};

/// Time-integration controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Mass-proportional damping coefficient α (1/s).
    pub damping: f64,
    /// Fraction of the stability bound used as the time step.
    pub safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { damping: 5.0, safety: 0.5 }
    }
}

/// `dt = safety · h_min / c_d` with dilatational wave speed
/// `c_d = sqrt((K + 4μ/3) / ρ)`.
pub fn stable_timestep(mesh: &GridMesh, material: &Material, safety: f64) -> Result<f64> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(CoreError::contract("stable_timestep", format!("safety must lie in (0, 1], got {safety}")));
    }
    let wave_speed = ((material.k + 4.0 * material.mu / 3.0) / material.rho).sqrt();
    Ok(safety * mesh.h_min() / wave_speed)
}

/// Complete dynamic state of the body.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyState {
    /// Displacement at `time` (mm).
    pub u: Field3,
    /// Velocity at `time - dt/2` (mm/s).
    pub v: Field3,
    /// Acceleration of the last completed step (mm/s²).
    pub a: Field3,
    /// One history record per Gauss point, cell-major.
    pub points: Vec<QlvState>,
    pub time: f64,
}

const GAUSS: f64 = 0.577_350_269_189_625_8;

/// Precomputed per-mesh operators for repeated stepping at a fixed `dt`.
#[derive(Debug, Clone)]
pub struct ExplicitSolver {
    material: Material,
    dt: f64,
    damping: f64,
    coeffs: QlvCoefficients,
    /// Reference shape-function gradients `[gauss point][corner]`.
    grads: [[[f64; 3]; 8]; 8],
    /// Quadrature weight times Jacobian determinant.
    weight: f64,
    cells: Vec<[usize; 8]>,
    inv_mass: Vec<f64>,
    movable: Vec<bool>,
    dims: [usize; 3],
}

impl ExplicitSolver {
    pub fn new(mesh: &GridMesh, material: &Material, dt: f64, damping: f64) -> Result<Self> {
        if !(damping >= 0.0) {
            return Err(CoreError::contract("ExplicitSolver::new", format!("damping must be non-negative, got {damping}")));
        }
        let coeffs = QlvCoefficients::new(material, dt)?;
        let h = mesh.spacing();
        let mut grads = [[[0.0; 3]; 8]; 8];
        for (g, row) in grads.iter_mut().enumerate() {
            let xi = [gauss_sign(g, 0) * GAUSS, gauss_sign(g, 1) * GAUSS, gauss_sign(g, 2) * GAUSS];
            for (a, grad) in row.iter_mut().enumerate() {
                let s = [gauss_sign(a, 0), gauss_sign(a, 1), gauss_sign(a, 2)];
                let f = [1.0 + s[0] * xi[0], 1.0 + s[1] * xi[1], 1.0 + s[2] * xi[2]];
                *grad = [
                    s[0] * f[1] * f[2] / 8.0 * 2.0 / h[0],
                    f[0] * s[1] * f[2] / 8.0 * 2.0 / h[1],
                    f[0] * f[1] * s[2] / 8.0 * 2.0 / h[2],
                ];
            }
        }
        let cell_volume = mesh.cell_volume();
        let mut mass = vec![0.0; mesh.n_nodes()];
        let cells: Vec<[usize; 8]> = mesh.cells().iter().map(|c| c.node_indices.map(|i| i as usize)).collect();
        for cell in &cells {
            for &n in cell {
                mass[n] += material.rho * cell_volume / 8.0;
            }
        }
        let movable: Vec<bool> = (0..mesh.n_nodes()).map(|n| mesh.is_free(n) && mass[n] > 0.0).collect();
        let inv_mass = mass.iter().zip(&movable).map(|(&m, &free)| if free { 1.0 / m } else { 0.0 }).collect();
        Ok(ExplicitSolver {
            material: material.clone(),
            dt,
            damping,
            coeffs,
            grads,
            weight: cell_volume / 8.0,
            cells,
            inv_mass,
            movable,
            dims: mesh.dims(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Nodes whose motion is integrated (active, unconstrained, with mass).
    pub fn movable(&self) -> &[bool] {
        &self.movable
    }

    /// Lumped nodal masses (tonne); zero at constrained nodes.
    pub fn lumped_mass(&self, n: usize) -> f64 {
        if self.inv_mass[n] > 0.0 {
            1.0 / self.inv_mass[n]
        } else {
            0.0
        }
    }

    /// Undeformed, unloaded, at rest.
    pub fn initial_state(&self) -> BodyState {
        BodyState {
            u: Field3::zeros(self.dims),
            v: Field3::zeros(self.dims),
            a: Field3::zeros(self.dims),
            points: vec![QlvState::new(self.coeffs.branches()); 8 * self.cells.len()],
            time: 0.0,
        }
    }

    /// Internal nodal forces at the current displacement. Advances the
    /// viscoelastic history, so call exactly once per time step.
    fn internal_forces(&self, state: &mut BodyState, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        let (c1, k) = (self.material.c1, self.material.k);
        let u = state.u.values();
        for (ci, cell) in self.cells.iter().enumerate() {
            let mut ue = [[0.0; 3]; 8];
            for (a, &n) in cell.iter().enumerate() {
                ue[a] = [u[3 * n], u[3 * n + 1], u[3 * n + 2]];
            }
            let mut fe = [[0.0; 3]; 8];
            for (g, grads) in self.grads.iter().enumerate() {
                let mut f = Mat3::identity();
                for (ua, dn) in ue.iter().zip(grads) {
                    for i in 0..3 {
                        for j in 0..3 {
                            f[(i, j)] += ua[i] * dn[j];
                        }
                    }
                }
                let det = f.determinant();
                if !(det > 0.0) {
                    return Err(if det.is_finite() {
                        CoreError::ElementInversion { element: ci, time: state.time, det }
                    } else {
                        CoreError::NonFinite { context: "deformation gradient", time: state.time }
                    });
                }
                let s_e = elastic_stress_unchecked(c1, k, &f, det);
                let s = qlv_update(&mut state.points[8 * ci + g], &s_e, &self.coeffs);
                let p = (f * s) * self.weight;
                for (fa, dn) in fe.iter_mut().zip(grads) {
                    for i in 0..3 {
                        fa[i] += p[(i, 0)] * dn[0] + p[(i, 1)] * dn[1] + p[(i, 2)] * dn[2];
                    }
                }
            }
            for (a, &n) in cell.iter().enumerate() {
                for i in 0..3 {
                    out[3 * n + i] += fe[a][i];
                }
            }
        }
        Ok(())
    }

    /// Advances `state` by one time step under `external_force` (N).
    pub fn step(&self, state: &mut BodyState, external_force: &Field3) -> Result<()> {
        if external_force.dims() != self.dims {
            return Err(CoreError::contract(
                "explicit_step",
                format!("force field dims {:?} vs mesh dims {:?}", external_force.dims(), self.dims),
            ));
        }
        let mut f_int = vec![0.0; 3 * self.inv_mass.len()];
        self.internal_forces(state, &mut f_int)?;
        let dt = self.dt;
        let damp_old = 1.0 - 0.5 * self.damping * dt;
        let damp_new = 1.0 / (1.0 + 0.5 * self.damping * dt);
        let f_ext = external_force.values();
        let (u, v, a) = (state.u.values_mut(), state.v.values_mut(), state.a.values_mut());
        let mut finite = true;
        for (n, &inv_m) in self.inv_mass.iter().enumerate() {
            for i in 3 * n..3 * n + 3 {
                if inv_m == 0.0 {
                    u[i] = 0.0;
                    v[i] = 0.0;
                    a[i] = 0.0;
                    continue;
                }
                a[i] = inv_m * (f_ext[i] - f_int[i]);
                v[i] = (damp_old * v[i] + dt * a[i]) * damp_new;
                u[i] += dt * v[i];
                finite &= u[i].is_finite();
            }
        }
        state.time += dt;
        if !finite {
            return Err(CoreError::NonFinite { context: "displacement", time: state.time });
        }
        Ok(())
    }

    /// Total linear momentum `Σ m v` (tonne·mm/s).
    pub fn momentum(&self, state: &BodyState) -> [f64; 3] {
        let mut p = [0.0; 3];
        for n in 0..self.inv_mass.len() {
            let m = self.lumped_mass(n);
            let v = state.v.get(n);
            for i in 0..3 {
                p[i] += m * v[i];
            }
        }
        p
    }
}

#[inline]
fn gauss_sign(corner: usize, axis: usize) -> f64 {
    if (corner >> axis) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// One time step from `body`, building the operators on the fly. Prefer
/// [`ExplicitSolver`] when stepping repeatedly.
pub fn explicit_step(
    body: &BodyState,
    mesh: &GridMesh,
    material: &Material,
    external_force: &Field3,
    dt: f64,
    damping: f64,
) -> Result<BodyState> {
    let solver = ExplicitSolver::new(mesh, material, dt, damping)?;
    let mut next = body.clone();
    solver.step(&mut next, external_force)?;
    Ok(next)
}
