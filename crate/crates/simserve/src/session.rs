//! Session state and the two stepping engines.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use viscosurr_core::femsim::{integration_step, BodyState, ExplicitSolver, Material, ScenarioConfig};
use viscosurr_core::meshkit::{total_volume, Field3, GridMesh};
use viscosurr_core::surrogate::ModelInstance;

use crate::ServeError;

/// One entry of the sparse force list sent by clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeForce {
    /// Lattice coordinates `[i, j, k]`.
    pub node: [usize; 3],
    /// Force on that node (N).
    pub f: [f64; 3],
}

/// Client → server frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceFrame {
    pub forces: Vec<NodeForce>,
}

/// Server → client frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    /// Displacement (mm), node-major `[X][Y][Z][3]` order as `f32`.
    pub u: Vec<f32>,
    /// Volume change against the rest configuration (mm³).
    pub dv: f64,
    /// Compute time of this step (s).
    pub latency: f64,
}

/// Running totals over a session's steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub steps: u64,
    pub last_dv: f64,
    pub max_abs_dv: f64,
    pub total_latency: f64,
    pub max_latency: f64,
}

impl SessionStats {
    pub fn mean_latency(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.total_latency / self.steps as f64
        }
    }
}

pub enum Engine {
    Surrogate {
        model: Arc<ModelInstance>,
        /// The last `N_t` force frames, oldest first.
        window: VecDeque<Field3>,
    },
    Fem {
        solver: Box<ExplicitSolver>,
        state: Box<BodyState>,
        substeps: usize,
    },
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::Surrogate { .. } => "surrogate",
            Engine::Fem { .. } => "fem",
        }
    }
}

pub struct Session {
    mesh: Arc<GridMesh>,
    engine: Engine,
    surface: Vec<bool>,
    displacement: Field3,
    stats: SessionStats,
    failed: Option<String>,
}

/// Free nodes with at least one lattice neighbour that is missing or
/// unoccupied: the nodes a contact can reach.
pub fn free_surface_mask(mesh: &GridMesh) -> Vec<bool> {
    let dims = mesh.dims();
    let occ = mesh.occupancy();
    (0..mesh.n_nodes())
        .map(|n| {
            if !mesh.is_free(n) {
                return false;
            }
            let ijk = mesh.node_ijk(n);
            (0..3).any(|axis| {
                [-1i64, 1].iter().any(|&d| {
                    let c = ijk[axis] as i64 + d;
                    if c < 0 || c >= dims[axis] as i64 {
                        return true;
                    }
                    let mut nb = ijk;
                    nb[axis] = c as usize;
                    !occ[mesh.node_index(nb[0], nb[1], nb[2])]
                })
            })
        })
        .collect()
}

impl Session {
    /// Surrogate session; the window starts as `N_t` zero-force frames.
    pub fn surrogate(model: Arc<ModelInstance>) -> Self {
        let mesh = Arc::new(model.mesh().clone());
        let window = (0..model.spec.window()).map(|_| Field3::for_mesh(&mesh)).collect();
        Self::new(mesh, Engine::Surrogate { model, window })
    }

    /// Reference session integrating the FEM model one sample interval per step.
    pub fn fem(mesh: GridMesh, material: &Material, scenario: &ScenarioConfig) -> Result<Self, ServeError> {
        let (substeps, dt) = integration_step(&mesh, material, scenario).map_err(ServeError::bad_request)?;
        let solver = ExplicitSolver::new(&mesh, material, dt, scenario.solver.damping).map_err(ServeError::bad_request)?;
        let state = solver.initial_state();
        Ok(Self::new(
            Arc::new(mesh),
            Engine::Fem { solver: Box::new(solver), state: Box::new(state), substeps },
        ))
    }

    fn new(mesh: Arc<GridMesh>, engine: Engine) -> Self {
        Session {
            surface: free_surface_mask(&mesh),
            displacement: Field3::for_mesh(&mesh),
            mesh,
            engine,
            stats: SessionStats::default(),
            failed: None,
        }
    }

    pub fn mesh(&self) -> &Arc<GridMesh> {
        &self.mesh
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    pub fn displacement(&self) -> &Field3 {
        &self.displacement
    }

    pub fn failure(&self) -> Option<&str> {
        self.failed.as_deref()
    }

    pub fn window_len(&self) -> usize {
        match &self.engine {
            Engine::Surrogate { window, .. } => window.len(),
            Engine::Fem { .. } => 1,
        }
    }

    /// Densifies a sparse force list, rejecting nodes off the free surface.
    pub fn densify(&self, frame: &ForceFrame) -> Result<Field3, ServeError> {
        let dims = self.mesh.dims();
        let mut force = Field3::for_mesh(&self.mesh);
        for nf in &frame.forces {
            let [i, j, k] = nf.node;
            if i >= dims[0] || j >= dims[1] || k >= dims[2] {
                return Err(ServeError::bad_request(format!("node {:?} outside the {dims:?} grid", nf.node)));
            }
            if nf.f.iter().any(|x| !x.is_finite()) {
                return Err(ServeError::bad_request(format!("non-finite force on node {:?}", nf.node)));
            }
            let n = self.mesh.node_index(i, j, k);
            if !self.surface[n] {
                let why = if !self.mesh.occupancy()[n] {
                    "outside the body"
                } else if self.mesh.dirichlet()[n] {
                    "fixed"
                } else {
                    "interior"
                };
                return Err(ServeError::bad_request(format!(
                    "force on {why} node {:?} (index {n}); only free-surface nodes accept forces",
                    nf.node
                )));
            }
            force.add_at(n, nf.f);
        }
        Ok(force)
    }

    /// Advances the session by one frame.
    pub fn step(&mut self, frame: &ForceFrame) -> Result<StepResponse, ServeError> {
        if let Some(msg) = &self.failed {
            return Err(ServeError::conflict(format!("session failed earlier: {msg}")));
        }
        let force = self.densify(frame)?;
        let start = Instant::now();
        let u = match &mut self.engine {
            Engine::Surrogate { model, window } => {
                window.pop_front();
                window.push_back(force);
                let frames: Vec<&Field3> = window.iter().collect();
                model.forward_window(&frames).map_err(ServeError::internal)?
            }
            Engine::Fem { solver, state, substeps } => {
                for _ in 0..*substeps {
                    if let Err(e) = solver.step(state, &force) {
                        let msg = e.to_string();
                        self.failed = Some(msg.clone());
                        return Err(ServeError::conflict(format!("simulation failed, session closed: {msg}")));
                    }
                }
                state.u.clone()
            }
        };
        let latency = start.elapsed().as_secs_f64();
        let dv = total_volume(&self.mesh, &u).map_err(ServeError::internal)? - self.mesh.rest_volume();
        let out = StepResponse { u: u.values().iter().map(|&v| v as f32).collect(), dv, latency };
        self.displacement = u;
        let s = &mut self.stats;
        s.steps += 1;
        s.last_dv = dv;
        s.max_abs_dv = s.max_abs_dv.max(dv.abs());
        s.total_latency += latency;
        s.max_latency = s.max_latency.max(latency);
        Ok(out)
    }
}

/// Topology for client-side rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshInfo {
    pub dims: [usize; 3],
    /// Node spacing (mm).
    pub spacing: [f64; 3],
    /// Position of node `[0, 0, 0]` (mm).
    pub offset: [f64; 3],
    pub n_nodes: usize,
    /// Node ordering of `u`, `rest_positions` and the masks.
    pub layout: String,
    pub occupancy: Vec<bool>,
    pub dirichlet: Vec<bool>,
    /// Nodes that accept forces.
    pub free_surface: Vec<bool>,
    /// Flat `[x, y, z]` per node (mm).
    pub rest_positions: Vec<f64>,
    /// Volume of the undeformed body (mm³).
    pub rest_volume: f64,
    pub schema_tag: String,
}

impl MeshInfo {
    pub fn of(mesh: &GridMesh) -> Self {
        MeshInfo {
            dims: mesh.dims(),
            spacing: mesh.spacing(),
            offset: mesh.offset(),
            n_nodes: mesh.n_nodes(),
            layout: "node = (i * ny + j) * nz + k; 3 components per node".into(),
            occupancy: mesh.occupancy().to_vec(),
            dirichlet: mesh.dirichlet().to_vec(),
            free_surface: free_surface_mask(mesh),
            rest_positions: mesh.rest_positions().iter().flatten().copied().collect(),
            rest_volume: mesh.rest_volume(),
            schema_tag: mesh.schema_tag(),
        }
    }
}
