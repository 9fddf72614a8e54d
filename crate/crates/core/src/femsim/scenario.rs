//! Random contact scenarios and dataset generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::femsim::material::Material;
use crate::femsim::solver::{stable_timestep, ExplicitSolver, SolverConfig};
use crate::meshkit::{Field3, GridMesh};

/// Randomization and sampling controls for generated sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Recorded frames per sequence.
    pub frames: usize,
    /// Time between recorded frames (s).
    pub sample_interval: f64,
    /// Upper bound of the total force of one contact patch (N).
    pub max_force: f64,
    /// Lower bound of a patch's peak force as a fraction of `max_force`.
    pub min_force_fraction: f64,
    pub min_patches: usize,
    pub max_patches: usize,
    /// Half-angle of the force-direction cone around -z (degrees).
    pub cone_half_angle_deg: f64,
    /// Probability that a patch is released (ramped back to zero) before the end.
    pub release_probability: f64,
    /// Probability that a sequence's first contact is a broad press (a
    /// rectangle of free top nodes) instead of a small patch.
    pub press_probability: f64,
    /// Side lengths (nodes) of press rectangles, drawn per axis from this range.
    pub press_extent: [usize; 2],
    /// Upper bound of a press's total force (N).
    pub press_max_force: f64,
    /// Scenario resamples allowed per sequence after a solver failure.
    pub max_retries: usize,
    pub solver: SolverConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            frames: 20,
            sample_interval: 0.1,
            max_force: 2e-4,
            min_force_fraction: 0.2,
            min_patches: 1,
            max_patches: 2,
            cone_half_angle_deg: 30.0,
            release_probability: 0.5,
            press_probability: 0.0,
            press_extent: [3, 7],
            press_max_force: 6e-3,
            max_retries: 8,
            solver: SolverConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if !(self.sample_interval > 0.0) {
            return bad(format!("sample_interval must be positive, got {}", self.sample_interval));
        }
        if !(self.max_force >= 0.0) {
            return bad(format!("max_force must be non-negative, got {}", self.max_force));
        }
        if !(0.0..=1.0).contains(&self.min_force_fraction) {
            return bad(format!("min_force_fraction must lie in [0, 1], got {}", self.min_force_fraction));
        }
        if self.min_patches == 0 || self.min_patches > self.max_patches {
            return bad(format!("need 1 <= min_patches <= max_patches, got {}..{}", self.min_patches, self.max_patches));
        }
        if !(0.0..90.0).contains(&self.cone_half_angle_deg) {
            return bad(format!("cone half-angle must lie in [0, 90), got {}", self.cone_half_angle_deg));
        }
        if !(0.0..=1.0).contains(&self.release_probability) {
            return bad(format!("release_probability must lie in [0, 1], got {}", self.release_probability));
        }
        if !(0.0..=1.0).contains(&self.press_probability) {
            return bad(format!("press_probability must lie in [0, 1], got {}", self.press_probability));
        }
        if self.press_extent[0] == 0 || self.press_extent[0] > self.press_extent[1] {
            return bad(format!("press_extent must be a non-empty range of positive sizes, got {:?}", self.press_extent));
        }
        if !(self.press_max_force >= 0.0) {
            return bad(format!("press_max_force must be non-negative, got {}", self.press_max_force));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 * self.sample_interval
    }
}

/// A set of nodes sharing one force vector schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub nodes: Vec<usize>,
    /// Unit direction of the force.
    pub direction: [f64; 3],
    /// Piecewise-linear `(time s, total magnitude N)` keyframes, time-sorted;
    /// zero before the first and constant after the last.
    pub schedule: Vec<(f64, f64)>,
}

impl Contact {
    pub fn magnitude_at(&self, t: f64) -> f64 {
        let s = &self.schedule;
        match s.iter().position(|&(tk, _)| tk > t) {
            None => s.last().map_or(0.0, |&(_, m)| m),
            Some(0) => 0.0,
            Some(i) => {
                let ((t0, m0), (t1, m1)) = (s[i - 1], s[i]);
                m0 + (m1 - m0) * (t - t0) / (t1 - t0)
            }
        }
    }

    pub fn peak(&self) -> f64 {
        self.schedule.iter().map(|&(_, m)| m).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub contacts: Vec<Contact>,
    pub duration: f64,
    pub sample_interval: f64,
}

impl Scenario {
    /// Nodal force field at time `t`; a patch's force is split evenly over its nodes.
    pub fn force_at(&self, mesh: &GridMesh, t: f64) -> Field3 {
        let mut f = Field3::for_mesh(mesh);
        for c in &self.contacts {
            let per_node = c.magnitude_at(t) / c.nodes.len() as f64;
            for &n in &c.nodes {
                f.add_at(n, c.direction.map(|d| d * per_node));
            }
        }
        f
    }

    /// Checks that every loaded node is a free top-surface node.
    pub fn validate(&self, mesh: &GridMesh) -> Result<()> {
        let top = mesh.dims()[2] - 1;
        for c in &self.contacts {
            if let Some(&bad) = c.nodes.iter().find(|&&n| n >= mesh.n_nodes() || !mesh.is_free(n) || mesh.node_ijk(n)[2] != top)
            {
                return Err(CoreError::Config(format!("contact node {bad} is not a free top-surface node")));
            }
        }
        Ok(())
    }
}

const PATCH_SHAPES: [[usize; 2]; 4] = [[1, 1], [2, 1], [1, 2], [2, 2]];

/// Draws a random scenario: 1–2 patches of 1–4 adjacent free top nodes
/// (optionally the first one a broad press), directions inside a cone
/// around -z, ramp-hold (optionally release) magnitude schedules.
pub fn sample_scenario(mesh: &GridMesh, cfg: &ScenarioConfig, rng: &mut impl Rng) -> Result<Scenario> {
    cfg.validate()?;
    let top = mesh.dims()[2] - 1;
    let free_top = |i: usize, j: usize| {
        i < mesh.dims()[0] && j < mesh.dims()[1] && mesh.is_free(mesh.node_index(i, j, top))
    };
    let anchors = mesh.top_free_nodes();
    if anchors.is_empty() {
        return Err(CoreError::Config("mesh has no free top-surface nodes to load".into()));
    }
    let duration = cfg.duration();
    let n_patches = rng.random_range(cfg.min_patches..=cfg.max_patches);
    let mut contacts = Vec::with_capacity(n_patches);
    let press = cfg.press_probability > 0.0 && rng.random_bool(cfg.press_probability);
    for p in 0..n_patches {
        let is_press = press && p == 0;
        let mut tries = 0usize;
        let nodes = loop {
            tries += 1;
            let anchor = anchors[rng.random_range(0..anchors.len())];
            let [i, j, _] = mesh.node_ijk(anchor);
            // Shapes that never fit (tiny meshes) degrade to a single node.
            let [sx, sy] = if tries > 1000 {
                [1, 1]
            } else if is_press {
                let [lo, hi] = cfg.press_extent;
                [rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
            } else {
                PATCH_SHAPES[rng.random_range(0..PATCH_SHAPES.len())]
            };
            let cells: Vec<(usize, usize)> = (0..sx).flat_map(|a| (0..sy).map(move |b| (i + a, j + b))).collect();
            if cells.iter().all(|&(a, b)| free_top(a, b)) {
                break cells.into_iter().map(|(a, b)| mesh.node_index(a, b, top)).collect::<Vec<_>>();
            }
        };
        let half = cfg.cone_half_angle_deg.to_radians();
        // Uniform over the spherical cap around -z.
        let cos_theta = 1.0 - rng.random::<f64>() * (1.0 - half.cos());
        let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
        let phi = rng.random::<f64>() * std::f64::consts::TAU;
        let direction = [sin_theta * phi.cos(), sin_theta * phi.sin(), -cos_theta];

        let bound = if is_press { cfg.press_max_force } else { cfg.max_force };
        let peak = bound * rng.random_range(cfg.min_force_fraction..=1.0);
        let start = rng.random_range(0.0..0.4) * duration;
        let ramp = rng.random_range(0.15..0.4) * duration;
        let mut schedule = vec![(start, 0.0), (start + ramp, peak)];
        if rng.random_bool(cfg.release_probability) {
            let hold = rng.random_range(0.05..0.3) * duration;
            let down = rng.random_range(0.1..0.3) * duration;
            schedule.push((start + ramp + hold, peak));
            schedule.push((start + ramp + hold + down, 0.0));
        }
        contacts.push(Contact { nodes, direction, schedule });
    }
    Ok(Scenario { contacts, duration, sample_interval: cfg.sample_interval })
}

/// One recorded instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f64,
    /// Applied nodal forces (N).
    pub force: Field3,
    /// Nodal displacements (mm).
    pub displacement: Field3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
}

impl Sequence {
    /// Largest total applied force magnitude over the sequence (N).
    pub fn max_force_magnitude(&self) -> f64 {
        self.force_magnitudes().into_iter().fold(0.0, f64::max)
    }

    /// Total applied force magnitude per frame (N): the norm of the summed nodal force.
    pub fn force_magnitudes(&self) -> Vec<f64> {
        self.frames
            .iter()
            .map(|fr| {
                let mut s = [0.0; 3];
                for n in 0..fr.force.n_nodes() {
                    let v = fr.force.get(n);
                    for i in 0..3 {
                        s[i] += v[i];
                    }
                }
                (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt()
            })
            .collect()
    }
}

/// Generated ground truth plus everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub mesh: GridMesh,
    pub material: Material,
    pub config: ScenarioConfig,
    pub seed: u64,
    /// Integration time step actually used (s).
    pub dt: f64,
    pub sequences: Vec<Sequence>,
}

impl SequenceDataset {
    pub fn n_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    /// A dataset over a subset of sequences (same mesh and metadata).
    pub fn subset(&self, indices: &[usize]) -> SequenceDataset {
        SequenceDataset {
            mesh: self.mesh.clone(),
            material: self.material.clone(),
            config: self.config.clone(),
            seed: self.seed,
            dt: self.dt,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }
}

/// Sub-step count and time step that divide the sample interval evenly
/// while respecting the stability bound.
pub fn integration_step(mesh: &GridMesh, material: &Material, cfg: &ScenarioConfig) -> Result<(usize, f64)> {
    let dt_max = stable_timestep(mesh, material, cfg.solver.safety)?;
    let substeps = (cfg.sample_interval / dt_max).ceil().max(1.0) as usize;
    Ok((substeps, cfg.sample_interval / substeps as f64))
}

/// Integrates one scenario and records frames at `t_j = (j + 1) · interval`.
/// Recorded values are rounded to `f32`, the storage precision.
pub fn simulate(mesh: &GridMesh, material: &Material, scenario: &Scenario, cfg: &ScenarioConfig) -> Result<Sequence> {
    scenario.validate(mesh)?;
    let (substeps, dt) = integration_step(mesh, material, cfg)?;
    let solver = ExplicitSolver::new(mesh, material, dt, cfg.solver.damping)?;
    let mut state = solver.initial_state();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut step_index = 0usize;
    for j in 0..cfg.frames {
        for _ in 0..substeps {
            let force = scenario.force_at(mesh, step_index as f64 * dt);
            solver.step(&mut state, &force)?;
            step_index += 1;
        }
        let t = (j + 1) as f64 * cfg.sample_interval;
        let mut force = scenario.force_at(mesh, t);
        let mut displacement = state.u.clone();
        force.round_to_f32();
        displacement.round_to_f32();
        frames.push(Frame { t, force, displacement });
    }
    Ok(Sequence { frames })
}

/// Per-sequence generator seeded from `(seed, sequence, attempt)`, so output
/// does not depend on how sequences are distributed over threads.
fn sequence_rng(seed: u64, sequence: usize, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sequence as u64) << 16) | attempt as u64);
    rng
}

pub fn generate_dataset(
    mesh: &GridMesh,
    material: &Material,
    n_sequences: usize,
    seed: u64,
    cfg: &ScenarioConfig,
) -> Result<SequenceDataset> {
    if n_sequences == 0 {
        return Err(CoreError::Config("n_sequences must be at least 1".into()));
    }
    cfg.validate()?;
    let (_, dt) = integration_step(mesh, material, cfg)?;
    let sequences = (0..n_sequences)
        .into_par_iter()
        .map(|s| {
            let mut last = String::new();
            for attempt in 0..=cfg.max_retries {
                let mut rng = sequence_rng(seed, s, attempt);
                let scenario = sample_scenario(mesh, cfg, &mut rng)?;
                match simulate(mesh, material, &scenario, cfg) {
                    Ok(seq) => return Ok(seq),
                    Err(e @ (CoreError::ElementInversion { .. } | CoreError::NonFinite { .. })) => last = e.to_string(),
                    Err(e) => return Err(e),
                }
            }
            Err(CoreError::ScenarioRejected { sequence: s, attempts: cfg.max_retries + 1, last })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceDataset {
        mesh: mesh.clone(),
        material: material.clone(),
        config: cfg.clone(),
        seed,
        dt,
        sequences,
    })
}
