//! Structured hexahedral meshes, nodal vector fields and deformed volume.
//!
//! Nodes live on a regular `(Nx, Ny, Nz)` lattice with flat index
//! `(i * Ny + j) * Nz + k`. An occupancy mask selects the active tissue
//! nodes; a cell exists wherever all eight corners are active. Dense fields
//! keep inactive nodes at exactly zero so masked meshes and full boxes share
//! one tensor layout.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use viscosurr_tensorad::HexVolume;

use crate::error::{CoreError, Result};

/// Which nodes carry the zero-displacement constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedSpec {
    /// Bottom face and the four side faces fixed, top face free.
    #[default]
    PaperDefault,
    /// Only the bottom face fixed.
    BottomOnly,
    /// No constraints (free-floating body).
    None,
}

/// Eight lattice node indices in canonical corner order: corner `c` sits at
/// offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)` from the cell origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HexCell {
    pub node_indices: [u32; 8],
    /// Lattice coordinates of corner 0.
    pub origin: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct GridMesh {
    dims: [usize; 3],
    spacing: [f64; 3],
    offset: [f64; 3],
    occupancy: Vec<bool>,
    dirichlet: Vec<bool>,
    rest_positions: Vec<[f64; 3]>,
    cells: Vec<HexCell>,
    volume_kernel: Arc<HexVolume>,
}

impl PartialEq for GridMesh {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.spacing == other.spacing
            && self.offset == other.offset
            && self.occupancy == other.occupancy
            && self.dirichlet == other.dirichlet
    }
}

/// Builds a full-box mesh with the given boundary constraints.
pub fn build_box_mesh(dims: [usize; 3], spacing: [f64; 3], fixed: FixedSpec) -> Result<GridMesh> {
    let n: usize = dims.iter().product();
    let occupancy = vec![true; n];
    let mut dirichlet = vec![false; n];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let side = i == 0 || j == 0 || i == dims[0] - 1 || j == dims[1] - 1;
                let fixed_here = match fixed {
                    FixedSpec::PaperDefault => k == 0 || (side && k + 1 < dims[2]),
                    FixedSpec::BottomOnly => k == 0,
                    FixedSpec::None => false,
                };
                dirichlet[(i * dims[1] + j) * dims[2] + k] = fixed_here;
            }
        }
    }
    GridMesh::new(dims, spacing, [0.0; 3], occupancy, dirichlet)
}

impl GridMesh {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        offset: [f64; 3],
        occupancy: Vec<bool>,
        dirichlet: Vec<bool>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(CoreError::InvalidMesh(format!("every axis needs at least 2 nodes, got {dims:?}")));
        }
        if spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(CoreError::InvalidMesh(format!("spacing must be positive, got {spacing:?}")));
        }
        let n: usize = dims.iter().product();
        if occupancy.len() != n || dirichlet.len() != n {
            return Err(CoreError::InvalidMesh(format!(
                "masks must have {n} entries, got occupancy {} and dirichlet {}",
                occupancy.len(),
                dirichlet.len()
            )));
        }
        if let Some(bad) = (0..n).find(|&i| dirichlet[i] && !occupancy[i]) {
            return Err(CoreError::InvalidMesh(format!("node {bad} is fixed but not active")));
        }
        let mut rest_positions = Vec::with_capacity(n);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    rest_positions.push([
                        offset[0] + i as f64 * spacing[0],
                        offset[1] + j as f64 * spacing[1],
                        offset[2] + k as f64 * spacing[2],
                    ]);
                }
            }
        }
        let flat = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
        let mut cells = Vec::new();
        for i in 0..dims[0] - 1 {
            for j in 0..dims[1] - 1 {
                for k in 0..dims[2] - 1 {
                    let mut node_indices = [0u32; 8];
                    for (c, slot) in node_indices.iter_mut().enumerate() {
                        *slot = flat(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)) as u32;
                    }
                    if node_indices.iter().all(|&v| occupancy[v as usize]) {
                        cells.push(HexCell { node_indices, origin: [i, j, k] });
                    }
                }
            }
        }
        let volume_kernel = Arc::new(HexVolume::new(
            rest_positions.clone(),
            cells.iter().map(|c| c.node_indices).collect(),
        )?);
        Ok(GridMesh { dims, spacing, offset, occupancy, dirichlet, rest_positions, cells, volume_kernel })
    }

    /// Restricts the mesh to `occupancy`; constraints on deactivated nodes are dropped.
    pub fn with_occupancy(&self, occupancy: Vec<bool>) -> Result<Self> {
        if occupancy.len() != self.n_nodes() {
            return Err(CoreError::InvalidMesh(format!(
                "occupancy mask has {} entries, mesh has {} nodes",
                occupancy.len(),
                self.n_nodes()
            )));
        }
        let dirichlet = self.dirichlet.iter().zip(&occupancy).map(|(&d, &o)| d && o).collect();
        GridMesh::new(self.dims, self.spacing, self.offset, occupancy, dirichlet)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn offset(&self) -> [f64; 3] {
        self.offset
    }

    pub fn n_nodes(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn node_ijk(&self, n: usize) -> [usize; 3] {
        let k = n % self.dims[2];
        let j = (n / self.dims[2]) % self.dims[1];
        let i = n / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn dirichlet(&self) -> &[bool] {
        &self.dirichlet
    }

    pub fn rest_positions(&self) -> &[[f64; 3]] {
        &self.rest_positions
    }

    pub fn cells(&self) -> &[HexCell] {
        &self.cells
    }

    pub fn is_free(&self, n: usize) -> bool {
        self.occupancy[n] && !self.dirichlet[n]
    }

    pub fn active_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&n| self.occupancy[n]).collect()
    }

    /// Active, unconstrained nodes: the only nodes that can move.
    pub fn free_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&n| self.is_free(n)).collect()
    }

    /// Free nodes on the top layer (`k = Nz - 1`), where contact forces act.
    pub fn top_free_nodes(&self) -> Vec<usize> {
        let top = self.dims[2] - 1;
        self.free_nodes().into_iter().filter(|&n| self.node_ijk(n)[2] == top).collect()
    }

    pub fn h_min(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// The shared volume functional (also used by the autodiff volume op).
    pub fn volume_kernel(&self) -> &Arc<HexVolume> {
        &self.volume_kernel
    }

    /// Undeformed volume, the conservation reference.
    pub fn rest_volume(&self) -> f64 {
        self.volume_kernel.volume(|_| [0.0; 3])
    }

    /// Serializable description of the mesh (no derived data).
    pub fn descriptor(&self) -> MeshDescriptor {
        MeshDescriptor {
            dims: self.dims,
            spacing: self.spacing,
            offset: self.offset,
            occupancy: self.occupancy.iter().map(|&b| b as u8).collect(),
            dirichlet: self.dirichlet.iter().map(|&b| b as u8).collect(),
        }
    }

    pub fn from_descriptor(d: &MeshDescriptor) -> Result<Self> {
        GridMesh::new(
            d.dims,
            d.spacing,
            d.offset,
            d.occupancy.iter().map(|&b| b != 0).collect(),
            d.dirichlet.iter().map(|&b| b != 0).collect(),
        )
    }

    /// Short identifier used to refuse mixing artifacts from different meshes.
    pub fn schema_tag(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        for v in self.occupancy.iter().chain(&self.dirichlet) {
            h.update(&[*v as u8]);
        }
        format!(
            "grid{}x{}x{}@{}x{}x{}mm#{:08x}",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.spacing[0],
            self.spacing[1],
            self.spacing[2],
            h.finalize()
        )
    }
}

/// Plain mesh description exchanged with storage and clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshDescriptor {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub offset: [f64; 3],
    pub occupancy: Vec<u8>,
    pub dirichlet: Vec<u8>,
}

/// Dense nodal vector field laid out `(Nx, Ny, Nz, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl Field3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Field3 { dims, values: vec![0.0; 3 * dims.iter().product::<usize>()] }
    }

    pub fn for_mesh(mesh: &GridMesh) -> Self {
        Field3::zeros(mesh.dims())
    }

    pub fn from_values(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        let expected = 3 * dims.iter().product::<usize>();
        if values.len() != expected {
            return Err(CoreError::contract(
                "Field3::from_values",
                format!("{} values for dims {dims:?} (expected {expected})", values.len()),
            ));
        }
        Ok(Field3 { dims, values })
    }

    /// Builds from a channels-first `[3, X, Y, Z]` buffer.
    pub fn from_channels_first(dims: [usize; 3], data: &[f32]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != 3 * n {
            return Err(CoreError::contract(
                "Field3::from_channels_first",
                format!("{} values for dims {dims:?}", data.len()),
            ));
        }
        let mut values = vec![0.0; 3 * n];
        for c in 0..3 {
            for i in 0..n {
                values[3 * i + c] = data[c * n + i] as f64;
            }
        }
        Ok(Field3 { dims, values })
    }

    /// Writes the field into a channels-first `[3, X, Y, Z]` buffer.
    pub fn write_channels_first(&self, out: &mut [f32]) {
        let n = self.n_nodes();
        for c in 0..3 {
            for i in 0..n {
                out[c * n + i] = self.values[3 * i + c] as f32;
            }
        }
    }

    pub fn to_channels_first(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.values.len()];
        self.write_channels_first(&mut out);
        out
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len() / 3
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, n: usize) -> [f64; 3] {
        [self.values[3 * n], self.values[3 * n + 1], self.values[3 * n + 2]]
    }

    pub fn set(&mut self, n: usize, v: [f64; 3]) {
        self.values[3 * n..3 * n + 3].copy_from_slice(&v);
    }

    pub fn add_at(&mut self, n: usize, v: [f64; 3]) {
        for c in 0..3 {
            self.values[3 * n + c] += v[c];
        }
    }

    pub fn norm_at(&self, n: usize) -> f64 {
        let v = self.get(n);
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.n_nodes()).map(|n| self.norm_at(n)).fold(0.0, f64::max)
    }

    /// Errors unless the field belongs to `mesh`.
    pub fn check_mesh(&self, op: &'static str, mesh: &GridMesh) -> Result<()> {
        if self.dims != mesh.dims() {
            return Err(CoreError::contract(op, format!("field dims {:?} vs mesh dims {:?}", self.dims, mesh.dims())));
        }
        Ok(())
    }

    /// Zeroes every node where `keep` is false.
    pub fn mask(&mut self, keep: &[bool]) {
        for (n, &k) in keep.iter().enumerate() {
            if !k {
                self.values[3 * n..3 * n + 3].fill(0.0);
            }
        }
    }

    /// Rounds every value to the nearest `f32`, the storage precision.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}

/// Deformed volume of `mesh` under `displacement` (mm³).
pub fn total_volume(mesh: &GridMesh, displacement: &Field3) -> Result<f64> {
    displacement.check_mesh("total_volume", mesh)?;
    Ok(mesh.volume_kernel().volume(|n| displacement.get(n)))
}

/// Gradient of [`total_volume`] with respect to every nodal displacement.
pub fn total_volume_gradient(mesh: &GridMesh, displacement: &Field3) -> Result<(f64, Field3)> {
    displacement.check_mesh("total_volume_gradient", mesh)?;
    let (v, g) = mesh.volume_kernel().volume_with_grad(|n| displacement.get(n));
    let values = g.into_iter().flatten().collect();
    Ok((v, Field3::from_values(mesh.dims(), values)?))
}

/// One depth bin: all active nodes on a `k` layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLayer {
    /// `(height - z_k) / height`: 0 at the top surface, 1 at the bottom.
    pub normalized_depth: f64,
    pub nodes: Vec<usize>,
}

pub fn depth_layers(mesh: &GridMesh) -> Vec<DepthLayer> {
    let nz = mesh.dims()[2];
    let mut layers: Vec<DepthLayer> = (0..nz)
        .map(|k| DepthLayer { normalized_depth: (nz - 1 - k) as f64 / (nz - 1) as f64, nodes: Vec::new() })
        .collect();
    for n in mesh.active_nodes() {
        layers[mesh.node_ijk(n)[2]].nodes.push(n);
    }
    layers.reverse();
    layers
}
