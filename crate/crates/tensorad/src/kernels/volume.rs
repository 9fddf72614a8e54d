//! Deformed volume of a hexahedral node lattice.
//!
//! Every hex cell is split into six tetrahedra around one body diagonal; the
//! signed tet volumes (triple products) are summed per cell and the absolute
//! value of that sum is the cell volume. The split is conforming between
//! neighbouring cells, so the total is exact for affine deformations.
//!
//! Corner order is x-fastest: corner `c` sits at offset
//! `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.

use crate::error::{Result, TensorError};

/// Which body diagonal the six tetrahedra share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decomposition {
    /// Diagonal from corner 0 to corner 7.
    #[default]
    Primary,
    /// Mirror image (x reflected): diagonal from corner 1 to corner 6.
    Mirror,
}

/// `(corners, orientation)`: monotone edge paths 0 -> a -> b -> 7 through the
/// cube, signed by the parity of the axis permutation.
const PRIMARY_TETS: [([usize; 4], f64); 6] = [
    ([0, 1, 3, 7], 1.0),
    ([0, 2, 3, 7], -1.0),
    ([0, 2, 6, 7], 1.0),
    ([0, 4, 6, 7], -1.0),
    ([0, 4, 5, 7], 1.0),
    ([0, 1, 5, 7], -1.0),
];

fn tets(decomposition: Decomposition) -> [([usize; 4], f64); 6] {
    match decomposition {
        Decomposition::Primary => PRIMARY_TETS,
        Decomposition::Mirror => PRIMARY_TETS.map(|(c, s)| (c.map(|i| i ^ 1), -s)),
    }
}

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Volume functional over a fixed cell list.
#[derive(Debug, Clone, PartialEq)]
pub struct HexVolume {
    rest: Vec<[f64; 3]>,
    cells: Vec<[u32; 8]>,
    decomposition: Decomposition,
}

impl HexVolume {
    pub fn new(rest: Vec<[f64; 3]>, cells: Vec<[u32; 8]>) -> Result<Self> {
        let n = rest.len();
        if let Some(bad) = cells.iter().flatten().find(|&&i| i as usize >= n) {
            return Err(TensorError::invalid(
                "HexVolume::new",
                format!("cell references node {bad} but only {n} nodes exist"),
            ));
        }
        Ok(HexVolume {
            rest,
            cells,
            decomposition: Decomposition::Primary,
        })
    }

    pub fn with_decomposition(mut self, decomposition: Decomposition) -> Self {
        self.decomposition = decomposition;
        self
    }

    pub fn n_nodes(&self) -> usize {
        self.rest.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    fn corners(&self, cell: &[u32; 8], disp: &impl Fn(usize) -> [f64; 3]) -> [[f64; 3]; 8] {
        cell.map(|n| {
            let (r, u) = (self.rest[n as usize], disp(n as usize));
            [r[0] + u[0], r[1] + u[1], r[2] + u[2]]
        })
    }

    /// Signed six-times volume of one cell.
    fn cell_det(&self, p: &[[f64; 3]; 8]) -> f64 {
        tets(self.decomposition)
            .iter()
            .map(|&([a, b, c, d], s)| {
                let (e1, e2, e3) = (sub(p[b], p[a]), sub(p[c], p[a]), sub(p[d], p[a]));
                s * dot(e1, cross(e2, e3))
            })
            .sum()
    }

    /// Total deformed volume; `disp(n)` is the displacement of node `n`.
    pub fn volume(&self, disp: impl Fn(usize) -> [f64; 3]) -> f64 {
        self.cells
            .iter()
            .map(|cell| self.cell_det(&self.corners(cell, &disp)).abs() / 6.0)
            .sum()
    }

    /// Total volume and its gradient with respect to every nodal displacement.
    pub fn volume_with_grad(&self, disp: impl Fn(usize) -> [f64; 3]) -> (f64, Vec<[f64; 3]>) {
        let mut grad = vec![[0.0; 3]; self.rest.len()];
        let mut total = 0.0;
        let tets = tets(self.decomposition);
        for cell in &self.cells {
            let p = self.corners(cell, &disp);
            let det = self.cell_det(&p);
            total += det.abs() / 6.0;
            let scale = if det >= 0.0 { 1.0 / 6.0 } else { -1.0 / 6.0 };
            for &([a, b, c, d], s) in &tets {
                let (e1, e2, e3) = (sub(p[b], p[a]), sub(p[c], p[a]), sub(p[d], p[a]));
                let gb = cross(e2, e3);
                let gc = cross(e3, e1);
                let gd = cross(e1, e2);
                let w = s * scale;
                for k in 0..3 {
                    grad[cell[b] as usize][k] += w * gb[k];
                    grad[cell[c] as usize][k] += w * gc[k];
                    grad[cell[d] as usize][k] += w * gd[k];
                    grad[cell[a] as usize][k] -= w * (gb[k] + gc[k] + gd[k]);
                }
            }
        }
        (total, grad)
    }
}
