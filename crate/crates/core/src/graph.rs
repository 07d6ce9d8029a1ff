//! Candidate-location graph over the simulation grid.
//!
//! Cells are indexed row-major (`index = row * cols + col`). The graph is a
//! 4-neighbour lattice, optionally augmented with diagonal downslope edges.

use serde::{Deserialize, Serialize};

use crate::diffkit::Matrix;
use crate::error::{Error, Result};

/// How `A + I` is normalised before it is used by the graph convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `D^(-1/2) (A + I) D^(-1/2)`.
    #[default]
    Sym,
    /// `D^(-1) (A + I)`; every row sums to one.
    Row,
}

/// Compressed sparse rows of a square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_dense(m: &Matrix) -> Self {
        let n = m.rows();
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for r in 0..n {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `self · x`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n {
            return Err(Error::dim("SparseMatrix::apply", self.n, x.rows()));
        }
        let mut out = Matrix::zeros(self.n, x.cols());
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = self.values[k];
                let src = x.row(self.col_idx[k]);
                for (o, s) in out.row_mut(r).iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · x`.
    pub fn apply_transpose(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n {
            return Err(Error::dim("SparseMatrix::apply_transpose", self.n, x.rows()));
        }
        let mut out = Matrix::zeros(self.n, x.cols());
        for r in 0..self.n {
            let src = x.row(r).to_vec();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let v = self.values[k];
                for (o, s) in out.row_mut(self.col_idx[k]).iter_mut().zip(&src) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct CellGraph {
    rows: usize,
    cols: usize,
    cell_size: f64,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    normalization: Normalization,
    norm_adj: Matrix,
    sparse: SparseMatrix,
}

/// 4-neighbour lattice with unit cell size and symmetric normalisation.
pub fn build_grid_graph(rows: usize, cols: usize) -> Result<CellGraph> {
    CellGraph::grid(rows, cols, 1.0, Normalization::Sym)
}

/// Normalised adjacency with self-loops.
pub fn normalize_adjacency(g: &CellGraph, mode: Normalization) -> Matrix {
    let n = g.n_cells();
    let degree: Vec<f64> = g.neighbors.iter().map(|nb| nb.len() as f64 + 1.0).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let targets = std::iter::once(i).chain(g.neighbors[i].iter().copied());
        for j in targets {
            let v = match mode {
                Normalization::Sym => 1.0 / (degree[i] * degree[j]).sqrt(),
                Normalization::Row => 1.0 / degree[i],
            };
            out.set(i, j, v);
        }
    }
    out
}

impl CellGraph {
    pub fn grid(rows: usize, cols: usize, cell_size: f64, normalization: Normalization) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument(format!(
                "grid dimensions must be positive, got {rows}×{cols}"
            )));
        }
        if !(cell_size > 0.0) {
            return Err(Error::Argument(format!("cell size must be positive, got {cell_size}")));
        }
        let n = rows * cols;
        let mut edges = Vec::with_capacity(2 * n);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        let mut g = Self {
            rows,
            cols,
            cell_size,
            edges,
            neighbors: Vec::new(),
            normalization,
            norm_adj: Matrix::zeros(0, 0),
            sparse: SparseMatrix::from_dense(&Matrix::zeros(0, 0)),
        };
        g.rebuild();
        Ok(g)
    }

    /// Adds an edge from each cell to its lowest diagonal neighbour when that
    /// neighbour is strictly lower than the cell and every orthogonal neighbour.
    pub fn add_downslope_edges(&mut self, elevation: &[f64]) -> Result<()> {
        if elevation.len() != self.n_cells() {
            return Err(Error::dim("add_downslope_edges", self.n_cells(), elevation.len()));
        }
        let mut extra = Vec::new();
        for r in 0..self.rows as isize {
            for c in 0..self.cols as isize {
                let i = self.index(r as usize, c as usize);
                let lowest_orth = self.neighbors[i]
                    .iter()
                    .map(|&j| elevation[j])
                    .fold(elevation[i], f64::min);
                let mut best: Option<(f64, usize)> = None;
                for (dr, dc) in [(-1, -1), (-1, 1), (1, -1), (1, 1)] {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= self.rows as isize || cc >= self.cols as isize {
                        continue;
                    }
                    let j = self.index(rr as usize, cc as usize);
                    if elevation[j] < lowest_orth && best.is_none_or(|(e, _)| elevation[j] < e) {
                        best = Some((elevation[j], j));
                    }
                }
                if let Some((_, j)) = best {
                    let e = (i.min(j), i.max(j));
                    if !self.edges.contains(&e) && !extra.contains(&e) {
                        extra.push(e);
                    }
                }
            }
        }
        self.edges.extend(extra);
        self.rebuild();
        Ok(())
    }

    fn rebuild(&mut self) {
        let n = self.n_cells();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        self.neighbors = neighbors;
        self.norm_adj = normalize_adjacency(self, self.normalization);
        self.sparse = SparseMatrix::from_dense(&self.norm_adj);
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Grid coordinate `(row, col)` of a cell.
    #[inline]
    pub fn coord(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }

    /// Real-valued cell centre `(x, y)`.
    pub fn center(&self, i: usize) -> (f64, f64) {
        let (r, c) = self.coord(i);
        (
            (c as f64 + 0.5) * self.cell_size,
            (r as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.n_cells()).map(|i| self.center(i)).collect()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (xa, ya) = self.center(a);
        let (xb, yb) = self.center(b);
        (xa - xb).hypot(ya - yb)
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Orthogonal lattice neighbours only, regardless of extra edges.
    pub fn lattice_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = self.coord(i);
        let rows = self.rows;
        let cols = self.cols;
        [
            (r > 0).then(|| i - cols),
            (r + 1 < rows).then(|| i + cols),
            (c > 0).then(|| i - 1),
            (c + 1 < cols).then(|| i + 1),
        ]
        .into_iter()
        .flatten()
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn norm_adj(&self) -> &Matrix {
        &self.norm_adj
    }

    pub fn sparse_adj(&self) -> &SparseMatrix {
        &self.sparse
    }
}
