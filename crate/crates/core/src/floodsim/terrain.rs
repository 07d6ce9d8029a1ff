use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TerrainConfig;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Synthetic terrain surrogate: elevation, roughness and a carved channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Terrain {
    pub rows: usize,
    pub cols: usize,
    /// Metres above datum, row-major.
    pub elevation: Vec<f64>,
    /// Manning-like roughness coefficient, strictly positive.
    pub roughness: Vec<f64>,
    pub channel_mask: Vec<bool>,
    /// Channel cells ordered from inlet (row 0) to outlet (last row).
    pub channel_path: Vec<usize>,
}

impl Terrain {
    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_cells();
        if self.elevation.len() != n || self.roughness.len() != n || self.channel_mask.len() != n {
            return Err(Error::dim("Terrain", n, self.elevation.len()));
        }
        if self.elevation.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("terrain elevation".into()));
        }
        if self.roughness.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Argument("roughness must be positive".into()));
        }
        if !self.channel_mask.iter().any(|&c| c) {
            return Err(Error::Argument("terrain has no channel cell".into()));
        }
        Ok(())
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> {
        let (r, c) = (i / self.cols, i % self.cols);
        let (rows, cols) = (self.rows, self.cols);
        [
            (r > 0).then(|| i - cols),
            (r + 1 < rows).then(|| i + cols),
            (c > 0).then(|| i - 1),
            (c + 1 < cols).then(|| i + 1),
        ]
        .into_iter()
        .flatten()
    }

    /// Lattice (4-neighbour) distance from every cell to the nearest channel cell.
    pub fn distance_to_channel(&self) -> Vec<u32> {
        let n = self.n_cells();
        let mut dist = vec![u32::MAX; n];
        let mut queue = VecDeque::new();
        for (i, &is_channel) in self.channel_mask.iter().enumerate() {
            if is_channel {
                dist[i] = 0;
                queue.push_back(i);
            }
        }
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if dist[j] == u32::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        dist
    }
}

/// Smooth tilted surface with a meandering channel carved from the top row to the bottom row.
pub fn generate_terrain(seed: u64, rows: usize, cols: usize) -> Result<Terrain> {
    generate_terrain_with(seed, rows, cols, &TerrainConfig::default())
}

pub fn generate_terrain_with(seed: u64, rows: usize, cols: usize, cfg: &TerrainConfig) -> Result<Terrain> {
    if rows * cols < 4 || rows == 0 || cols == 0 {
        return Err(Error::Argument(format!(
            "terrain needs at least 4 cells, got {rows}×{cols}"
        )));
    }
    let mut rng = rng::stream(seed, streams::TERRAIN);
    let n = rows * cols;

    // Low-frequency noise: a handful of random cosine modes.
    let modes: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let kx = rng.random_range(0.5..2.0) * std::f64::consts::PI / cols as f64;
            let ky = rng.random_range(0.5..2.0) * std::f64::consts::PI / rows as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.0);
            (kx, ky, phase, amp)
        })
        .collect();
    let amp_total: f64 = modes.iter().map(|m| m.3).sum();
    let cross_tilt = rng.random_range(-0.15..0.15);

    let mut elevation = vec![0.0; n];
    for r in 0..rows {
        for c in 0..cols {
            let noise: f64 = modes
                .iter()
                .map(|(kx, ky, ph, a)| a * (kx * c as f64 + ky * r as f64 + ph).cos())
                .sum::<f64>()
                / amp_total;
            let down = if rows > 1 { r as f64 / (rows - 1) as f64 } else { 0.0 };
            let across = if cols > 1 { c as f64 / (cols - 1) as f64 - 0.5 } else { 0.0 };
            elevation[r * cols + c] = cfg.relief_m * (1.0 - down)
                + cfg.relief_m * cross_tilt * across
                + cfg.noise_m * noise;
        }
    }

    // Meandering channel: one random-walk step sideways per row.
    let lo = cols / 3;
    let hi = (2 * cols).div_ceil(3).max(lo + 1).min(cols);
    let mut col = rng.random_range(lo..hi);
    let mut path = Vec::with_capacity(rows * 2);
    for r in 0..rows {
        path.push(r * cols + col);
        if r + 1 < rows {
            let step: i32 = rng.random_range(-1..=1);
            let next = (col as i32 + step).clamp(0, cols as i32 - 1) as usize;
            if next != col {
                path.push(r * cols + next);
                col = next;
            }
        }
    }
    let mut channel_mask = vec![false; n];
    for &i in &path {
        channel_mask[i] = true;
    }

    let mut terrain = Terrain {
        rows,
        cols,
        elevation,
        roughness: vec![0.0; n],
        channel_mask,
        channel_path: path,
    };

    // Carve: each channel cell sits below all its non-channel neighbours and
    // the bed never rises downstream.
    let original = terrain.elevation.clone();
    let mut previous = f64::INFINITY;
    for k in 0..terrain.channel_path.len() {
        let i = terrain.channel_path[k];
        let floor = terrain
            .neighbors(i)
            .filter(|&j| !terrain.channel_mask[j])
            .map(|j| original[j])
            .fold(original[i], f64::min);
        let bed = (floor - cfg.channel_depth_m).min(previous);
        terrain.elevation[i] = bed;
        previous = bed;
    }

    for i in 0..n {
        terrain.roughness[i] = if terrain.channel_mask[i] {
            cfg.channel_roughness
        } else {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            let wobble = 0.5 + 0.5 * (0.7 * c + 0.3 * r + modes[0].2).sin();
            cfg.roughness_base + cfg.roughness_spread * wobble
        };
    }
    terrain.validate()?;
    Ok(terrain)
}
