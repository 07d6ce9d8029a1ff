//! Explicit diffusion-wave surrogate on the 4-neighbour lattice.
//!
//! Water moves between neighbours in proportion to the water-surface
//! difference, with a Manning-flavoured conductance evaluated at the upwind
//! cell. Boundaries are closed, so the only source is rain.

use super::config::SimConfig;
use super::terrain::Terrain;
use crate::error::{Error, Result};

/// Largest conductance-weighted time step allowed per substep.
const STABILITY: f64 = 0.25;

fn lattice_edges(terrain: &Terrain) -> Vec<(usize, usize)> {
    let (rows, cols) = (terrain.rows, terrain.cols);
    let mut edges = Vec::with_capacity(2 * rows * cols);
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
    edges
}

/// Advances `depth` by one frame of length `dt` using default simulation settings.
pub fn step_flood(depth: &[f64], terrain: &Terrain, rain: &[f64], dt: f64) -> Result<Vec<f64>> {
    step_flood_with(depth, terrain, rain, dt, &SimConfig::default())
}

/// One frame: lateral exchange with adaptive substeps, then rain.
pub fn step_flood_with(
    depth: &[f64],
    terrain: &Terrain,
    rain: &[f64],
    dt: f64,
    sim: &SimConfig,
) -> Result<Vec<f64>> {
    let n = terrain.n_cells();
    if depth.len() != n || rain.len() != n {
        return Err(Error::dim("step_flood", n, depth.len().min(rain.len())));
    }
    if depth.iter().any(|&d| !(d >= 0.0)) {
        return Err(Error::Argument("depth must be non-negative and finite".into()));
    }
    if rain.iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::Argument("rain must be non-negative and finite".into()));
    }
    let edges = lattice_edges(terrain);
    let mut h = depth.to_vec();
    let mut conductance = vec![0.0; edges.len()];
    let mut flux = vec![0.0; edges.len()];
    let mut upwind = vec![0usize; edges.len()];
    let mut k_sum = vec![0.0; n];
    let mut outflow = vec![0.0; n];

    let mut remaining = dt;
    let mut substeps = 0;
    while remaining > 0.0 {
        substeps += 1;
        k_sum.iter_mut().for_each(|v| *v = 0.0);
        for (e, &(a, b)) in edges.iter().enumerate() {
            let wa = terrain.elevation[a] + h[a];
            let wb = terrain.elevation[b] + h[b];
            let up = if wa >= wb { a } else { b };
            let k = if h[up] > 0.0 {
                sim.conductance * h[up].powf(5.0 / 3.0) / terrain.roughness[up]
            } else {
                0.0
            };
            conductance[e] = k;
            upwind[e] = up;
            flux[e] = k * (wa - wb).abs();
            k_sum[a] += k;
            k_sum[b] += k;
        }
        let k_max = k_sum.iter().copied().fold(0.0, f64::max);
        let mut sub_dt = if k_max > 0.0 {
            (STABILITY / k_max).min(remaining)
        } else {
            remaining
        };
        if substeps >= sim.max_substeps {
            // Out of budget: finish the frame; clipping below keeps depths valid.
            sub_dt = remaining;
        }

        outflow.iter_mut().for_each(|v| *v = 0.0);
        for (e, &up) in upwind.iter().enumerate() {
            outflow[up] += flux[e] * sub_dt;
        }
        for (e, &(a, b)) in edges.iter().enumerate() {
            if flux[e] == 0.0 {
                continue;
            }
            let up = upwind[e];
            let down = if up == a { b } else { a };
            let scale = if outflow[up] > h[up] { h[up] / outflow[up] } else { 1.0 };
            let moved = flux[e] * sub_dt * scale;
            h[up] -= moved;
            h[down] += moved;
        }
        for v in &mut h {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        remaining -= sub_dt;
        if substeps >= sim.max_substeps {
            break;
        }
    }

    for (v, r) in h.iter_mut().zip(rain) {
        *v += r;
    }
    Ok(h)
}
