//! Non-learned placements, classical imputers, exact solvers and
//! inverse-weighted heuristics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffkit::Matrix;
use crate::error::{Error, Result};
use crate::floodsim::{EvacTask, Region};
use crate::selector::PlacementVector;

/// Power used by both imputers.
pub const IDW_POWER: f64 = 2.0;

// ---------------------------------------------------------------- placement

pub fn fixed_placement(n_cells: usize, cells: &[usize]) -> Result<PlacementVector> {
    PlacementVector::from_indices(n_cells, cells)
}

/// Stand-in for stream gauges: `k` channel cells spread evenly from the
/// highest (inlet) to the lowest (outlet) channel cell.
pub fn channel_gauges(region: &Region, k: usize) -> Result<Vec<usize>> {
    let mut channel: Vec<usize> = (0..region.n_cells()).filter(|&i| region.distance_to_channel[i] == 0).collect();
    if channel.len() < k {
        return Err(Error::Argument(format!("{} channel cells cannot host {k} gauges", channel.len())));
    }
    let elev = &region.terrain.elevation;
    channel.sort_by(|&a, &b| elev[b].total_cmp(&elev[a]).then(a.cmp(&b)));
    if k == 1 {
        return Ok(vec![channel[0]]);
    }
    let last = channel.len() - 1;
    Ok((0..k).map(|i| channel[(i * last + (k - 1) / 2) / (k - 1)]).collect())
}

/// Row per cell, columns are every (frame, feature) pair.
pub fn cell_feature_matrix(frames: &[Matrix]) -> Result<Matrix> {
    let first = frames.first().ok_or_else(|| Error::Argument("no frames".into()))?;
    let refs: Vec<&Matrix> = frames.iter().collect();
    if frames.iter().any(|f| f.rows() != first.rows()) {
        return Err(Error::Argument("frames disagree on cell count".into()));
    }
    Matrix::hcat(&refs)
}

/// Column-pivoted QR selection over the leading principal components of the
/// centred cell-feature matrix.
pub fn pca_placement(x: &Matrix, k: usize) -> Result<PlacementVector> {
    let (n, d) = x.shape();
    if k > n {
        return Err(Error::Argument(format!("budget {k} exceeds {n} cells")));
    }
    let mut centred = DMatrix::from_row_slice(n, d, x.data());
    for mut col in centred.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let scale = centred.amax();
    if !scale.is_finite() {
        return Err(Error::NonFinite("pca_placement features".into()));
    }
    if scale == 0.0 {
        log::warn!("pca_placement: features are constant, falling back to the first {k} cells");
        return PlacementVector::from_indices(n, &(0..k).collect::<Vec<_>>());
    }
    let svd = centred.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let r = k.min(svd.singular_values.len());
    // Loadings: one r-vector per cell, weighted by component strength.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let loadings: Vec<Vec<f64>> = (0..n)
        .map(|i| order[..r].iter().map(|&c| u[(i, c)] * svd.singular_values[c]).collect())
        .collect();
    let picks = pivoted_columns(&loadings, k);
    PlacementVector::from_indices(n, &picks)
}

/// Greedy column-pivoted Gram-Schmidt: repeatedly take the vector with the
/// largest residual norm (ties to lower index) and project it out of the rest.
pub fn pivoted_columns(vectors: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut resid: Vec<Vec<f64>> = vectors.to_vec();
    let mut free: Vec<bool> = vec![true; vectors.len()];
    let mut picks = Vec::with_capacity(k);
    let tol = 1e-12 * vectors.iter().map(|v| norm(v)).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for _ in 0..k.min(vectors.len()) {
        let mut best = None;
        let mut best_norm = -1.0;
        for (i, v) in resid.iter().enumerate() {
            let nv = norm(v);
            let nv = if nv <= tol { 0.0 } else { nv };
            if free[i] && nv > best_norm {
                best = Some(i);
                best_norm = nv;
            }
        }
        let p = best.expect("fewer free columns than picks");
        free[p] = false;
        picks.push(p);
        if best_norm > 0.0 {
            let q: Vec<f64> = resid[p].iter().map(|v| v / best_norm).collect();
            for (i, v) in resid.iter_mut().enumerate() {
                if free[i] {
                    let dot: f64 = v.iter().zip(&q).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(&q).for_each(|(a, b)| *a -= dot * b);
                }
            }
        }
    }
    picks
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- imputation

fn check_observed(observed: &[(usize, f64)], n: usize) -> Result<()> {
    if observed.is_empty() {
        return Err(Error::Argument("imputation needs at least one observed cell".into()));
    }
    if let Some(&(c, _)) = observed.iter().find(|(c, _)| *c >= n) {
        return Err(Error::Argument(format!("observed cell {c} outside {n} cells")));
    }
    if observed.iter().any(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite("observed value".into()));
    }
    Ok(())
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

fn idw_at(target: (f64, f64), sites: &[(usize, f64)], centers: &[(f64, f64)], power: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &(c, v) in sites {
        let w = dist(target, centers[c]).powf(-power);
        num += w * v;
        den += w;
    }
    num / den
}

/// Inverse-distance weighting over all observed cells. Observed cells keep their own value.
pub fn idw_impute(observed: &[(usize, f64)], centers: &[(f64, f64)], power: f64) -> Result<Vec<f64>> {
    check_observed(observed, centers.len())?;
    if power <= 0.0 || !power.is_finite() {
        return Err(Error::Argument(format!("idw power must be positive, got {power}")));
    }
    Ok((0..centers.len())
        .map(|i| match observed.iter().find(|(c, _)| *c == i) {
            Some(&(_, v)) => v,
            None => idw_at(centers[i], observed, centers, power),
        })
        .collect())
}

/// Inverse-distance weighting over each cell's `k` nearest observed cells;
/// equal distances prefer the lower cell index.
pub fn knn_impute(observed: &[(usize, f64)], centers: &[(f64, f64)], k: usize) -> Result<Vec<f64>> {
    check_observed(observed, centers.len())?;
    if k == 0 || k > observed.len() {
        return Err(Error::Argument(format!("k = {k} with {} observed cells", observed.len())));
    }
    let mut sites = observed.to_vec();
    Ok((0..centers.len())
        .map(|i| {
            if let Some(&(_, v)) = observed.iter().find(|(c, _)| *c == i) {
                return v;
            }
            sites.sort_by(|a, b| {
                dist(centers[i], centers[a.0])
                    .total_cmp(&dist(centers[i], centers[b.0]))
                    .then(a.0.cmp(&b.0))
            });
            idw_at(centers[i], &sites[..k], centers, IDW_POWER)
        })
        .collect())
}

// ---------------------------------------------------------------- evacuation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactAllocation {
    pub d: Vec<u32>,
}

impl ExactAllocation {
    pub fn cost(&self, c: &[f64]) -> f64 {
        self.d.iter().zip(c).map(|(&d, c)| d as f64 * c).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.d.iter().map(|&d| d as f64).collect()
    }
}

fn check_route_costs(c: &[f64], task: &EvacTask) -> Result<()> {
    if c.len() != task.n_routes() {
        return Err(Error::dim("route costs", task.n_routes(), c.len()));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("route costs".into()));
    }
    Ok(())
}

/// Optimal integer allocation: cheapest routes first, each taking what its
/// shelter can still hold. Exact for a single origin with shelter capacities.
pub fn solve_evac_exact(c: &[f64], task: &EvacTask) -> Result<ExactAllocation> {
    check_route_costs(c, task)?;
    if task.total_capacity() < task.demand as u64 {
        return Err(Error::Infeasible(format!("demand {} exceeds total shelter capacity {}", task.demand, task.total_capacity())));
    }
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| c[a].total_cmp(&c[b]).then(a.cmp(&b)));
    let mut room = task.shelter_caps.clone();
    let mut left = task.demand;
    let mut d = vec![0; c.len()];
    for p in order {
        let s = task.routes[p].shelter;
        let take = left.min(room[s]);
        d[p] = take;
        room[s] -= take;
        left -= take;
    }
    Ok(ExactAllocation { d })
}

/// Routes grouped by shelter.
fn routes_by_shelter(task: &EvacTask) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); task.n_shelters()];
    for (p, r) in task.routes.iter().enumerate() {
        groups[r.shelter].push(p);
    }
    groups
}

/// Splits `demand` over `active` routes in proportion to `weights`, freezing
/// any shelter that would overflow at exactly its capacity and re-splitting
/// the remainder among the rest.
fn proportional_fill(weights: &[f64], task: &EvacTask, demand: f64) -> Result<Vec<f64>> {
    let groups = routes_by_shelter(task);
    let mut d = vec![0.0; weights.len()];
    let mut open = vec![true; task.n_shelters()];
    let mut left = demand;
    loop {
        let active: Vec<usize> = (0..weights.len()).filter(|&p| open[task.routes[p].shelter]).collect();
        if left <= 0.0 {
            break;
        }
        let mut w: Vec<f64> = active.iter().map(|&p| weights[p]).collect();
        let total: f64 = w.iter().sum();
        if active.is_empty() {
            return Err(Error::Infeasible(format!("demand {} exceeds total shelter capacity {}", task.demand, task.total_capacity())));
        }
        if total <= 0.0 {
            w.iter_mut().for_each(|v| *v = 1.0);
        }
        let total: f64 = w.iter().sum();
        let trial: Vec<f64> = w.iter().map(|v| left * v / total).collect();
        let mut saturated = false;
        for (s, group) in groups.iter().enumerate() {
            if !open[s] {
                continue;
            }
            let used: f64 = group.iter().map(|&p| d[p]).sum();
            let add: f64 = active.iter().zip(&trial).filter(|(p, _)| task.routes[**p].shelter == s).map(|(_, t)| t).sum();
            let room = task.shelter_caps[s] as f64 - used;
            if add > room {
                // Fill the shelter exactly, in proportion to this round's split.
                for (&p, t) in active.iter().zip(&trial) {
                    if task.routes[p].shelter == s {
                        d[p] += if add > 0.0 { room * t / add } else { 0.0 };
                    }
                }
                left -= room;
                open[s] = false;
                saturated = true;
            }
        }
        if !saturated {
            for (&p, t) in active.iter().zip(&trial) {
                d[p] += t;
            }
            break;
        }
    }
    Ok(d)
}

/// Demand split in proportion to `1/c`, capped by shelter room with the
/// excess re-split among the remaining routes.
pub fn inverse_weighted_evac(c: &[f64], task: &EvacTask) -> Result<Vec<f64>> {
    check_route_costs(c, task)?;
    if c.iter().any(|&v| v <= 0.0) {
        return Err(Error::Argument("inverse weighting needs positive costs".into()));
    }
    if task.total_capacity() < task.demand as u64 {
        return Err(Error::Infeasible(format!("demand {} exceeds total shelter capacity {}", task.demand, task.total_capacity())));
    }
    let w: Vec<f64> = c.iter().map(|v| 1.0 / v).collect();
    proportional_fill(&w, task, task.demand as f64)
}

/// Feasible integer allocation from a soft one: clip overflowing shelters,
/// move the excess proportionally to routes with room, then round by largest
/// remainder.
pub fn round_allocation(d: &[f64], task: &EvacTask) -> Result<ExactAllocation> {
    if d.len() != task.n_routes() {
        return Err(Error::dim("round_allocation", task.n_routes(), d.len()));
    }
    if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Argument("allocation entries must be finite and non-negative".into()));
    }
    if task.total_capacity() < task.demand as u64 {
        return Err(Error::Infeasible(format!("demand {} exceeds total shelter capacity {}", task.demand, task.total_capacity())));
    }
    let demand = task.demand as f64;
    let total: f64 = d.iter().sum();
    // Rescale to the demand first; then the fill only moves excess.
    let scaled: Vec<f64> = if total > 0.0 { d.iter().map(|v| v * demand / total).collect() } else { d.to_vec() };
    let real = proportional_fill(&scaled, task, demand)?;

    let mut out: Vec<u32> = real.iter().map(|v| v.floor() as u32).collect();
    let mut room: Vec<i64> = task.shelter_caps.iter().map(|&u| u as i64).collect();
    for (p, &v) in out.iter().enumerate() {
        room[task.routes[p].shelter] -= v as i64;
    }
    let mut left = task.demand as i64 - out.iter().map(|&v| v as i64).sum::<i64>();
    let mut order: Vec<usize> = (0..d.len()).collect();
    let frac = |p: usize| real[p] - out[p] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    // Largest remainders first; a second sweep covers shelters that filled up.
    while left > 0 {
        let before = left;
        for &p in &order {
            let s = task.routes[p].shelter;
            if left > 0 && room[s] > 0 {
                out[p] += 1;
                room[s] -= 1;
                left -= 1;
            }
        }
        if left == before {
            return Err(Error::Infeasible(format!("demand {} exceeds total shelter capacity {}", task.demand, task.total_capacity())));
        }
    }
    Ok(ExactAllocation { d: out })
}

// ---------------------------------------------------------------- matching

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// Hangar of each aircraft.
    pub pairs: Vec<Option<usize>>,
}

impl Matching {
    pub fn cost(&self, c: &Matrix) -> f64 {
        self.pairs
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| c.get(i, j)))
            .sum()
    }

    /// 0/1 assignment matrix.
    pub fn to_matrix(&self, n_hangars: usize) -> Matrix {
        let mut m = Matrix::zeros(self.pairs.len(), n_hangars);
        for (i, j) in self.pairs.iter().enumerate() {
            if let Some(j) = j {
                m.set(i, *j, 1.0);
            }
        }
        m
    }

    /// Aircraft beyond each hangar's capacity, summed.
    pub fn overflow(&self, caps: &[f64]) -> f64 {
        let mut load = vec![0.0; caps.len()];
        for j in self.pairs.iter().flatten() {
            load[*j] += 1.0;
        }
        load.iter().zip(caps).map(|(l, u)| (l - u).max(0.0)).sum()
    }
}

fn check_cost_matrix(c: &Matrix) -> Result<()> {
    if c.rows() > c.cols() {
        return Err(Error::Argument(format!("{} aircraft but only {} hangars", c.rows(), c.cols())));
    }
    if !c.is_finite() {
        return Err(Error::NonFinite("match costs".into()));
    }
    Ok(())
}

/// Minimum-cost assignment of every aircraft to a distinct hangar
/// (Hungarian algorithm with row potentials, O(M²L)).
pub fn solve_matching_exact(c: &Matrix) -> Result<Matching> {
    check_cost_matrix(c)?;
    let (m, l) = c.shape();
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; l + 1];
    let mut owner = vec![0usize; l + 1];
    let mut way = vec![0usize; l + 1];
    for i in 1..=m {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; l + 1];
        let mut used = vec![false; l + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=l {
                if !used[j] {
                    let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=l {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = vec![None; m];
    for j in 1..=l {
        if owner[j] > 0 {
            pairs[owner[j] - 1] = Some(j - 1);
        }
    }
    Ok(Matching { pairs })
}

/// Aircraft in index order each take the remaining hangar with the highest
/// inverse cost.
pub fn inverse_weighted_matching(c: &Matrix) -> Result<Matching> {
    check_cost_matrix(c)?;
    if c.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Argument("inverse weighting needs positive costs".into()));
    }
    let (m, l) = c.shape();
    let mut taken = vec![false; l];
    let pairs = (0..m)
        .map(|i| {
            let j = (0..l)
                .filter(|&j| !taken[j])
                .max_by(|&a, &b| (1.0 / c.get(i, a)).total_cmp(&(1.0 / c.get(i, b))).then(b.cmp(&a)))
                .expect("m ≤ l leaves a free hangar");
            taken[j] = true;
            Some(j)
        })
        .collect();
    Ok(Matching { pairs })
}
