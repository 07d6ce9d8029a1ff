//! Differentiable decision heads and their task losses.
//!
//! Evacuation: a softmax head spreads the demand over routes, and the loss adds
//! route cost to a penalty on shelter overflow. Relocation: an MLP scores every
//! aircraft/hangar pair, log-domain Sinkhorn turns the scores into a soft
//! assignment, and the loss adds flood-aware relocation cost to capacity penalties.

use serde::{Deserialize, Serialize};

use crate::diffkit::{log_sum_exp, softmax, softmax_backward, Matrix, Mlp, MlpCache};
use crate::error::{Error, Result};
use crate::floodsim::{EvacTask, MatchTask};
use crate::graph::CellGraph;

/// How the flood estimate is summarised before the evacuation MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One scalar: the mean estimate over all cells.
    #[default]
    Mean,
    /// One value per route: the mean estimate along that route.
    PerRoute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionConfig {
    /// Overflow penalty weight in the evacuation loss.
    pub gamma_assign: f64,
    /// Capacity penalty weight in the matching loss.
    pub gamma_match: f64,
    pub sinkhorn_iters: usize,
    pub evac_mlp_hidden: usize,
    pub match_mlp_hidden: usize,
    /// Extra cost per kilometre for each metre of water on a route segment.
    pub depth_cost_coeff: f64,
    /// Weight of flood impact (mean of both ends) in the relocation cost.
    pub impact_weight: f64,
    /// Cells averaged around each aircraft stand and hangar.
    pub impact_neighbors: usize,
    pub pooling: Pooling,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            gamma_assign: 10.0,
            gamma_match: 10.0,
            sinkhorn_iters: 10,
            evac_mlp_hidden: 128,
            match_mlp_hidden: 32,
            depth_cost_coeff: 10.0,
            impact_weight: 20.0,
            impact_neighbors: 10,
            pooling: Pooling::Mean,
        }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_assign > 0.0 && self.gamma_match > 0.0) {
            return Err(Error::Config("decision penalty weights must be positive".into()));
        }
        if self.sinkhorn_iters == 0 || self.evac_mlp_hidden == 0 || self.match_mlp_hidden == 0 || self.impact_neighbors == 0 {
            return Err(Error::Config("decision counts must be at least 1".into()));
        }
        if self.depth_cost_coeff < 0.0 || self.impact_weight < 0.0 {
            return Err(Error::Config("cost coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- evacuation

/// `c_p = Σ_e len_e · (1 + coeff · depth_e)` over the segments of each route.
pub fn route_costs(y: &[f64], task: &EvacTask, coeff: f64) -> Result<Vec<f64>> {
    task.routes
        .iter()
        .map(|route| {
            route
                .cells
                .iter()
                .zip(&route.segment_lengths)
                .map(|(&cell, len)| {
                    y.get(cell)
                        .map(|d| len * (1.0 + coeff * d))
                        .ok_or_else(|| Error::dim("route_costs", cell + 1, y.len()))
                })
                .sum()
        })
        .collect()
}

/// Pulls `dL/dc` back to the depth field.
pub fn route_costs_backward(dc: &[f64], task: &EvacTask, coeff: f64, n_cells: usize) -> Vec<f64> {
    let mut dy = vec![0.0; n_cells];
    for (route, g) in task.routes.iter().zip(dc) {
        for (&cell, len) in route.cells.iter().zip(&route.segment_lengths) {
            dy[cell] += g * len * coeff;
        }
    }
    dy
}

pub fn evac_head_init<R: rand::Rng + ?Sized>(task: &EvacTask, cfg: &DecisionConfig, rng: &mut R) -> Mlp {
    let input = match cfg.pooling {
        Pooling::Mean => 1,
        Pooling::PerRoute => task.n_routes(),
    };
    Mlp::init(input, cfg.evac_mlp_hidden, task.n_routes(), rng)
}

pub struct EvacCache {
    mlp: MlpCache,
    probs: Vec<f64>,
    demand: f64,
    pooling: Pooling,
    n_cells: usize,
}

impl EvacCache {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

fn pool(yhat: &[f64], task: &EvacTask, pooling: Pooling) -> Vec<f64> {
    match pooling {
        Pooling::Mean => vec![yhat.iter().sum::<f64>() / yhat.len() as f64],
        Pooling::PerRoute => task
            .routes
            .iter()
            .map(|r| r.cells.iter().map(|&c| yhat[c]).sum::<f64>() / r.cells.len() as f64)
            .collect(),
    }
}

/// Pools the estimate, scores routes, and returns the allocation `D · softmax(s)`.
pub fn evac_head(yhat: &[f64], head: &Mlp, task: &EvacTask, pooling: Pooling) -> Result<(Vec<f64>, EvacCache)> {
    if yhat.is_empty() {
        return Err(Error::Argument("empty flood estimate".into()));
    }
    let pooled = pool(yhat, task, pooling);
    if head.input_dim() != pooled.len() || head.output_dim() != task.n_routes() {
        return Err(Error::dim("evac_head", format!("{}→{}", pooled.len(), task.n_routes()),
            format!("{}→{}", head.input_dim(), head.output_dim())));
    }
    let (scores, mlp) = head.forward(&Matrix::row_vector(&pooled))?;
    scores.ensure_finite("evacuation scores")?;
    let probs = softmax(scores.data());
    let demand = task.demand as f64;
    let d = probs.iter().map(|p| demand * p).collect();
    Ok((
        d,
        EvacCache {
            mlp,
            probs,
            demand,
            pooling,
            n_cells: yhat.len(),
        },
    ))
}

/// Accumulates head gradients into `grad` and returns `dL/dŷ`.
pub fn evac_head_backward(head: &Mlp, cache: &EvacCache, task: &EvacTask, dd: &[f64], grad: &mut Mlp) -> Result<Vec<f64>> {
    let dp: Vec<f64> = dd.iter().map(|g| g * cache.demand).collect();
    let ds = softmax_backward(&cache.probs, &dp);
    let dpooled = head.backward(&cache.mlp, &Matrix::row_vector(&ds), grad)?;
    let n = cache.n_cells;
    let mut dy = vec![0.0; n];
    match cache.pooling {
        Pooling::Mean => {
            let g = dpooled.get(0, 0) / n as f64;
            dy.iter_mut().for_each(|v| *v = g);
        }
        Pooling::PerRoute => {
            for (p, route) in task.routes.iter().enumerate() {
                let g = dpooled.get(0, p) / route.cells.len() as f64;
                for &c in &route.cells {
                    dy[c] += g;
                }
            }
        }
    }
    Ok(dy)
}

/// People sent to each shelter.
pub fn shelter_loads(d: &[f64], task: &EvacTask) -> Vec<f64> {
    let mut load = vec![0.0; task.n_shelters()];
    for (route, v) in task.routes.iter().zip(d) {
        load[route.shelter] += v;
    }
    load
}

/// Total persons beyond shelter capacity.
pub fn evac_overflow(d: &[f64], task: &EvacTask) -> f64 {
    shelter_loads(d, task)
        .iter()
        .zip(&task.shelter_caps)
        .map(|(l, &u)| (l - u as f64).max(0.0))
        .sum()
}

/// `Σ c_i d_i + γ · Σ_j relu(load_j − u_j)`.
pub fn evac_loss(d: &[f64], c: &[f64], task: &EvacTask, gamma: f64) -> Result<f64> {
    if d.len() != c.len() || d.len() != task.n_routes() {
        return Err(Error::dim("evac_loss", task.n_routes(), d.len()));
    }
    let cost: f64 = c.iter().zip(d).map(|(a, b)| a * b).sum();
    Ok(cost + gamma * evac_overflow(d, task))
}

/// Returns `(dL/dd, dL/dc)`.
pub fn evac_loss_backward(d: &[f64], c: &[f64], task: &EvacTask, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let loads = shelter_loads(d, task);
    let over: Vec<bool> = loads.iter().zip(&task.shelter_caps).map(|(l, &u)| *l > u as f64).collect();
    let dd = task
        .routes
        .iter()
        .zip(c)
        .map(|(r, ci)| ci + if over[r.shelter] { gamma } else { 0.0 })
        .collect();
    (dd, d.to_vec())
}

// ---------------------------------------------------------------- relocation

/// Inverse-square-distance weighted mean of `values`; distances are floored.
pub fn weighted_impact(distances: &[f64], values: &[f64], floor: f64) -> f64 {
    let weights: Vec<f64> = distances.iter().map(|d| 1.0 / d.max(floor).powi(2)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / total
}

/// Fixed linear map from the depth field to one flood impact per hangar.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactStencil {
    cells: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
}

impl ImpactStencil {
    /// The `neighbors` nearest cell centres of each hangar (ties to the lower
    /// index), weighted by inverse squared distance with a floor of half a cell.
    pub fn new(graph: &CellGraph, hangars: &[usize], neighbors: usize) -> Result<Self> {
        let n = graph.n_cells();
        if n < neighbors {
            return Err(Error::Argument(format!("hangar impact needs {neighbors} cells, grid has {n}")));
        }
        let floor = 0.5 * graph.cell_size();
        let mut cells = Vec::with_capacity(hangars.len());
        let mut weights = Vec::with_capacity(hangars.len());
        for &h in hangars {
            if h >= n {
                return Err(Error::Argument(format!("hangar cell {h} out of range")));
            }
            let mut order: Vec<(f64, usize)> = (0..n).map(|i| (graph.distance(h, i), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.truncate(neighbors);
            let raw: Vec<f64> = order.iter().map(|(d, _)| 1.0 / d.max(floor).powi(2)).collect();
            let total: f64 = raw.iter().sum();
            cells.push(order.iter().map(|&(_, i)| i).collect());
            weights.push(raw.iter().map(|w| w / total).collect());
        }
        Ok(Self { cells, weights })
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        self.cells
            .iter()
            .zip(&self.weights)
            .map(|(cs, ws)| cs.iter().zip(ws).map(|(&c, w)| w * y[c]).sum())
            .collect()
    }

    /// Adds `Σ_j dimpact_j · ∂impact_j/∂y` into `dy`.
    pub fn backward(&self, dimpact: &[f64], dy: &mut [f64]) {
        for ((cs, ws), g) in self.cells.iter().zip(&self.weights).zip(dimpact) {
            for (&c, w) in cs.iter().zip(ws) {
                dy[c] += g * w;
            }
        }
    }
}

pub fn hangar_impact(y: &[f64], task: &MatchTask, graph: &CellGraph, neighbors: usize) -> Result<Vec<f64>> {
    if y.len() != graph.n_cells() {
        return Err(Error::dim("hangar_impact", graph.n_cells(), y.len()));
    }
    Ok(ImpactStencil::new(graph, &task.hangar_cells, neighbors)?.apply(y))
}

/// Aircraft-to-hangar distances divided by the largest such distance.
pub fn normalized_distances(task: &MatchTask, graph: &CellGraph) -> Matrix {
    let (m, l) = (task.n_aircraft(), task.n_hangars());
    let mut out = Matrix::zeros(m, l);
    for (i, &a) in task.aircraft_cells.iter().enumerate() {
        for (j, &h) in task.hangar_cells.iter().enumerate() {
            out.set(i, j, graph.distance(a, h));
        }
    }
    let max = out.max_abs();
    if max > 0.0 {
        out.scale(1.0 / max);
    }
    out
}

/// Everything about a matching instance that does not depend on the flood.
#[derive(Debug, Clone)]
pub struct MatchGeometry {
    pub distances: Matrix,
    pub aircraft_stencil: ImpactStencil,
    pub hangar_stencil: ImpactStencil,
    pub caps: Vec<f64>,
}

impl MatchGeometry {
    pub fn new(task: &MatchTask, graph: &CellGraph, neighbors: usize) -> Result<Self> {
        if task.hangar_caps.len() != task.n_hangars() {
            return Err(Error::dim("MatchTask caps", task.n_hangars(), task.hangar_caps.len()));
        }
        Ok(Self {
            distances: normalized_distances(task, graph),
            aircraft_stencil: ImpactStencil::new(graph, &task.aircraft_cells, neighbors)?,
            hangar_stencil: ImpactStencil::new(graph, &task.hangar_cells, neighbors)?,
            caps: task.hangar_caps.iter().map(|&u| u as f64).collect(),
        })
    }

    pub fn n_aircraft(&self) -> usize {
        self.distances.rows()
    }

    pub fn n_hangars(&self) -> usize {
        self.distances.cols()
    }
}

/// `c_ij = dist_ij · (1 + w_f · (a_i + h_j) / 2)` with `a`, `h` the flood
/// impact at the aircraft stand and at the hangar.
///
/// An additive impact term would be constant over perfect matchings (each
/// hangar is used exactly once), so flooding could never change the decision.
pub fn match_costs_from(geom: &MatchGeometry, y: &[f64], impact_weight: f64) -> Matrix {
    let a = geom.aircraft_stencil.apply(y);
    let h = geom.hangar_stencil.apply(y);
    let mut c = geom.distances.clone();
    for (i, ai) in a.iter().enumerate() {
        for (v, hj) in c.row_mut(i).iter_mut().zip(&h) {
            *v *= 1.0 + 0.5 * impact_weight * (ai + hj);
        }
    }
    c
}

pub fn match_costs(y: &[f64], task: &MatchTask, graph: &CellGraph, impact_weight: f64) -> Result<Matrix> {
    if y.len() != graph.n_cells() {
        return Err(Error::dim("match_costs", graph.n_cells(), y.len()));
    }
    let geom = MatchGeometry::new(task, graph, DecisionConfig::default().impact_neighbors)?;
    Ok(match_costs_from(&geom, y, impact_weight))
}

/// Pulls `dL/dc` back to the depth field.
pub fn match_costs_backward(geom: &MatchGeometry, dc: &Matrix, impact_weight: f64, dy: &mut [f64]) {
    let weighted = dc.hadamard(&geom.distances).expect("cost and distance shapes agree");
    let half = 0.5 * impact_weight;
    let da: Vec<f64> = weighted.row_sums().iter().map(|g| g * half).collect();
    let dh: Vec<f64> = weighted.col_sums().iter().map(|g| g * half).collect();
    geom.aircraft_stencil.backward(&da, dy);
    geom.hangar_stencil.backward(&dh, dy);
}

pub fn match_head_init<R: rand::Rng + ?Sized>(cfg: &DecisionConfig, rng: &mut R) -> Mlp {
    Mlp::init(MATCH_FEATURES, cfg.match_mlp_hidden, 1, rng)
}

pub struct MatchHeadCache {
    mlp: MlpCache,
    rows: usize,
    cols: usize,
}

/// Inputs per aircraft/hangar pair seen by the matching head.
pub const MATCH_FEATURES: usize = 3;

/// Pair scores `S_ij = MLP([a_i, h_j, dist_ij])`; a high score is a penalty.
pub fn match_scores(geom: &MatchGeometry, yhat: &[f64], head: &Mlp) -> Result<(Matrix, MatchHeadCache)> {
    if head.input_dim() != MATCH_FEATURES || head.output_dim() != 1 {
        return Err(Error::dim("match head", "3→1", format!("{}→{}", head.input_dim(), head.output_dim())));
    }
    let a = geom.aircraft_stencil.apply(yhat);
    let h = geom.hangar_stencil.apply(yhat);
    let (m, l) = (geom.n_aircraft(), geom.n_hangars());
    let mut x = Matrix::zeros(m * l, MATCH_FEATURES);
    for i in 0..m {
        for j in 0..l {
            let row = x.row_mut(i * l + j);
            row[0] = a[i];
            row[1] = h[j];
            row[2] = geom.distances.get(i, j);
        }
    }
    let (out, mlp) = head.forward(&x)?;
    out.ensure_finite("matching scores")?;
    Ok((Matrix::from_vec(m, l, out.into_vec())?, MatchHeadCache { mlp, rows: m, cols: l }))
}

/// Accumulates head gradients and adds `dL/dŷ` into `dy`.
pub fn match_scores_backward(
    geom: &MatchGeometry,
    head: &Mlp,
    cache: &MatchHeadCache,
    ds: &Matrix,
    grad: &mut Mlp,
    dy: &mut [f64],
) -> Result<()> {
    let dx = head.backward(&cache.mlp, &Matrix::col_vector(ds.data()), grad)?;
    let mut da = vec![0.0; cache.rows];
    let mut dh = vec![0.0; cache.cols];
    for (i, ga) in da.iter_mut().enumerate() {
        for (j, gh) in dh.iter_mut().enumerate() {
            *ga += dx.get(i * cache.cols + j, 0);
            *gh += dx.get(i * cache.cols + j, 1);
        }
    }
    geom.aircraft_stencil.backward(&da, dy);
    geom.hangar_stencil.backward(&dh, dy);
    Ok(())
}

fn normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let lse = log_sum_exp(m.row(r));
        m.row_mut(r).iter_mut().for_each(|v| *v -= lse);
    }
}

fn normalize_cols(m: &mut Matrix) {
    for c in 0..m.cols() {
        let lse = log_sum_exp(&m.column(c));
        for r in 0..m.rows() {
            let v = m.get(r, c);
            m.set(r, c, v - lse);
        }
    }
}

/// Forward intermediates of [`sinkhorn`].
pub struct SinkhornCache {
    /// Log-domain matrix before each normalisation, tagged row (true) or column.
    steps: Vec<(bool, Matrix)>,
    p: Matrix,
}

impl SinkhornCache {
    pub fn assignment(&self) -> &Matrix {
        &self.p
    }
}

/// Log-domain Sinkhorn on `log α = −S`.
///
/// One iteration is a row then a column normalisation. For rectangular inputs
/// a final row normalisation makes every aircraft's row sum exactly one.
pub fn sinkhorn(s: &Matrix, iters: usize) -> Result<(Matrix, SinkhornCache)> {
    s.ensure_finite("sinkhorn scores")?;
    if s.rows() == 0 || s.cols() == 0 {
        return Err(Error::Argument("sinkhorn needs a non-empty score matrix".into()));
    }
    let mut log_alpha = s.map(|v| -v);
    let mut steps = Vec::with_capacity(2 * iters + 1);
    for _ in 0..iters {
        steps.push((true, log_alpha.clone()));
        normalize_rows(&mut log_alpha);
        steps.push((false, log_alpha.clone()));
        normalize_cols(&mut log_alpha);
    }
    if s.rows() != s.cols() {
        steps.push((true, log_alpha.clone()));
        normalize_rows(&mut log_alpha);
    }
    let p = log_alpha.map(f64::exp);
    p.ensure_finite("sinkhorn output")?;
    Ok((p.clone(), SinkhornCache { steps, p }))
}

/// Unrolled backward of [`sinkhorn`]: `dL/dS` from `dL/dP`.
pub fn sinkhorn_backward(cache: &SinkhornCache, dp: &Matrix) -> Result<Matrix> {
    // P = exp(x) ⇒ dx = dP ⊙ P
    let mut g = dp.hadamard(&cache.p)?;
    for (by_row, input) in cache.steps.iter().rev() {
        // y = x − lse(x) along an axis ⇒ dx = dy − softmax(x) · Σ dy
        if *by_row {
            for r in 0..input.rows() {
                let sm = softmax(input.row(r));
                let total: f64 = g.row(r).iter().sum();
                for (gv, s) in g.row_mut(r).iter_mut().zip(&sm) {
                    *gv -= s * total;
                }
            }
        } else {
            for c in 0..input.cols() {
                let sm = softmax(&input.column(c));
                let total: f64 = (0..g.rows()).map(|r| g.get(r, c)).sum();
                for (r, s) in sm.iter().enumerate() {
                    g.add_at(r, c, -s * total);
                }
            }
        }
    }
    g.scale(-1.0);
    Ok(g)
}

/// `Σ c_ij P_ij + γ Σ_j relu(colsum_j − u_j) + γ Σ_i relu(rowsum_i − 1)`.
pub fn match_loss(p: &Matrix, c: &Matrix, caps: &[f64], gamma: f64) -> Result<f64> {
    if !p.same_shape(c) || caps.len() != p.cols() {
        return Err(Error::dim("match_loss", format!("{}×{}", p.rows(), p.cols()), format!("{}×{}", c.rows(), c.cols())));
    }
    let cost: f64 = p.hadamard(c)?.sum();
    let hangar: f64 = p.col_sums().iter().zip(caps).map(|(s, u)| (s - u).max(0.0)).sum();
    let aircraft: f64 = p.row_sums().iter().map(|s| (s - 1.0).max(0.0)).sum();
    Ok(cost + gamma * (hangar + aircraft))
}

/// Returns `(dL/dP, dL/dc)`.
pub fn match_loss_backward(p: &Matrix, c: &Matrix, caps: &[f64], gamma: f64) -> (Matrix, Matrix) {
    let col_over: Vec<f64> = p.col_sums().iter().zip(caps).map(|(s, u)| if s > u { gamma } else { 0.0 }).collect();
    let row_over: Vec<f64> = p.row_sums().iter().map(|s| if *s > 1.0 { gamma } else { 0.0 }).collect();
    let mut dp = c.clone();
    for r in 0..dp.rows() {
        for (k, v) in dp.row_mut(r).iter_mut().enumerate() {
            *v += col_over[k] + row_over[r];
        }
    }
    (dp, p.clone())
}
