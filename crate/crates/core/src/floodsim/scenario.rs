use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::sim::step_flood_with;
use super::terrain::{generate_terrain_with, Terrain};
use crate::diffkit::Matrix;
use crate::error::{Error, Result};
use crate::graph::CellGraph;
use crate::rng::{self, streams};

/// Remote features per cell: precipitation (mm), elevation (m),
/// distance to channel (lattice steps), roughness.
pub const FEATURE_DIM: usize = 4;
/// In-situ channels per cell: depth reading (m) and depth change since the previous frame (m).
pub const INSITU_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    /// Cells entered along the way; the last one is the shelter.
    pub cells: Vec<usize>,
    /// Length of each segment in kilometres, aligned with `cells`.
    pub segment_lengths: Vec<f64>,
    /// Index into `EvacTask::shelter_cells`.
    pub shelter: usize,
}

impl Route {
    pub fn length(&self) -> f64 {
        self.segment_lengths.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvacTask {
    pub origin: usize,
    pub routes: Vec<Route>,
    pub shelter_cells: Vec<usize>,
    pub shelter_caps: Vec<u32>,
    pub demand: u32,
}

impl EvacTask {
    pub fn n_routes(&self) -> usize {
        self.routes.len()
    }

    pub fn n_shelters(&self) -> usize {
        self.shelter_cells.len()
    }

    pub fn route_lengths(&self) -> Vec<f64> {
        self.routes.iter().map(Route::length).collect()
    }

    pub fn shelter_of_route(&self) -> Vec<usize> {
        self.routes.iter().map(|r| r.shelter).collect()
    }

    pub fn total_capacity(&self) -> u64 {
        self.shelter_caps.iter().map(|&c| c as u64).sum()
    }

    pub fn validate(&self, n_cells: usize) -> Result<()> {
        if self.shelter_caps.len() != self.shelter_cells.len() {
            return Err(Error::dim("EvacTask caps", self.shelter_cells.len(), self.shelter_caps.len()));
        }
        for (p, route) in self.routes.iter().enumerate() {
            if route.cells.is_empty() || route.cells.len() != route.segment_lengths.len() {
                return Err(Error::Argument(format!("route {p} is empty or misaligned")));
            }
            if route.shelter >= self.shelter_cells.len() {
                return Err(Error::Argument(format!("route {p} names unknown shelter {}", route.shelter)));
            }
            if route.cells.iter().any(|&c| c >= n_cells) {
                return Err(Error::Argument(format!("route {p} leaves the grid")));
            }
            if *route.cells.last().unwrap() != self.shelter_cells[route.shelter] {
                return Err(Error::Argument(format!("route {p} does not end at its shelter")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTask {
    pub aircraft_cells: Vec<usize>,
    pub hangar_cells: Vec<usize>,
    pub hangar_caps: Vec<u32>,
}

impl MatchTask {
    pub fn n_aircraft(&self) -> usize {
        self.aircraft_cells.len()
    }

    pub fn n_hangars(&self) -> usize {
        self.hangar_cells.len()
    }
}

/// The fixed geography shared by every storm scenario of a suite.
#[derive(Debug, Clone)]
pub struct Region {
    pub config: ScenarioConfig,
    pub terrain: Terrain,
    pub graph: CellGraph,
    pub evac: EvacTask,
    pub matching: MatchTask,
    pub distance_to_channel: Vec<u32>,
}

impl Region {
    pub fn generate(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let terrain = generate_terrain_with(cfg.seed, cfg.rows, cfg.cols, &cfg.terrain)?;
        let mut rng = rng::stream(cfg.seed, streams::TASKS);
        let evac = build_evac_task(cfg, &terrain)?;
        let matching = build_match_task(cfg, &terrain, &evac, &mut rng)?;
        Self::from_parts(cfg.clone(), terrain, evac, matching)
    }

    /// Reassembles a region from stored parts; the graph is rebuilt from the config.
    pub fn from_parts(config: ScenarioConfig, terrain: Terrain, evac: EvacTask, matching: MatchTask) -> Result<Self> {
        terrain.validate()?;
        let mut graph = CellGraph::grid(config.rows, config.cols, config.cell_km, config.graph.normalization)?;
        if config.graph.downslope_edges {
            graph.add_downslope_edges(&terrain.elevation)?;
        }
        evac.validate(terrain.n_cells())?;
        let distance_to_channel = terrain.distance_to_channel();
        Ok(Self {
            config,
            terrain,
            graph,
            evac,
            matching,
            distance_to_channel,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.terrain.n_cells()
    }

    pub fn window(&self) -> usize {
        self.config.window
    }
}

fn build_evac_task(cfg: &ScenarioConfig, terrain: &Terrain) -> Result<EvacTask> {
    let (rows, cols) = (cfg.rows, cfg.cols);
    let origin = (rows / 2) * cols + cols / 2;
    let s = cfg.evac.shelters;
    if s >= rows * cols {
        return Err(Error::Config(format!("{s} shelters do not fit a {rows}×{cols} grid")));
    }

    let sector_of = |i: usize| sector(i, origin, cols, s);
    let higher = |a: usize, b: usize| terrain.elevation[a] > terrain.elevation[b];
    // Shelters sit on a ring around the origin so routes have comparable
    // lengths and flooding, not geometry, decides which is cheapest.
    let half_span = (rows + cols) as f64 / 4.0;
    let ring = |i: usize| {
        let d = (i / cols).abs_diff(origin / cols) + (i % cols).abs_diff(origin % cols);
        (d as f64) >= 0.7 * half_span && (d as f64) <= 1.2 * half_span
    };
    let mut shelters: Vec<Option<usize>> = vec![None; s];
    for i in 0..rows * cols {
        if i == origin || !ring(i) {
            continue;
        }
        let slot = &mut shelters[sector_of(i)];
        if slot.is_none_or(|cur| higher(i, cur)) {
            *slot = Some(i);
        }
    }
    // Tiny grids can leave a sector empty; take the highest unused cell instead.
    for k in 0..s {
        if shelters[k].is_none() {
            let used: Vec<usize> = shelters.iter().flatten().copied().collect();
            let pick = (0..rows * cols)
                .filter(|i| *i != origin && !used.contains(i))
                .reduce(|a, b| if higher(b, a) { b } else { a });
            shelters[k] = pick;
        }
    }
    let shelter_cells: Vec<usize> = shelters.into_iter().map(|c| c.expect("grid has spare cells")).collect();

    let mut routes = Vec::new();
    for (j, &cell) in shelter_cells.iter().enumerate() {
        for variant in 0..cfg.evac.routes_per_shelter {
            let rows_first = (j + variant) % 2 == 0;
            let cells = l_path(origin, cell, cols, rows_first);
            let segment_lengths = vec![cfg.cell_km; cells.len()];
            routes.push(Route {
                cells,
                segment_lengths,
                shelter: j,
            });
        }
    }
    Ok(EvacTask {
        origin,
        routes,
        shelter_cells,
        shelter_caps: cfg.evac.shelter_caps.clone(),
        demand: cfg.evac.demand,
    })
}

/// Angular sector of cell `i` around `origin`, counter-clockwise from east.
fn sector(i: usize, origin: usize, cols: usize, sectors: usize) -> usize {
    let dr = (i / cols) as f64 - (origin / cols) as f64;
    let dc = (i % cols) as f64 - (origin % cols) as f64;
    let angle = (-dr).atan2(dc).rem_euclid(TAU);
    ((angle / (TAU / sectors as f64)) as usize).min(sectors - 1)
}

/// Cells entered on an L-shaped walk from `from` to `to`.
fn l_path(from: usize, to: usize, cols: usize, rows_first: bool) -> Vec<usize> {
    let (mut r, mut c) = ((from / cols) as i64, (from % cols) as i64);
    let (tr, tc) = ((to / cols) as i64, (to % cols) as i64);
    let mut cells = Vec::new();
    let walk_rows = |r: &mut i64, c: i64, cells: &mut Vec<usize>| {
        while *r != tr {
            *r += (tr - *r).signum();
            cells.push((*r * cols as i64 + c) as usize);
        }
    };
    let walk_cols = |r: i64, c: &mut i64, cells: &mut Vec<usize>| {
        while *c != tc {
            *c += (tc - *c).signum();
            cells.push((r * cols as i64 + *c) as usize);
        }
    };
    if rows_first {
        walk_rows(&mut r, c, &mut cells);
        walk_cols(r, &mut c, &mut cells);
    } else {
        walk_cols(r, &mut c, &mut cells);
        walk_rows(&mut r, c, &mut cells);
    }
    cells
}

fn build_match_task(
    cfg: &ScenarioConfig,
    terrain: &Terrain,
    evac: &EvacTask,
    rng: &mut impl Rng,
) -> Result<MatchTask> {
    let (m, l) = (cfg.matching.aircraft, cfg.matching.hangars);
    let n = terrain.n_cells();
    // Airfield parking sits on low ground, away from the channel and the shelters.
    let reserved = |i: usize| terrain.channel_mask[i] || evac.shelter_cells.contains(&i);
    let mut candidates: Vec<usize> = (0..n).filter(|&i| !reserved(i)).collect();
    if candidates.len() < m + l {
        candidates = (0..n).collect();
    }
    if candidates.len() < m + l {
        return Err(Error::Config(format!("{m} aircraft and {l} hangars need {} cells, grid has {n}", m + l)));
    }
    candidates.sort_by(|&a, &b| terrain.elevation[a].total_cmp(&terrain.elevation[b]).then(a.cmp(&b)));
    let aircraft_cells: Vec<usize> = candidates[..m].to_vec();
    let rest = &candidates[m..];
    let mut picks = rand::seq::index::sample(rng, rest.len(), l).into_vec();
    picks.sort_unstable();
    let hangar_cells: Vec<usize> = picks.into_iter().map(|k| rest[k]).collect();
    Ok(MatchTask {
        aircraft_cells,
        hangar_cells,
        hangar_caps: vec![1; l],
    })
}

/// One storm over a region: ground truth, remote features and in-situ readings.
///
/// Arrays are row-major f32: `depths[t][cell]`, `features[t][cell][FEATURE_DIM]`,
/// `insitu[t][cell][INSITU_DIM]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub window: usize,
    pub n_cells: usize,
    pub depths: Vec<f32>,
    pub features: Vec<f32>,
    pub insitu: Vec<f32>,
    /// Water volume (sum of depths) before the first frame.
    pub initial_volume: f64,
    /// Rain added in each frame (sum over cells, metres).
    pub rain_volume: Vec<f64>,
}

impl Scenario {
    pub fn depth_frame(&self, t: usize) -> &[f32] {
        &self.depths[t * self.n_cells..(t + 1) * self.n_cells]
    }

    /// Ground-truth depth at the last frame, the reconstruction target.
    pub fn target(&self) -> Vec<f64> {
        self.depth_frame(self.window - 1).iter().map(|&v| v as f64).collect()
    }

    pub fn feature(&self, t: usize, cell: usize, k: usize) -> f64 {
        self.features[(t * self.n_cells + cell) * FEATURE_DIM + k] as f64
    }

    pub fn insitu_reading(&self, t: usize, cell: usize, k: usize) -> f64 {
        self.insitu[(t * self.n_cells + cell) * INSITU_DIM + k] as f64
    }

    /// Relative gap between final stored volume and initial volume plus rain.
    pub fn mass_balance_error(&self) -> f64 {
        let expected = self.initial_volume + self.rain_volume.iter().sum::<f64>();
        let stored: f64 = self.depth_frame(self.window - 1).iter().map(|&v| v as f64).sum();
        if expected == 0.0 {
            stored.abs()
        } else {
            ((stored - expected) / expected).abs()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (t, n) = (self.window, self.n_cells);
        if self.depths.len() != t * n
            || self.features.len() != t * n * FEATURE_DIM
            || self.insitu.len() != t * n * INSITU_DIM
            || self.rain_volume.len() != t
        {
            return Err(Error::dim("Scenario", t * n, self.depths.len()));
        }
        if self.depths.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::Argument("scenario depths must be finite and non-negative".into()));
        }
        if self.features.iter().chain(&self.insitu).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scenario features".into()));
        }
        Ok(())
    }
}

/// A region plus its storm scenarios.
#[derive(Debug, Clone)]
pub struct ScenarioSuite {
    pub region: Arc<Region>,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioSuite {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.region.config.seed
    }
}

struct Storm {
    center: (f64, f64),
    velocity: (f64, f64),
    radius: f64,
    intensity_mm: f64,
    frames: usize,
}

impl Storm {
    fn draw(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Self {
        let (rows, cols) = (cfg.rows as f64, cfg.cols as f64);
        let span = rows.max(cols);
        Self {
            center: (rng.random_range(0.0..rows), rng.random_range(0.0..cols)),
            velocity: (
                rng.random_range(-0.1..=0.1) * rows,
                rng.random_range(-0.1..=0.1) * cols,
            ),
            radius: rng.random_range(cfg.storm.radius_min..=cfg.storm.radius_max) * span,
            intensity_mm: cfg.storm.amplitude * cfg.storm.peak_mm * rng.random_range(0.5..1.5),
            frames: cfg.storm.frames,
        }
    }

    /// Rain rate in millimetres for frame `t` at cell centre (r, c).
    fn rain_mm(&self, t: usize, r: f64, c: f64) -> f64 {
        if t >= self.frames || self.intensity_mm == 0.0 {
            return 0.0;
        }
        let pulse = (PI * (t as f64 + 0.5) / self.frames as f64).sin();
        let cr = self.center.0 + self.velocity.0 * t as f64;
        let cc = self.center.1 + self.velocity.1 * t as f64;
        let d2 = (r + 0.5 - cr).powi(2) + (c + 0.5 - cc).powi(2);
        self.intensity_mm * pulse * (-d2 / (2.0 * self.radius * self.radius)).exp()
    }
}

/// Simulates one storm over `region`; a pure function of the region and `seed`.
pub fn run_scenario(region: &Region, seed: u64) -> Result<Scenario> {
    let cfg = &region.config;
    let terrain = &region.terrain;
    let (n, window) = (region.n_cells(), cfg.window);
    let mut rng = rng::stream(seed, streams::STORM_BASE);
    let storm = Storm::draw(cfg, &mut rng);
    let normal = StandardNormal;
    let bias = (cfg.storm.precip_bias_sigma * Distribution::<f64>::sample(&normal, &mut rng)).exp();

    let mut depth: Vec<f64> = (0..n)
        .map(|i| if terrain.channel_mask[i] { cfg.sim.base_flow_m } else { 0.0 })
        .collect();
    let initial_volume = depth.iter().sum();

    let mut depths = Vec::with_capacity(window * n);
    let mut features = Vec::with_capacity(window * n * FEATURE_DIM);
    let mut insitu = Vec::with_capacity(window * n * INSITU_DIM);
    let mut rain_volume = Vec::with_capacity(window);
    let mut rain_m = vec![0.0; n];
    for t in 0..window {
        for (i, slot) in rain_m.iter_mut().enumerate() {
            let (r, c) = ((i / cfg.cols) as f64, (i % cfg.cols) as f64);
            *slot = storm.rain_mm(t, r, c) / 1000.0;
        }
        let next = step_flood_with(&depth, terrain, &rain_m, 1.0, &cfg.sim)?;
        rain_volume.push(rain_m.iter().sum());

        for i in 0..n {
            let noise: f64 = Distribution::<f64>::sample(&normal, &mut rng);
            let precip = rain_m[i] * 1000.0 * bias * (1.0 + cfg.storm.precip_noise * noise).max(0.0);
            features.extend_from_slice(&[
                precip as f32,
                terrain.elevation[i] as f32,
                region.distance_to_channel[i] as f32,
                terrain.roughness[i] as f32,
            ]);
            let reading_noise: f64 = Distribution::<f64>::sample(&normal, &mut rng);
            insitu.extend_from_slice(&[
                (next[i] + cfg.storm.insitu_noise_m * reading_noise) as f32,
                (next[i] - depth[i]) as f32,
            ]);
            depths.push(next[i] as f32);
        }
        depth = next;
    }
    let scenario = Scenario {
        seed,
        window,
        n_cells: n,
        depths,
        features,
        insitu,
        initial_volume,
        rain_volume,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Scenario seeds of a suite, derived from the config seed.
pub fn scenario_seeds(cfg: &ScenarioConfig) -> Vec<u64> {
    (0..cfg.count as u64).map(|k| rng::derive_seed(cfg.seed, k)).collect()
}

/// Generates the region and `cfg.count` storms; storms run in parallel.
pub fn run_suite(cfg: &ScenarioConfig) -> Result<ScenarioSuite> {
    let region = Arc::new(Region::generate(cfg)?);
    let scenarios = scenario_seeds(cfg)
        .into_par_iter()
        .map(|seed| run_scenario(&region, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioSuite { region, scenarios })
}

/// Observation at frame `t`: remote features, then in-situ channels masked by `z`.
///
/// `z` may be relaxed (real-valued); the in-situ block is `z_i · h_t[i]`.
pub fn observe(scenario: &Scenario, z: &[f64], t: usize) -> Result<Matrix> {
    let n = scenario.n_cells;
    if z.len() != n {
        return Err(Error::dim("observe", n, z.len()));
    }
    if t >= scenario.window {
        return Err(Error::Argument(format!("frame {t} outside window {}", scenario.window)));
    }
    let mut out = Matrix::zeros(n, FEATURE_DIM + INSITU_DIM);
    for i in 0..n {
        let row = out.row_mut(i);
        for k in 0..FEATURE_DIM {
            row[k] = scenario.feature(t, i, k);
        }
        if z[i] != 0.0 {
            for k in 0..INSITU_DIM {
                row[FEATURE_DIM + k] = z[i] * scenario.insitu_reading(t, i, k);
            }
        }
    }
    Ok(out)
}
