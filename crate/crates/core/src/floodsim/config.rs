use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Normalization;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainConfig {
    /// Elevation drop from the top row to the bottom row.
    pub relief_m: f64,
    /// Amplitude of the low-frequency undulation.
    pub noise_m: f64,
    pub channel_depth_m: f64,
    pub channel_roughness: f64,
    pub roughness_base: f64,
    pub roughness_spread: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            relief_m: 3.0,
            noise_m: 0.8,
            channel_depth_m: 0.5,
            channel_roughness: 0.03,
            roughness_base: 0.04,
            roughness_spread: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StormConfig {
    /// Global multiplier on rainfall; 0 disables rain.
    pub amplitude: f64,
    /// Peak rain rate at the storm centre, millimetres per frame.
    pub peak_mm: f64,
    /// Number of leading frames with rain.
    pub frames: usize,
    /// Storm radius range as a fraction of the larger grid side.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Log-normal spread of the per-scenario bias of the remote precipitation feature.
    pub precip_bias_sigma: f64,
    /// Relative per-cell noise of the remote precipitation feature.
    pub precip_noise: f64,
    /// Standard deviation of in-situ depth readings, metres.
    pub insitu_noise_m: f64,
}

impl Default for StormConfig {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            peak_mm: 60.0,
            frames: 4,
            radius_min: 0.08,
            radius_max: 0.2,
            precip_bias_sigma: 0.4,
            precip_noise: 0.2,
            insitu_noise_m: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Conductance constant `k` in `k · depth_upwind^(5/3) / roughness`.
    pub conductance: f64,
    /// Initial water depth in channel cells, metres.
    pub base_flow_m: f64,
    /// Upper bound on explicit substeps per frame.
    pub max_substeps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            conductance: 0.5,
            base_flow_m: 0.0,
            max_substeps: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvacConfig {
    pub shelters: usize,
    pub routes_per_shelter: usize,
    pub shelter_caps: Vec<u32>,
    pub demand: u32,
}

impl Default for EvacConfig {
    fn default() -> Self {
        Self {
            shelters: 4,
            routes_per_shelter: 2,
            shelter_caps: vec![1200, 1000, 1000, 800],
            demand: 3200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub aircraft: usize,
    pub hangars: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            aircraft: 17,
            hangars: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub normalization: Normalization,
    pub downslope_edges: bool,
}

/// Everything needed to generate a region and its storm scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub rows: usize,
    pub cols: usize,
    /// Cell width in kilometres.
    pub cell_km: f64,
    /// Frames per scenario (the time window T).
    pub window: usize,
    /// Number of storm scenarios in a suite.
    pub count: usize,
    pub seed: u64,
    pub terrain: TerrainConfig,
    pub storm: StormConfig,
    pub sim: SimConfig,
    pub evac: EvacConfig,
    pub matching: MatchConfig,
    pub graph: GraphConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            rows: 24,
            cols: 24,
            cell_km: 0.1,
            window: 10,
            count: 200,
            seed: 0,
            terrain: TerrainConfig::default(),
            storm: StormConfig::default(),
            sim: SimConfig::default(),
            evac: EvacConfig::default(),
            matching: MatchConfig::default(),
            graph: GraphConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.rows == 0 || self.cols == 0 || self.rows * self.cols < 4 {
            return bad(format!("grid must have at least 4 cells, got {}×{}", self.rows, self.cols));
        }
        if !(self.cell_km > 0.0) {
            return bad("cell_km must be positive".into());
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.storm.amplitude < 0.0 || self.storm.peak_mm < 0.0 {
            return bad("storm amplitude and peak must be non-negative".into());
        }
        if !(self.storm.radius_min > 0.0 && self.storm.radius_min <= self.storm.radius_max) {
            return bad("storm radius range must satisfy 0 < min <= max".into());
        }
        if self.sim.conductance < 0.0 || self.sim.base_flow_m < 0.0 || self.sim.max_substeps == 0 {
            return bad("simulation parameters must be non-negative with max_substeps >= 1".into());
        }
        if self.terrain.channel_roughness <= 0.0 || self.terrain.roughness_base <= 0.0 {
            return bad("roughness must be positive".into());
        }
        if self.evac.shelters == 0 || self.evac.routes_per_shelter == 0 {
            return bad("need at least one shelter and one route per shelter".into());
        }
        if self.evac.shelter_caps.len() != self.evac.shelters {
            return bad(format!(
                "shelter_caps has {} entries for {} shelters",
                self.evac.shelter_caps.len(),
                self.evac.shelters
            ));
        }
        let n = self.n_cells();
        if self.matching.aircraft > n || self.matching.hangars > n {
            return bad("aircraft and hangar counts cannot exceed the number of cells".into());
        }
        Ok(())
    }
}
