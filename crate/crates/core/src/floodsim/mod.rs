//! Synthetic flood scenarios: terrain, storms, a diffusion-wave surrogate,
//! remote and in-situ observations, and the two decision-task layouts.

pub mod config;
pub mod io;
pub mod scenario;
pub mod sim;
pub mod terrain;

pub use config::{EvacConfig, GraphConfig, MatchConfig, ScenarioConfig, SimConfig, StormConfig, TerrainConfig};
pub use io::{load_suite, save_suite};
pub use scenario::{
    observe, run_scenario, run_suite, scenario_seeds, EvacTask, MatchTask, Region, Route, Scenario,
    ScenarioSuite, FEATURE_DIM, INSITU_DIM,
};
pub use sim::{step_flood, step_flood_with};
pub use terrain::{generate_terrain, generate_terrain_with, Terrain};
