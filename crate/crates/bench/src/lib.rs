//! Fixtures shared by the benchmarks.

use dfsense_core::decision::DecisionConfig;
use dfsense_core::floodsim::{run_suite, ScenarioConfig, ScenarioSuite};
use dfsense_core::pipeline::{Context, Instance, ModelParams, Prepared, TrainConfig, Variant};
use dfsense_core::selector::ImleConfig;

/// A few default-sized scenarios; enough for per-instance timings.
pub fn small_suite() -> ScenarioSuite {
    run_suite(&ScenarioConfig { count: 10, ..ScenarioConfig::default() }).expect("default scenario config is valid")
}

pub struct Fixture {
    pub ctx: Context,
    pub instance: Instance,
    pub params: ModelParams,
    pub cfg: TrainConfig,
}

/// One prepared training instance with freshly initialised parameters.
pub fn fixture(variant: Variant) -> Fixture {
    let suite = small_suite();
    let cfg = TrainConfig { variant, ..TrainConfig::default() };
    let prepared = Prepared::new(&suite, &DecisionConfig::default(), &ImleConfig::default(), &cfg, None)
        .expect("default training config fits the default suite");
    let params = prepared.init_params(&cfg);
    let Prepared { ctx, mut train, .. } = prepared;
    Fixture { ctx, instance: train.swap_remove(0), params, cfg }
}
