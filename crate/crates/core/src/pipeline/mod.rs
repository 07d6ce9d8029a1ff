//! Training and evaluation orchestration.

mod config;
mod eval;
mod model;
mod train;

#[cfg(test)]
mod tests;

use std::sync::Arc;

pub use config::{PretrainPlacement, Task, TrainConfig, Variant};
pub use eval::{
    ablation_gnuplot, ablation_plot_csv, evaluate, fmt_sig6, Decider, EvalConfig, Imputer, Method, MetricsRow,
    MetricsTable, Placement, Placements, DECIDER_TOKENS, IMPUTER_TOKENS, METRICS_HEADER, PLACEMENT_TOKENS,
};
pub use model::{
    load_checkpoint, prepare, save_checkpoint, Context, InputScale, Instance, ModelParams, CHECKPOINT_DATA,
    CHECKPOINT_META, INPUT_DIM, SCORER_HIDDEN,
};
pub use train::{
    instance_grad, pretrain, reconstruct, select, split_indices, train_e2e, validate, EpochLog, InstanceGrad,
    Objective, Split, TrainReport,
};

use crate::decision::DecisionConfig;
use crate::error::{Error, Result};
use crate::floodsim::ScenarioSuite;
use crate::selector::ImleConfig;

/// A suite split and converted to model inputs under one input scaling.
pub struct Prepared {
    pub ctx: Context,
    pub split: Split,
    pub scale: InputScale,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Prepared {
    /// Fits the scaling on the training share unless one is given (e.g. from a checkpoint).
    pub fn new(
        suite: &ScenarioSuite,
        decision: &DecisionConfig,
        imle: &ImleConfig,
        cfg: &TrainConfig,
        scale: Option<InputScale>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.window != suite.region.window() {
            return Err(Error::Config(format!(
                "train.window = {} but the suite stores {} frames",
                cfg.window,
                suite.region.window()
            )));
        }
        let ctx = Context::new(Arc::clone(&suite.region), decision.clone(), imle.clone())?;
        let split = split_indices(suite.len(), cfg)?;
        let scale = match scale {
            Some(s) => s,
            None => InputScale::fit(&split.train.iter().map(|&i| &suite.scenarios[i]).collect::<Vec<_>>())?,
        };
        Ok(Self {
            train: prepare(suite, &split.train, &scale, &ctx)?,
            val: prepare(suite, &split.val, &scale, &ctx)?,
            test: prepare(suite, &split.test, &scale, &ctx)?,
            ctx,
            split,
            scale,
        })
    }

    pub fn init_params(&self, cfg: &TrainConfig) -> ModelParams {
        ModelParams::init(&self.ctx, cfg.variant, self.scale.clone(), cfg.seed)
    }

    /// Pre-training followed by end-to-end training, from a fresh initialisation.
    pub fn fit(&self, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
        let mut params = self.init_params(cfg);
        let mut history = if cfg.variant.pretrains() {
            pretrain(&mut params, &self.ctx, &self.train, &self.val, cfg)?
        } else {
            Vec::new()
        };
        let mut report = train_e2e(&mut params, &self.ctx, &self.train, &self.val, cfg)?;
        history.append(&mut report.history);
        report.history = history;
        Ok((params, report))
    }
}

/// Training log as CSV, one row per epoch.
pub fn history_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("phase,epoch,train_loss,train_mse,val_loss,val_mse\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.phase,
            h.epoch,
            fmt_sig6(h.train_loss),
            fmt_sig6(h.train_mse),
            fmt_sig6(h.val_loss),
            fmt_sig6(h.val_mse)
        ));
    }
    out
}

/// Trains every ablation variant under the same seed and split and reports
/// the learned model of each on the test share, one row per variant.
pub fn run_ablation(
    suite: &ScenarioSuite,
    decision: &DecisionConfig,
    imle: &ImleConfig,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<MetricsTable> {
    let prepared = Prepared::new(suite, decision, imle, cfg, None)?;
    let placements = Placements::fit(&prepared.ctx, &prepared.train, eval.k)?;
    let mut table = MetricsTable::default();
    // Initialisation and pre-training are the same for every variant that
    // pre-trains, so those share one pre-trained copy.
    let mut pretrained: Option<ModelParams> = None;
    for variant in Variant::ALL {
        let vcfg = TrainConfig { variant, ..cfg.clone() };
        let mut params = match (&pretrained, variant.pretrains()) {
            (_, false) => prepared.init_params(&vcfg),
            (Some(p), true) => p.clone(),
            (None, true) => {
                let mut p = prepared.init_params(&vcfg);
                pretrain(&mut p, &prepared.ctx, &prepared.train, &prepared.val, &vcfg)?;
                pretrained = Some(p.clone());
                p
            }
        };
        train_e2e(&mut params, &prepared.ctx, &prepared.train, &prepared.val, &vcfg)?;
        let mut row = evaluate(
            &prepared.ctx,
            Method::LEARNED,
            cfg.task,
            &prepared.test,
            Some(&params),
            &placements,
            eval,
            cfg.seed,
        )?;
        row.method = variant.name().to_string();
        table.rows.push(row);
    }
    Ok(table)
}
