use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::Task;
use super::model::{Context, Instance, ModelParams};
use super::train::{reconstruct, select};
use crate::baselines::{
    cell_feature_matrix, channel_gauges, idw_impute, inverse_weighted_evac, inverse_weighted_matching, knn_impute,
    pca_placement, solve_evac_exact, solve_matching_exact, IDW_POWER,
};
use crate::decision::{evac_head, evac_overflow, match_scores, sinkhorn};
use crate::diffkit::Matrix;
use crate::error::{Error, Result};
use crate::selector::PlacementVector;
use crate::stmodel::reconstruction_loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    /// Channel cells standing in for stream gauges.
    Fixed,
    Pca,
    /// The trained scorer's top-K.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Imputer {
    Idw,
    Knn,
    /// The trained reconstructor.
    Model,
    /// Ground-truth depth; an oracle lower bound.
    Truth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decider {
    /// Exact integer solvers.
    Ilp,
    /// Inverse-weighted heuristics.
    Iw,
    /// The trained decision head.
    Head,
}

/// `placement+imputer+decider`, or `learned` for the end-to-end model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Method {
    pub placement: Placement,
    pub imputer: Imputer,
    pub decider: Decider,
}

pub const PLACEMENT_TOKENS: [&str; 3] = ["fixed", "pca", "learned"];
pub const IMPUTER_TOKENS: [&str; 4] = ["idw", "knn", "model", "truth"];
pub const DECIDER_TOKENS: [&str; 3] = ["ilp", "iw", "head"];

impl Method {
    pub const LEARNED: Method = Method {
        placement: Placement::Learned,
        imputer: Imputer::Model,
        decider: Decider::Head,
    };

    /// The eight classical combinations, in table order.
    pub fn baselines() -> Vec<Method> {
        let mut out = Vec::with_capacity(8);
        for placement in [Placement::Fixed, Placement::Pca] {
            for imputer in [Imputer::Idw, Imputer::Knn] {
                for decider in [Decider::Ilp, Decider::Iw] {
                    out.push(Method {
                        placement,
                        imputer,
                        decider,
                    });
                }
            }
        }
        out
    }

    pub fn needs_model(&self) -> bool {
        self.placement == Placement::Learned || self.imputer == Imputer::Model || self.decider == Decider::Head
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Method::LEARNED {
            return f.write_str("learned");
        }
        let p = PLACEMENT_TOKENS[self.placement as usize];
        let i = IMPUTER_TOKENS[self.imputer as usize];
        let d = DECIDER_TOKENS[self.decider as usize];
        write!(f, "{p}+{i}+{d}")
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "learned" {
            return Ok(Method::LEARNED);
        }
        let parts: Vec<&str> = s.split('+').collect();
        let usage = || {
            Error::Argument(format!(
                "unknown method {s:?}; expected `learned` or placement+imputer+decider with placement in {{{}}}, \
                 imputer in {{{}}}, decider in {{{}}}",
                PLACEMENT_TOKENS.join(", "),
                IMPUTER_TOKENS.join(", "),
                DECIDER_TOKENS.join(", ")
            ))
        };
        if parts.len() != 3 {
            return Err(usage());
        }
        let placement = match parts[0] {
            "fixed" => Placement::Fixed,
            "pca" => Placement::Pca,
            "learned" => Placement::Learned,
            _ => return Err(usage()),
        };
        let imputer = match parts[1] {
            "idw" => Imputer::Idw,
            "knn" => Imputer::Knn,
            "model" => Imputer::Model,
            "truth" => Imputer::Truth,
            _ => return Err(usage()),
        };
        let decider = match parts[2] {
            "ilp" => Decider::Ilp,
            "iw" => Decider::Iw,
            "head" => Decider::Head,
            _ => return Err(usage()),
        };
        Ok(Method {
            placement,
            imputer,
            decider,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// Neighbours used by the KNN imputer.
    pub knn_k: usize,
    /// Record wall-clock inference time. Off by default so metrics files are
    /// byte-reproducible; the column then reads `NA`.
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 4,
            knn_k: 3,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub task: Task,
    /// Mean total cost under ground-truth flooding.
    pub decision_cost: f64,
    /// Mean persons (or aircraft) beyond capacity.
    pub overflow: f64,
    pub pred_mse: f64,
    /// Mean seconds per scenario, when timing is on.
    pub infer_time_s: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "method,task,decision_cost,overflow,pred_mse,infer_time_s,seed";

/// Six significant digits, `%g` style.
pub fn fmt_sig6(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim(&format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

impl MetricsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let time = r.infer_time_s.map_or_else(|| "NA".to_string(), fmt_sig6);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method,
                r.task.name(),
                fmt_sig6(r.decision_cost),
                fmt_sig6(r.overflow),
                fmt_sig6(r.pred_mse),
                time,
                r.seed
            ));
        }
        out
    }

    pub fn find(&self, method: &str, task: Task) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method && r.task == task)
    }
}

/// Placements that do not depend on the instance, fitted once.
pub struct Placements {
    pub fixed: Vec<usize>,
    pub pca: Vec<usize>,
}

impl Placements {
    /// Gauge cells, and PCA over the mean training feature frames.
    pub fn fit(ctx: &Context, train: &[Instance], k: usize) -> Result<Self> {
        let fixed = channel_gauges(&ctx.region, k)?;
        let first = train.first().ok_or_else(|| Error::Argument("PCA placement needs training scenarios".into()))?;
        let mut frames: Vec<Matrix> = first.features.iter().map(|f| Matrix::zeros(f.rows(), f.cols())).collect();
        for inst in train {
            for (acc, f) in frames.iter_mut().zip(&inst.features) {
                acc.add_assign(f)?;
            }
        }
        frames.iter_mut().for_each(|f| f.scale(1.0 / train.len() as f64));
        let pca = pca_placement(&cell_feature_matrix(&frames)?, k)?.indices();
        Ok(Self { fixed, pca })
    }
}

/// Cost, overflow and squared error of one decision on one scenario.
struct Outcome {
    cost: f64,
    overflow: f64,
    mse: f64,
    secs: f64,
}

fn run_one(
    ctx: &Context,
    method: Method,
    task: Task,
    inst: &Instance,
    params: Option<&ModelParams>,
    placements: &Placements,
    cfg: &EvalConfig,
) -> Result<Outcome> {
    let need = || params.ok_or_else(|| Error::Argument(format!("method {method} needs a trained checkpoint")));
    let start = Instant::now();
    let n = inst.n_cells();
    let z: PlacementVector = match method.placement {
        Placement::Fixed => PlacementVector::from_indices(n, &placements.fixed)?,
        Placement::Pca => PlacementVector::from_indices(n, &placements.pca)?,
        Placement::Learned => select(need()?, inst, cfg.k)?,
    };
    let centers = ctx.region.graph.centers();
    let observed: Vec<(usize, f64)> = z.indices().into_iter().map(|i| (i, inst.reading[i])).collect();
    let yhat = match method.imputer {
        Imputer::Idw => idw_impute(&observed, &centers, IDW_POWER)?,
        Imputer::Knn => knn_impute(&observed, &centers, cfg.knn_k.min(observed.len()))?,
        Imputer::Model => reconstruct(ctx, need()?, inst, &z.to_f64())?,
        Imputer::Truth => inst.target.clone(),
    };
    let (cost, overflow) = match task {
        Task::Evac => {
            let t = &ctx.region.evac;
            let d: Vec<f64> = match method.decider {
                Decider::Ilp => solve_evac_exact(&ctx.evac_costs(&yhat)?, t)?.to_f64(),
                Decider::Iw => inverse_weighted_evac(&ctx.evac_costs(&yhat)?, t)?,
                Decider::Head => evac_head(&yhat, &need()?.evac_head, t, ctx.decision.pooling)?.0,
            };
            let cost = d.iter().zip(&inst.evac_costs).map(|(a, b)| a * b).sum();
            (cost, evac_overflow(&d, t))
        }
        Task::Match => {
            let p: Matrix = match method.decider {
                Decider::Ilp => solve_matching_exact(&ctx.match_costs(&yhat))?.to_matrix(ctx.geom.n_hangars()),
                Decider::Iw => inverse_weighted_matching(&ctx.match_costs(&yhat))?.to_matrix(ctx.geom.n_hangars()),
                Decider::Head => {
                    let (s, _) = match_scores(&ctx.geom, &yhat, &need()?.match_head)?;
                    sinkhorn(&s, ctx.decision.sinkhorn_iters)?.0
                }
            };
            let cost = p.hadamard(&inst.match_costs)?.sum();
            let over = p.col_sums().iter().zip(&ctx.geom.caps).map(|(s, u)| (s - u).max(0.0)).sum();
            (cost, over)
        }
    };
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        cost,
        overflow,
        mse: reconstruction_loss(&yhat, &inst.target)?,
        secs,
    })
}

/// Mean metrics of `method` over `instances`.
pub fn evaluate(
    ctx: &Context,
    method: Method,
    task: Task,
    instances: &[Instance],
    params: Option<&ModelParams>,
    placements: &Placements,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricsRow> {
    if instances.is_empty() {
        return Err(Error::Argument("evaluation needs at least one scenario".into()));
    }
    // Sequential when timing so instances do not compete for cores.
    let outcomes: Vec<Outcome> = if cfg.timing {
        instances
            .iter()
            .map(|inst| run_one(ctx, method, task, inst, params, placements, cfg))
            .collect::<Result<_>>()?
    } else {
        instances
            .par_iter()
            .map(|inst| run_one(ctx, method, task, inst, params, placements, cfg))
            .collect::<Result<_>>()?
    };
    let m = outcomes.len() as f64;
    let mean = |f: fn(&Outcome) -> f64| outcomes.iter().map(f).sum::<f64>() / m;
    Ok(MetricsRow {
        method: method.to_string(),
        task,
        decision_cost: mean(|o| o.cost),
        overflow: mean(|o| o.overflow),
        pred_mse: mean(|o| o.mse),
        infer_time_s: cfg.timing.then(|| mean(|o| o.secs).max(f64::MIN_POSITIVE)),
        seed,
    })
}

/// Long-form plot data: `variant,metric,value`.
pub fn ablation_plot_csv(table: &MetricsTable) -> String {
    let mut out = String::from("variant,metric,value\n");
    for r in &table.rows {
        for (metric, v) in [("decision_cost", r.decision_cost), ("overflow", r.overflow), ("pred_mse", r.pred_mse)] {
            out.push_str(&format!("{},{metric},{}\n", r.method, fmt_sig6(v)));
        }
    }
    out
}

/// gnuplot script drawing the ablation bars from [`ablation_plot_csv`] output.
pub fn ablation_gnuplot(data_file: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set style data histograms\n\
         set style fill solid 0.8\n\
         set key off\n\
         set multiplot layout 1,2\n\
         set title 'decision cost'\n\
         plot '< grep decision_cost {data_file}' using 3:xtic(1)\n\
         set title 'prediction MSE'\n\
         plot '< grep pred_mse {data_file}' using 3:xtic(1)\n\
         unset multiplot\n"
    )
}
