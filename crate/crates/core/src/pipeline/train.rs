use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{PretrainPlacement, Task, TrainConfig, Variant};
use super::model::{Context, Instance, ModelParams};
use crate::decision::{
    evac_head, evac_head_backward, evac_loss, evac_loss_backward, match_loss, match_loss_backward, match_scores,
    match_scores_backward, sinkhorn, sinkhorn_backward,
};
use crate::baselines::channel_gauges;
use crate::diffkit::{Adam, Parameters};
use crate::error::{Error, Result};
use crate::rng;
use crate::selector::{
    imle_gradient, imle_target, map_top_k, perturb_and_map, sample_sum_of_gamma, score_backward, score_locations,
    PlacementVector,
};
use crate::stmodel::{reconstruction_loss, reconstruction_loss_grad, rollout, rollout_backward};

/// Train / validation / test scenario indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Contiguous split in suite order; scenario seeds are already random.
pub fn split_indices(n: usize, cfg: &TrainConfig) -> Result<Split> {
    let n_train = ((n as f64) * cfg.train_frac).round() as usize;
    let n_val = ((n as f64) * cfg.val_frac).round() as usize;
    if n_train == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "{n} scenarios cannot be split {:.2}/{:.2} with a non-empty train and test set",
            cfg.train_frac, cfg.val_frac
        )));
    }
    Ok(Split {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n).collect(),
    })
}

/// What the reconstructor and placement are trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Task loss through the head into everything upstream.
    Task,
    /// Depth MSE only; heads untouched.
    Reconstruction,
    /// Depth MSE upstream; the head learns the task loss on a detached estimate.
    Detached,
}

impl Objective {
    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::NoDfl => Objective::Detached,
            _ => Objective::Task,
        }
    }
}

/// Forward and backward pass of one instance at placement `z`.
pub struct InstanceGrad {
    /// Loss the upstream modules are trained on.
    pub loss: f64,
    pub task_loss: f64,
    pub mse: f64,
    pub grad: ModelParams,
    pub dz: Vec<f64>,
}

fn task_scale(ctx: &Context, task: Task, cfg: &TrainConfig) -> f64 {
    match task {
        Task::Evac if cfg.per_person_loss => 1.0 / (ctx.region.evac.demand.max(1) as f64),
        _ => 1.0,
    }
}

/// Forward-only task loss of a depth estimate, scaled as in training.
fn task_loss(ctx: &Context, params: &ModelParams, inst: &Instance, yhat: &[f64], cfg: &TrainConfig) -> Result<f64> {
    let dc = &ctx.decision;
    let raw = match cfg.task {
        Task::Evac => {
            let task = &ctx.region.evac;
            let (d, _) = evac_head(yhat, &params.evac_head, task, dc.pooling)?;
            evac_loss(&d, &inst.evac_costs, task, dc.gamma_assign)?
        }
        Task::Match => {
            let (s, _) = match_scores(&ctx.geom, yhat, &params.match_head)?;
            let (p, _) = sinkhorn(&s, dc.sinkhorn_iters)?;
            match_loss(&p, &inst.match_costs, &ctx.geom.caps, dc.gamma_match)?
        }
    };
    Ok(task_scale(ctx, cfg.task, cfg) * raw)
}

pub fn instance_grad(
    ctx: &Context,
    params: &ModelParams,
    inst: &Instance,
    z: &[f64],
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<InstanceGrad> {
    let adj = ctx.region.graph.sparse_adj();
    let inputs = inst.inputs(z)?;
    let (raw, cache) = rollout(adj, &inputs, &params.recon)?;
    let yhat = params.scale.to_depth(&raw);
    let mse = reconstruction_loss(&yhat, &inst.target)?;
    let mut grad = params.zeros_like();
    let n = inst.n_cells();
    let mut dy_task = vec![0.0; n];
    let mut task_loss = f64::NAN;
    if objective != Objective::Reconstruction {
        let scale = task_scale(ctx, cfg.task, cfg);
        let dc = &ctx.decision;
        match cfg.task {
            Task::Evac => {
                let task = &ctx.region.evac;
                let (d, ec) = evac_head(&yhat, &params.evac_head, task, dc.pooling)?;
                task_loss = scale * evac_loss(&d, &inst.evac_costs, task, dc.gamma_assign)?;
                let (dd, _) = evac_loss_backward(&d, &inst.evac_costs, task, dc.gamma_assign);
                let dd: Vec<f64> = dd.iter().map(|g| g * scale).collect();
                dy_task = evac_head_backward(&params.evac_head, &ec, task, &dd, &mut grad.evac_head)?;
            }
            Task::Match => {
                let (s, hc) = match_scores(&ctx.geom, &yhat, &params.match_head)?;
                let (p, sc) = sinkhorn(&s, dc.sinkhorn_iters)?;
                task_loss = scale * match_loss(&p, &inst.match_costs, &ctx.geom.caps, dc.gamma_match)?;
                let (mut dp, _) = match_loss_backward(&p, &inst.match_costs, &ctx.geom.caps, dc.gamma_match);
                dp.scale(scale);
                let ds = sinkhorn_backward(&sc, &dp)?;
                match_scores_backward(&ctx.geom, &params.match_head, &hc, &ds, &mut grad.match_head, &mut dy_task)?;
            }
        }
    }
    let (loss, dy) = match objective {
        Objective::Task => (task_loss, dy_task),
        Objective::Reconstruction | Objective::Detached => (mse, reconstruction_loss_grad(&yhat, &inst.target)),
    };
    let dxs = rollout_backward(adj, &cache, &params.recon, &params.scale.to_raw_grad(&dy), &mut grad.recon, true)?;
    let dz = inst.placement_grad(&dxs);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss on scenario {}", inst.seed)));
    }
    Ok(InstanceGrad {
        loss,
        task_loss,
        mse,
        grad,
        dz,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mse: f64,
    pub val_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    /// End-to-end epoch whose parameters were kept (1-based), if any ran.
    pub best_epoch: Option<usize>,
}

fn sum_grads(parts: Vec<InstanceGrad>, template: &ModelParams) -> Result<(ModelParams, f64, f64, f64)> {
    let mut total = template.zeros_like();
    let (mut loss, mut task, mut mse) = (0.0, 0.0, 0.0);
    for p in &parts {
        total.accumulate(&p.grad)?;
        loss += p.loss;
        task += p.task_loss;
        mse += p.mse;
    }
    Ok((total, loss, task, mse))
}

fn random_placement<R: Rng + ?Sized>(n: usize, k: usize, r: &mut R) -> Result<PlacementVector> {
    let cells = rand::seq::index::sample(r, n, k).into_vec();
    PlacementVector::from_indices(n, &cells)
}

/// Reconstruction-only training, either at the K channel gauges or at random
/// placements of 1..=K sensors per batch.
pub fn pretrain(
    params: &mut ModelParams,
    ctx: &Context,
    train: &[Instance],
    val: &[Instance],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::Argument("pretraining needs at least one scenario".into()));
    }
    let n = ctx.n_cells();
    let k_max = cfg.k.min(n);
    let mut adam = Adam::new(params, cfg.lr);
    let mut shuffle = rng::stream(cfg.seed, rng::streams::TRAIN_SHUFFLE);
    let mut place = rng::stream(cfg.seed, rng::streams::PRETRAIN_PLACEMENT);
    let gauges = match cfg.pretrain_placement {
        PretrainPlacement::Gauges => Some(PlacementVector::from_indices(n, &channel_gauges(&ctx.region, k_max)?)?.to_f64()),
        PretrainPlacement::Random => None,
    };
    // Random validation placements are drawn once so epochs are comparable.
    let mut vr = rng::stream(rng::derive_seed(cfg.seed, 1), rng::streams::PRETRAIN_PLACEMENT);
    let val_z: Vec<Vec<f64>> = val
        .iter()
        .map(|_| match &gauges {
            Some(z) => Ok(z.clone()),
            None => random_placement(n, k_max, &mut vr).map(|z| z.to_f64()),
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 1..=cfg.pretrain_epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let zs: Vec<Vec<f64>> = match &gauges {
                Some(z) => vec![z.clone(); batch.len()],
                None => {
                    let k = place.random_range(1..=k_max);
                    batch
                        .iter()
                        .map(|_| random_placement(n, k, &mut place).map(|z| z.to_f64()))
                        .collect::<Result<_>>()?
                }
            };
            let parts = batch
                .par_iter()
                .zip(&zs)
                .map(|(&i, z)| instance_grad(ctx, params, &train[i], z, Objective::Reconstruction, cfg))
                .collect::<Result<Vec<_>>>()?;
            let (mut g, loss, _, _) = sum_grads(parts, params)?;
            g.scale_all(1.0 / batch.len() as f64);
            adam.step(params, &g)?;
            params.ensure_finite("pretrain")?;
            loss_sum += loss;
            count += batch.len();
        }
        let val_mse = mean(
            &val.par_iter()
                .zip(&val_z)
                .map(|(inst, z)| reconstruct(ctx, params, inst, z).and_then(|y| reconstruction_loss(&y, &inst.target)))
                .collect::<Result<Vec<_>>>()?,
        );
        let train_mse = loss_sum / count as f64;
        log::info!("pretrain epoch {epoch}: mse {train_mse:.6e} val {val_mse:.6e}");
        history.push(EpochLog {
            phase: "pretrain".into(),
            epoch,
            train_loss: train_mse,
            train_mse,
            val_loss: val_mse,
            val_mse,
        });
    }
    Ok(history)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn reconstruct(ctx: &Context, params: &ModelParams, inst: &Instance, z: &[f64]) -> Result<Vec<f64>> {
    let (raw, _) = rollout(ctx.region.graph.sparse_adj(), &inst.inputs(z)?, &params.recon)?;
    Ok(params.scale.to_depth(&raw))
}

/// Placement the trained selector commits to: top-K of the unperturbed scores.
pub fn select(params: &ModelParams, inst: &Instance, k: usize) -> Result<PlacementVector> {
    let (theta, _) = score_locations(&inst.score_input, &params.scorer)?;
    map_top_k(&theta, k.min(theta.len()))
}

/// `(objective loss, task loss, mse)` averaged at the fixed budget.
pub fn validate(ctx: &Context, params: &ModelParams, val: &[Instance], cfg: &TrainConfig) -> Result<(f64, f64, f64)> {
    let objective = Objective::for_variant(cfg.variant);
    let parts = val
        .par_iter()
        .map(|inst| {
            let z = select(params, inst, cfg.k)?.to_f64();
            let yhat = reconstruct(ctx, params, inst, &z)?;
            let mse = reconstruction_loss(&yhat, &inst.target)?;
            let task = task_loss(ctx, params, inst, &yhat, cfg)?;
            let loss = if objective == Objective::Task { task } else { mse };
            Ok((loss, task, mse))
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&(f64, f64, f64)) -> f64| mean(&parts.iter().map(f).collect::<Vec<_>>());
    Ok((pick(|p| p.0), pick(|p| p.1), pick(|p| p.2)))
}

/// End-to-end training: perturb-and-MAP placement, reconstruction, decision
/// head and task loss; the scorer learns from the I-MLE difference of MAP
/// states under shared noise (or straight-through for `no_imle`).
///
/// Keeps the parameters of the best validation epoch when a validation set
/// exists, otherwise the last ones.
pub fn train_e2e(
    params: &mut ModelParams,
    ctx: &Context,
    train: &[Instance],
    val: &[Instance],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Argument("training needs at least one scenario".into()));
    }
    let n = ctx.n_cells();
    let k_max = cfg.k.min(n);
    let imle = &ctx.imle;
    let objective = Objective::for_variant(cfg.variant);
    let mut adam = Adam::new(params, cfg.lr);
    let mut shuffle = rng::stream(rng::derive_seed(cfg.seed, 2), rng::streams::TRAIN_SHUFFLE);
    let mut noise_rng = rng::stream(cfg.seed, rng::streams::TRAIN_NOISE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.e2e_epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut mse_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let k = noise_rng.random_range(1..=k_max);
            // One noise vector per sample per instance; straight-through needs none.
            let draws = if cfg.variant == Variant::NoImle { 1 } else { imle.samples };
            let noises: Vec<Vec<Vec<f64>>> = match cfg.variant {
                Variant::NoImle => vec![vec![vec![0.0; n]]; batch.len()],
                _ => batch
                    .iter()
                    .map(|_| {
                        (0..draws)
                            .map(|_| sample_sum_of_gamma(n, imle.sog_k, imle.s_terms, imle.temperature, &mut noise_rng))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?,
            };
            let parts = batch
                .par_iter()
                .zip(&noises)
                .map(|(&i, eps_list)| {
                    let inst = &train[i];
                    let (theta, sc) = score_locations(&inst.score_input, &params.scorer)?;
                    let mut total: Option<InstanceGrad> = None;
                    for eps in eps_list {
                        let z = perturb_and_map(&theta, eps, k)?;
                        let mut g = instance_grad(ctx, params, inst, &z.to_f64(), objective, cfg)?;
                        let dtheta = match cfg.variant {
                            Variant::NoImle => g.dz.clone(),
                            _ => {
                                let target = imle_target(&theta, &g.dz, imle.lambda)?;
                                let z_target = perturb_and_map(&target, eps, k)?;
                                imle_gradient(&z, &z_target)?
                            }
                        };
                        score_backward(&params.scorer, &sc, &dtheta, &mut g.grad.scorer)?;
                        total = Some(match total {
                            None => g,
                            Some(mut t) => {
                                t.grad.accumulate(&g.grad)?;
                                t.loss += g.loss;
                                t.task_loss += g.task_loss;
                                t.mse += g.mse;
                                t
                            }
                        });
                    }
                    let mut g = total.expect("at least one noise sample");
                    if draws > 1 {
                        let w = 1.0 / draws as f64;
                        g.grad.scale_all(w);
                        g.loss *= w;
                        g.task_loss *= w;
                        g.mse *= w;
                    }
                    Ok(g)
                })
                .collect::<Result<Vec<_>>>()?;
            let (mut g, loss, _, mse) = sum_grads(parts, params)?;
            g.scale_all(1.0 / batch.len() as f64);
            adam.step(params, &g)?;
            params.ensure_finite("train_e2e")?;
            loss_sum += loss;
            mse_sum += mse;
        }
        let (val_loss, _, val_mse) = if val.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            validate(ctx, params, val, cfg)?
        };
        let train_loss = loss_sum / train.len() as f64;
        log::info!("e2e epoch {epoch}: loss {train_loss:.6e} val {val_loss:.6e}");
        report.history.push(EpochLog {
            phase: "e2e".into(),
            epoch,
            train_loss,
            train_mse: mse_sum / train.len() as f64,
            val_loss,
            val_mse,
        });
        if val.is_empty() {
            report.best_epoch = Some(epoch);
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    if let Some((_, p)) = best {
        *params = p;
    }
    Ok(report)
}
