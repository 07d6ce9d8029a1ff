use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::Variant;
use crate::decision::{evac_head_init, match_costs_from, match_head_init, route_costs, DecisionConfig, MatchGeometry};
use crate::diffkit::{Matrix, Mlp, Parameters};
use crate::error::{Error, Result};
use crate::floodsim::{Region, Scenario, ScenarioSuite, FEATURE_DIM, INSITU_DIM};
use crate::rng;
use crate::selector::{temporal_mean, ImleConfig};
use crate::stmodel::{LinearModel, Reconstructor, StModel, ST_HIDDEN};

/// Columns of one reconstructor input frame: features, masked in-situ, placement flag.
pub const INPUT_DIM: usize = FEATURE_DIM + INSITU_DIM + 1;
pub const SCORER_HIDDEN: usize = 64;

/// Per-column normalisation fitted on training scenarios.
///
/// Features are centred and scaled; in-situ channels are only scaled so an
/// unobserved cell stays exactly zero. The reconstructor predicts depth in
/// units of `target_std` around `target_mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScale {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub insitu_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl InputScale {
    pub fn identity() -> Self {
        Self {
            feature_mean: vec![0.0; FEATURE_DIM],
            feature_std: vec![1.0; FEATURE_DIM],
            insitu_std: vec![1.0; INSITU_DIM],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    /// Raw reconstructor output to depth in metres.
    pub fn to_depth(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|v| self.target_mean + self.target_std * v).collect()
    }

    /// Depth gradient to raw-output gradient.
    pub fn to_raw_grad(&self, dy: &[f64]) -> Vec<f64> {
        dy.iter().map(|g| g * self.target_std).collect()
    }

    pub fn fit(scenarios: &[&Scenario]) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::Argument("cannot fit input scaling on zero scenarios".into()));
        }
        let mut fsum = [0.0; FEATURE_DIM];
        let mut fsq = [0.0; FEATURE_DIM];
        let mut isq = [0.0; INSITU_DIM];
        let (mut tsum, mut tsq) = (0.0, 0.0);
        let mut count = 0.0;
        for s in scenarios {
            for row in s.features.chunks_exact(FEATURE_DIM) {
                for (k, &v) in row.iter().enumerate() {
                    fsum[k] += v as f64;
                    fsq[k] += (v as f64).powi(2);
                }
            }
            for row in s.insitu.chunks_exact(INSITU_DIM) {
                for (k, &v) in row.iter().enumerate() {
                    isq[k] += (v as f64).powi(2);
                }
            }
            for y in s.target() {
                tsum += y;
                tsq += y * y;
            }
            count += (s.window * s.n_cells) as f64;
        }
        let n_targets: f64 = scenarios.iter().map(|s| s.n_cells as f64).sum();
        let target_mean = tsum / n_targets;
        let guard = |v: f64| if v > 1e-12 { v } else { 1.0 };
        let feature_mean: Vec<f64> = fsum.iter().map(|s| s / count).collect();
        let feature_std = fsq
            .iter()
            .zip(&feature_mean)
            .map(|(q, m)| guard((q / count - m * m).max(0.0).sqrt()))
            .collect();
        let insitu_std = isq.iter().map(|q| guard((q / count).sqrt())).collect();
        Ok(Self {
            feature_mean,
            feature_std,
            insitu_std,
            target_mean,
            target_std: guard((tsq / n_targets - target_mean * target_mean).max(0.0).sqrt()),
        })
    }
}

/// Shared, read-only state for training and evaluation on one region.
pub struct Context {
    pub region: Arc<Region>,
    pub geom: MatchGeometry,
    pub decision: DecisionConfig,
    pub imle: ImleConfig,
}

impl Context {
    pub fn new(region: Arc<Region>, decision: DecisionConfig, imle: ImleConfig) -> Result<Self> {
        decision.validate()?;
        imle.validate()?;
        let geom = MatchGeometry::new(&region.matching, &region.graph, decision.impact_neighbors)?;
        Ok(Self {
            region,
            geom,
            decision,
            imle,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.region.n_cells()
    }

    pub fn evac_costs(&self, y: &[f64]) -> Result<Vec<f64>> {
        route_costs(y, &self.region.evac, self.decision.depth_cost_coeff)
    }

    pub fn match_costs(&self, y: &[f64]) -> Matrix {
        match_costs_from(&self.geom, y, self.decision.impact_weight)
    }
}

/// One scenario converted to normalised model inputs plus its true costs.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub features: Vec<Matrix>,
    pub insitu: Vec<Matrix>,
    /// Last-frame in-situ depth in metres, what a gauge would report.
    pub reading: Vec<f64>,
    pub score_input: Matrix,
    pub target: Vec<f64>,
    pub evac_costs: Vec<f64>,
    pub match_costs: Matrix,
}

impl Instance {
    pub fn new(s: &Scenario, scale: &InputScale, ctx: &Context) -> Result<Self> {
        let n = s.n_cells;
        let mut features = Vec::with_capacity(s.window);
        let mut insitu = Vec::with_capacity(s.window);
        for t in 0..s.window {
            let mut f = Matrix::zeros(n, FEATURE_DIM);
            let mut o = Matrix::zeros(n, INSITU_DIM);
            for i in 0..n {
                for (k, v) in f.row_mut(i).iter_mut().enumerate() {
                    *v = (s.feature(t, i, k) - scale.feature_mean[k]) / scale.feature_std[k];
                }
                for (k, v) in o.row_mut(i).iter_mut().enumerate() {
                    *v = s.insitu_reading(t, i, k) / scale.insitu_std[k];
                }
            }
            features.push(f);
            insitu.push(o);
        }
        let target = s.target();
        let reading = (0..n).map(|i| s.insitu_reading(s.window - 1, i, 0)).collect();
        Ok(Self {
            seed: s.seed,
            score_input: temporal_mean(&features)?,
            features,
            insitu,
            reading,
            evac_costs: ctx.evac_costs(&target)?,
            match_costs: ctx.match_costs(&target),
            target,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.target.len()
    }

    /// Reconstructor inputs for placement `z`: `[features, z ⊙ in-situ, z]` per frame.
    pub fn inputs(&self, z: &[f64]) -> Result<Vec<Matrix>> {
        let n = self.n_cells();
        if z.len() != n {
            return Err(Error::dim("Instance::inputs", n, z.len()));
        }
        Ok(self
            .features
            .iter()
            .zip(&self.insitu)
            .map(|(f, o)| {
                let mut x = Matrix::zeros(n, INPUT_DIM);
                for i in 0..n {
                    let row = x.row_mut(i);
                    row[..FEATURE_DIM].copy_from_slice(f.row(i));
                    for k in 0..INSITU_DIM {
                        row[FEATURE_DIM + k] = z[i] * o.get(i, k);
                    }
                    row[INPUT_DIM - 1] = z[i];
                }
                x
            })
            .collect())
    }

    /// `dL/dz` from per-frame input gradients.
    pub fn placement_grad(&self, dxs: &[Matrix]) -> Vec<f64> {
        let n = self.n_cells();
        let mut dz = vec![0.0; n];
        for (dx, o) in dxs.iter().zip(&self.insitu) {
            if dx.rows() == 0 {
                continue;
            }
            for (i, g) in dz.iter_mut().enumerate() {
                let row = dx.row(i);
                *g += row[INPUT_DIM - 1];
                for k in 0..INSITU_DIM {
                    *g += row[FEATURE_DIM + k] * o.get(i, k);
                }
            }
        }
        dz
    }
}

pub fn prepare(suite: &ScenarioSuite, idx: &[usize], scale: &InputScale, ctx: &Context) -> Result<Vec<Instance>> {
    idx.par_iter().map(|&i| Instance::new(&suite.scenarios[i], scale, ctx)).collect()
}

/// Every learnable weight of the pipeline plus the fitted input scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub scorer: Mlp,
    pub recon: Reconstructor,
    pub evac_head: Mlp,
    pub match_head: Mlp,
    pub scale: InputScale,
}

impl ModelParams {
    pub fn init(ctx: &Context, variant: Variant, scale: InputScale, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::streams::MODEL_INIT);
        let scorer = Mlp::init(FEATURE_DIM, SCORER_HIDDEN, 1, &mut r);
        let recon = match variant {
            Variant::NoSt => Reconstructor::Linear(LinearModel::init(ctx.n_cells(), INPUT_DIM, &mut r)),
            _ => Reconstructor::SpatioTemporal(StModel::init(INPUT_DIM, ST_HIDDEN, &mut r)),
        };
        let evac_head = evac_head_init(&ctx.region.evac, &ctx.decision, &mut r);
        let match_head = match_head_init(&ctx.decision, &mut r);
        Self {
            scorer,
            recon,
            evac_head,
            match_head,
            scale,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.recon, Reconstructor::Linear(_))
    }
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = self.scorer.tensors();
        out.extend(self.recon.tensors());
        out.extend(self.evac_head.tensors());
        out.extend(self.match_head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = self.scorer.tensors_mut();
        out.extend(self.recon.tensors_mut());
        out.extend(self.evac_head.tensors_mut());
        out.extend(self.match_head.tensors_mut());
        out
    }
}

pub const CHECKPOINT_VERSION: &str = "dfsense-params/1";
pub const CHECKPOINT_META: &str = "params.json";
pub const CHECKPOINT_DATA: &str = "params.f64";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    version: String,
    layout: String,
    reconstructor: String,
    n_cells: usize,
    scorer: [usize; 3],
    evac_head: [usize; 3],
    match_head: [usize; 3],
    tensors: Vec<(String, usize, usize)>,
    num_params: usize,
    scale: InputScale,
}

fn mlp_shape(m: &Mlp) -> [usize; 3] {
    [m.input_dim(), m.hidden_dim(), m.output_dim()]
}

/// Writes `params.json` (shapes, scaling) and `params.f64` (little-endian weights).
pub fn save_checkpoint(params: &ModelParams, n_cells: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION.into(),
        layout: "little-endian f64 tensors concatenated in the order listed".into(),
        reconstructor: if params.is_linear() { "linear" } else { "spatio_temporal" }.into(),
        n_cells,
        scorer: mlp_shape(&params.scorer),
        evac_head: mlp_shape(&params.evac_head),
        match_head: mlp_shape(&params.match_head),
        tensors: params
            .tensors()
            .iter()
            .map(|(name, t)| (name.to_string(), t.rows(), t.cols()))
            .collect(),
        num_params: params.num_params(),
        scale: params.scale.clone(),
    };
    let path = dir.join(CHECKPOINT_META);
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let bytes: Vec<u8> = params.flatten().into_iter().flat_map(f64::to_le_bytes).collect();
    let path = dir.join(CHECKPOINT_DATA);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let meta_path = dir.join(CHECKPOINT_META);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let bad = |reason: String| Error::Format {
        path: meta_path.clone(),
        reason,
    };
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {:?}", meta.version)));
    }
    let recon = match meta.reconstructor.as_str() {
        "linear" => Reconstructor::Linear(LinearModel::zeros(meta.n_cells, INPUT_DIM)),
        "spatio_temporal" => Reconstructor::SpatioTemporal(StModel::zeros(INPUT_DIM, ST_HIDDEN)),
        other => return Err(bad(format!("unknown reconstructor {other:?}"))),
    };
    let mlp = |s: [usize; 3]| Mlp::zeros(s[0], s[1], s[2]);
    let mut params = ModelParams {
        scorer: mlp(meta.scorer),
        recon,
        evac_head: mlp(meta.evac_head),
        match_head: mlp(meta.match_head),
        scale: meta.scale,
    };
    let shapes: Vec<(String, usize, usize)> = params
        .tensors()
        .iter()
        .map(|(name, t)| (name.to_string(), t.rows(), t.cols()))
        .collect();
    if shapes != meta.tensors {
        return Err(bad("tensor list disagrees with this build".into()));
    }
    let data_path = dir.join(CHECKPOINT_DATA);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if bytes.len() != meta.num_params * 8 {
        return Err(Error::Format {
            path: data_path,
            reason: format!("expected {} bytes, found {}", meta.num_params * 8, bytes.len()),
        });
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    params.load_flat(&flat)?;
    params.ensure_finite("checkpoint")?;
    Ok(params)
}
