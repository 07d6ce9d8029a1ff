//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Criteria run one after another so the timed ones are not competing for
//! cores. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 2 3`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use dfsense_core::baselines::{solve_evac_exact, solve_matching_exact};
use dfsense_core::decision::{
    evac_head, evac_head_backward, evac_loss, evac_loss_backward, match_costs_backward, match_costs_from,
    match_loss, match_loss_backward, match_scores, match_scores_backward, route_costs, route_costs_backward,
    shelter_loads, sinkhorn, sinkhorn_backward, DecisionConfig, MatchGeometry, Pooling, MATCH_FEATURES,
};
use dfsense_core::diffkit::{finite_diff_grad, max_rel_error, Matrix, Mlp, Parameters};
use dfsense_core::floodsim::{run_suite, EvacTask, MatchTask, Region, Route, ScenarioConfig};
use dfsense_core::graph::{CellGraph, Normalization};
use dfsense_core::pipeline::{
    evaluate, pretrain, run_ablation, EvalConfig, Method, Placements, Prepared, Task, TrainConfig, Variant, INPUT_DIM,
};
use dfsense_core::rng;
use dfsense_core::selector::{
    imle_gradient, imle_target, map_top_k, perturb_and_map, sample_sum_of_gamma, score_backward, score_locations,
    ImleConfig, PlacementVector,
};
use dfsense_core::stmodel::{gcn_step, reconstruction_loss, reconstruction_loss_grad, rollout, rollout_backward, Reconstructor, StModel, ST_HIDDEN};
use rand::Rng;
use tempfile::TempDir;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn uniform(r: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, uniform(r, rows * cols, -1.0, 1.0)).unwrap()
}

/// True when a central difference of width `reach` could straddle a relu kink.
fn near_kink(pre: &Matrix, reach: f64) -> bool {
    pre.data().iter().any(|v| v.abs() < reach)
}

fn mlp_pre_activation(net: &Mlp, x: &Matrix) -> Matrix {
    let mut pre = x.matmul(&net.w1).unwrap();
    pre.add_row_broadcast(net.b1.data()).unwrap();
    pre
}

fn fd_param_error<P: Parameters>(params: &P, analytic: &P, step: f64, loss: impl Fn(&P) -> f64) -> f64 {
    let numeric = finite_diff_grad(
        |flat| {
            let mut p = params.clone();
            p.load_flat(flat.data()).unwrap();
            loss(&p)
        },
        &Matrix::row_vector(&params.flatten()),
        step,
    );
    max_rel_error(&Matrix::row_vector(&analytic.flatten()), &numeric)
}

fn fd_vec_error(at: &[f64], analytic: &[f64], step: f64, loss: impl Fn(&[f64]) -> f64) -> f64 {
    let numeric = finite_diff_grad(|v| loss(v.data()), &Matrix::row_vector(at), step);
    max_rel_error(&Matrix::row_vector(analytic), &numeric)
}

/// Runs `check` on fresh seeds until `want` instances away from relu kinks
/// have been compared; returns (worst error, checked, skipped).
fn over_seeds(want: usize, stream: u64, check: impl Fn(&mut rng::StreamRng) -> Option<f64>) -> (f64, usize, usize) {
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut seed = 0;
    while checked < want && seed < 4 * want as u64 {
        match check(&mut rng::stream(seed, stream)) {
            Some(e) => {
                worst = worst.max(e);
                checked += 1;
            }
            None => skipped += 1,
        }
        seed += 1;
    }
    (worst, checked, skipped)
}

fn scorer_gradient(r: &mut rng::StreamRng) -> Option<f64> {
    let net = Mlp::init(4, 64, 1, r);
    let x = random_matrix(r, 30, 4);
    if near_kink(&mlp_pre_activation(&net, &x), 2.0 * FD_STEP * x.max_abs().max(net.w1.max_abs()).max(1.0)) {
        return None;
    }
    let w = uniform(r, 30, -1.0, 1.0);
    let loss = |n: &Mlp| score_locations(&x, n).unwrap().0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let (_, cache) = score_locations(&x, &net).unwrap();
    let mut grad = net.zeros_like();
    score_backward(&net, &cache, &w, &mut grad).unwrap();
    Some(fd_param_error(&net, &grad, FD_STEP, loss))
}

fn rollout_gradient(r: &mut rng::StreamRng) -> Option<f64> {
    let g = CellGraph::grid(3, 3, 1.0, Normalization::Sym).unwrap();
    let adj = g.sparse_adj();
    let model = StModel::init(INPUT_DIM, ST_HIDDEN, r);
    let frames: Vec<Matrix> = (0..4).map(|_| random_matrix(r, 9, INPUT_DIM)).collect();
    let target = uniform(r, 9, -1.0, 1.0);
    for x in &frames {
        let (_, ax) = gcn_step(adj, x, &model.gcn).unwrap();
        let reach = 4.0 * FD_STEP * (1.0 + ax.max_abs().max(model.gcn.max_abs()));
        if near_kink(&ax.matmul(&model.gcn).unwrap(), reach) {
            return None;
        }
    }
    let model = Reconstructor::SpatioTemporal(model);
    let loss = |m: &Reconstructor, xs: &[Matrix]| reconstruction_loss(&rollout(adj, xs, m).unwrap().0, &target).unwrap();
    let (y, cache) = rollout(adj, &frames, &model).unwrap();
    let mut grad = model.zeros_like();
    let dxs = rollout_backward(adj, &cache, &model, &reconstruction_loss_grad(&y, &target), &mut grad, true).unwrap();
    let mut worst = fd_param_error(&model, &grad, FD_STEP, |m| loss(m, &frames));
    for t in 0..frames.len() {
        let numeric = finite_diff_grad(
            |xt| {
                let mut xs = frames.clone();
                xs[t] = xt.clone();
                loss(&model, &xs)
            },
            &frames[t],
            FD_STEP,
        );
        worst = worst.max(max_rel_error(&dxs[t], &numeric));
    }
    Some(worst)
}

fn evac_gradient(task: &EvacTask, n_cells: usize, r: &mut rng::StreamRng) -> Option<f64> {
    // The loss is in person-kilometres (about 1e4), so a 1e-5 step leaves
    // roundoff near the error floor of the exactly-zero dead-unit entries.
    const STEP: f64 = 1e-4;
    let cfg = DecisionConfig::default();
    let head = Mlp::init(1, cfg.evac_mlp_hidden, task.n_routes(), r);
    let y = uniform(r, n_cells, 0.0, 0.3);
    let mean = y.iter().sum::<f64>() / n_cells as f64;
    // The only input is the pooled mean, so a bias step moves a pre-activation most.
    if near_kink(&mlp_pre_activation(&head, &Matrix::row_vector(&[mean])), 2.0 * STEP * mean.abs().max(1.0)) {
        return None;
    }
    let loss = |h: &Mlp, y: &[f64]| {
        let (d, _) = evac_head(y, h, task, Pooling::Mean).unwrap();
        let c = route_costs(y, task, cfg.depth_cost_coeff).unwrap();
        evac_loss(&d, &c, task, cfg.gamma_assign).unwrap()
    };
    let (d, cache) = evac_head(&y, &head, task, Pooling::Mean).unwrap();
    // Loads within reach of a capacity would put the overflow penalty on its kink.
    let loads = shelter_loads(&d, task);
    if loads.iter().zip(&task.shelter_caps).any(|(l, &u)| (l - u as f64).abs() < 1e-2) {
        return None;
    }
    let c = route_costs(&y, task, cfg.depth_cost_coeff).unwrap();
    let (dd, dc) = evac_loss_backward(&d, &c, task, cfg.gamma_assign);
    let mut grad = head.zeros_like();
    let mut dy = evac_head_backward(&head, &cache, task, &dd, &mut grad).unwrap();
    for (a, b) in dy.iter_mut().zip(route_costs_backward(&dc, task, cfg.depth_cost_coeff, n_cells)) {
        *a += b;
    }
    let e1 = fd_param_error(&head, &grad, STEP, |h| loss(h, &y));
    let e2 = fd_vec_error(&y, &dy, STEP, |yy| loss(&head, yy));
    Some(e1.max(e2))
}

fn match_gradient(r: &mut rng::StreamRng) -> Option<f64> {
    // Sinkhorn is invariant to per-row and per-column shifts, so some head
    // gradients are exactly zero; a wider step keeps their roundoff below
    // the error floor.
    const STEP: f64 = 1e-4;
    let cfg = DecisionConfig::default();
    let g = CellGraph::grid(6, 6, 1.0, Normalization::Sym).unwrap();
    let mut cells: Vec<usize> = (0..36).collect();
    for i in 0..9 {
        let j = r.random_range(i..36);
        cells.swap(i, j);
    }
    let task = MatchTask {
        aircraft_cells: cells[..4].to_vec(),
        hangar_cells: cells[4..9].to_vec(),
        hangar_caps: vec![1; 5],
    };
    let geom = MatchGeometry::new(&task, &g, cfg.impact_neighbors).unwrap();
    let head = Mlp::init(MATCH_FEATURES, cfg.match_mlp_hidden, 1, r);
    let y = uniform(r, 36, 0.0, 0.5);
    let a = geom.aircraft_stencil.apply(&y);
    let h = geom.hangar_stencil.apply(&y);
    let mut feats = Matrix::zeros(20, MATCH_FEATURES);
    for i in 0..4 {
        for j in 0..5 {
            feats.row_mut(i * 5 + j).copy_from_slice(&[a[i], h[j], geom.distances.get(i, j)]);
        }
    }
    // A step moves a pre-activation by at most STEP times the largest input or weight.
    let reach = 2.0 * STEP * feats.max_abs().max(head.w1.max_abs()).max(1.0);
    if near_kink(&mlp_pre_activation(&head, &feats), reach) {
        return None;
    }
    let iters = cfg.sinkhorn_iters;
    let loss = |hd: &Mlp, y: &[f64]| {
        let (s, _) = match_scores(&geom, y, hd).unwrap();
        let (p, _) = sinkhorn(&s, iters).unwrap();
        let c = match_costs_from(&geom, y, cfg.impact_weight);
        match_loss(&p, &c, &geom.caps, cfg.gamma_match).unwrap()
    };
    let (s, hc) = match_scores(&geom, &y, &head).unwrap();
    let (p, sc) = sinkhorn(&s, iters).unwrap();
    if p.col_sums().iter().zip(&geom.caps).any(|(s, u)| (s - u).abs() < 1e-4) {
        return None;
    }
    let c = match_costs_from(&geom, &y, cfg.impact_weight);
    let (dp, dc) = match_loss_backward(&p, &c, &geom.caps, cfg.gamma_match);
    let ds = sinkhorn_backward(&sc, &dp).unwrap();
    let mut grad = head.zeros_like();
    let mut dy = vec![0.0; 36];
    match_scores_backward(&geom, &head, &hc, &ds, &mut grad, &mut dy).unwrap();
    match_costs_backward(&geom, &dc, cfg.impact_weight, &mut dy);
    let e1 = fd_param_error(&head, &grad, STEP, |hd| loss(hd, &y));
    let e2 = fd_vec_error(&y, &dy, STEP, |yy| loss(&head, yy));
    Some(e1.max(e2))
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let region = Region::generate(&ScenarioConfig::default()).unwrap();
    let parts = [
        ("scorer", over_seeds(20, 501, scorer_gradient)),
        ("rollout", over_seeds(20, 502, rollout_gradient)),
        ("evac", over_seeds(20, 503, |r| evac_gradient(&region.evac, region.n_cells(), r))),
        ("match", over_seeds(20, 504, match_gradient)),
    ];
    let secs = start.elapsed().as_secs_f64();
    let mut pass = secs < 60.0;
    let mut detail = Vec::new();
    for (name, (worst, checked, skipped)) in parts {
        pass &= checked >= 20 && worst < GRAD_TOL;
        detail.push(format!("{name} max rel err {worst:.2e} over {checked} seeds ({skipped} near a kink)"));
    }
    verdict(pass, format!("{}; {secs:.1}s (limit 60s)", detail.join(", ")))
}

// ---------------------------------------------------------------- solvers

fn brute_force_evac(c: &[f64], task: &EvacTask) -> Option<f64> {
    fn go(p: usize, left: u32, c: &[f64], task: &EvacTask, load: &mut [u32], acc: f64, best: &mut Option<f64>) {
        if p == c.len() {
            if left == 0 && best.is_none_or(|b| acc < b) {
                *best = Some(acc);
            }
            return;
        }
        let s = task.routes[p].shelter;
        for take in 0..=left.min(task.shelter_caps[s] - load[s]) {
            load[s] += take;
            go(p + 1, left - take, c, task, load, acc + take as f64 * c[p], best);
            load[s] -= take;
        }
    }
    let mut best = None;
    go(0, task.demand, c, task, &mut vec![0; task.n_shelters()], 0.0, &mut best);
    best
}

fn brute_force_matching(c: &Matrix) -> f64 {
    fn go(i: usize, c: &Matrix, used: &mut [bool], acc: f64, best: &mut f64) {
        if i == c.rows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.cols() {
            if !used[j] {
                used[j] = true;
                go(i + 1, c, used, acc + c.get(i, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, c, &mut vec![false; c.cols()], 0.0, &mut best);
    best
}

fn random_evac_task(r: &mut impl Rng) -> EvacTask {
    let shelters = r.random_range(1..=3);
    let routes = r.random_range(shelters..=6);
    let demand = r.random_range(1..=20);
    let mut caps: Vec<u32> = (0..shelters).map(|_| r.random_range(0..=12)).collect();
    while caps.iter().sum::<u32>() < demand {
        caps[r.random_range(0..shelters)] += 1;
    }
    EvacTask {
        origin: 0,
        routes: (0..routes)
            .map(|p| {
                let shelter = if p < shelters { p } else { r.random_range(0..shelters) };
                Route { cells: vec![1 + shelter], segment_lengths: vec![1.0], shelter }
            })
            .collect(),
        shelter_cells: (1..=shelters).collect(),
        shelter_caps: caps,
        demand,
    }
}

fn solvers() -> Verdict {
    let mut r = rng::stream(7, 510);
    let mut evac_bad = 0;
    for _ in 0..200 {
        let task = random_evac_task(&mut r);
        // Coarse costs make ties common, which exercises tie handling.
        let c: Vec<f64> = (0..task.n_routes()).map(|_| r.random_range(0..8) as f64 * 0.5).collect();
        let got = solve_evac_exact(&c, &task).unwrap();
        let loads = shelter_loads(&got.to_f64(), &task);
        let feasible = got.d.iter().sum::<u32>() == task.demand
            && loads.iter().zip(&task.shelter_caps).all(|(l, &u)| *l <= u as f64);
        let best = brute_force_evac(&c, &task).unwrap();
        if !feasible || (got.cost(&c) - best).abs() > 1e-9 {
            evac_bad += 1;
        }
    }
    let mut match_bad = 0;
    for _ in 0..200 {
        let m = r.random_range(1..=7);
        let c = Matrix::from_vec(m, m, uniform(&mut r, m * m, 0.0, 1.0)).unwrap();
        let got = solve_matching_exact(&c).unwrap();
        let mut hangars: Vec<usize> = got.pairs.iter().flatten().copied().collect();
        hangars.sort();
        hangars.dedup();
        if hangars.len() != m || (got.cost(&c) - brute_force_matching(&c)).abs() > 1e-9 {
            match_bad += 1;
        }
    }
    verdict(
        evac_bad == 0 && match_bad == 0,
        format!("evac {evac_bad}/200 mismatches, matching {match_bad}/200 mismatches"),
    )
}

fn sinkhorn_sums() -> Verdict {
    let mut r = rng::stream(3, 520);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = random_matrix(&mut r, 8, 8);
        let (p, _) = sinkhorn(&s, 10).unwrap();
        for v in p.row_sums().into_iter().chain(p.col_sums()) {
            worst = worst.max((v - 1.0).abs());
        }
    }
    verdict(worst < 1e-3, format!("worst row/column sum deviation {worst:.2e} over 1000 matrices (limit 1e-3)"))
}

fn sum_of_gamma() -> Verdict {
    let cfg = ImleConfig::default();
    let draws = 1_000_000usize;
    let mut r = rng::stream(11, 530);
    let (mut sum, mut sq) = (0.0, 0.0);
    // Chunked to bound memory.
    for _ in 0..100 {
        let entries = sample_sum_of_gamma(draws / 100 * cfg.sog_k, cfg.sog_k, cfg.s_terms, 1.0, &mut r).unwrap();
        for chunk in entries.chunks(cfg.sog_k) {
            let v: f64 = chunk.iter().sum();
            sum += v;
            sq += v * v;
        }
    }
    let n = draws as f64;
    let mean = sum / n;
    let se = ((sq / n - mean * mean) * n / (n - 1.0) / n).sqrt();
    let z = (mean - EULER_GAMMA).abs() / se;
    verdict(
        z < 3.0,
        format!("mean {mean:.5} vs {EULER_GAMMA:.5}, {z:.2} standard errors (se {se:.2e}, s_terms {})", cfg.s_terms),
    )
}

fn linear_task() -> Verdict {
    let start = Instant::now();
    let cfg = ImleConfig::default();
    let (n, k, lr) = (20, 4, 0.1);
    let mut hits = 0;
    for seed in 0..20 {
        let mut r = rng::stream(seed, 540);
        let c = uniform(&mut r, n, 0.0, 1.0);
        let mut theta = vec![0.0; n];
        for _ in 0..500 {
            let eps = sample_sum_of_gamma(n, cfg.sog_k, cfg.s_terms, cfg.temperature, &mut r).unwrap();
            let z = perturb_and_map(&theta, &eps, k).unwrap();
            // dL/dz of <c, z> is c itself.
            let z2 = perturb_and_map(&imle_target(&theta, &c, cfg.lambda).unwrap(), &eps, k).unwrap();
            for (t, g) in theta.iter_mut().zip(imle_gradient(&z, &z2).unwrap()) {
                *t -= lr * g;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| c[a].total_cmp(&c[b]));
        if map_top_k(&theta, k).unwrap() == PlacementVector::from_indices(n, &order[..k]).unwrap() {
            hits += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        hits >= 18 && secs < 120.0,
        format!("{hits}/20 seeds recover the {k} cheapest of {n} cells after 500 steps; {secs:.1}s (limit 120s)"),
    )
}

// ---------------------------------------------------------------- pipeline

/// Desk-scale schedule: the full one (batch 64, 50 + 500 epochs) would take
/// hours per seed on a laptop core.
fn desk_schedule(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        task: Task::Evac,
        batch_size: 16,
        lr: 5e-3,
        pretrain_epochs: 8,
        e2e_epochs: 12,
        ..TrainConfig::default()
    }
}

fn ablation() -> Verdict {
    let start = Instant::now();
    let mut cost: BTreeMap<&str, f64> = BTreeMap::new();
    let mut mse: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..5 {
        let suite = run_suite(&ScenarioConfig { seed, ..ScenarioConfig::default() }).unwrap();
        let table = run_ablation(
            &suite,
            &DecisionConfig::default(),
            &ImleConfig::default(),
            &desk_schedule(seed),
            &EvalConfig::default(),
        )
        .unwrap();
        for v in Variant::ALL {
            let row = table.find(v.name(), Task::Evac).unwrap();
            *cost.entry(v.name()).or_default() += row.decision_cost / 5.0;
            *mse.entry(v.name()).or_default() += row.pred_mse / 5.0;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (full, no_imle, no_st, no_dfl) = (cost["full"], cost["no_imle"], cost["no_st"], cost["no_dfl"]);
    // "≈" for no_imle vs no_st: within 0.5% of each other.
    let pass = full <= no_imle
        && (no_imle <= no_st || (no_imle - no_st).abs() <= 0.005 * no_st)
        && full < no_dfl
        && mse["no_dfl"] <= mse["full"]
        && secs < 1800.0;
    verdict(
        pass,
        format!(
            "mean cost full {full:.1}, no_imle {no_imle:.1}, no_st {no_st:.1}, no_dfl {no_dfl:.1}; \
             mse no_dfl {:.3e} vs full {:.3e}; {:.1} min (limit 30)",
            mse["no_dfl"],
            mse["full"],
            secs / 60.0
        ),
    )
}

fn imputation() -> Verdict {
    let mut wins = 0;
    let mut finite = true;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let suite = run_suite(&ScenarioConfig { seed, ..ScenarioConfig::default() }).unwrap();
        let cfg = desk_schedule(seed);
        let prep = Prepared::new(&suite, &DecisionConfig::default(), &ImleConfig::default(), &cfg, None).unwrap();
        let mut params = prep.init_params(&cfg);
        pretrain(&mut params, &prep.ctx, &prep.train, &prep.val, &cfg).unwrap();
        let eval = EvalConfig::default();
        let placements = Placements::fit(&prep.ctx, &prep.train, eval.k).unwrap();
        let mse = |m: &str| {
            let method: Method = m.parse().unwrap();
            evaluate(&prep.ctx, method, Task::Evac, &prep.test, Some(&params), &placements, &eval, seed)
                .unwrap()
                .pred_mse
        };
        let (idw, knn, model) = (mse("fixed+idw+ilp"), mse("fixed+knn+ilp"), mse("fixed+model+ilp"));
        finite &= idw.is_finite() && knn.is_finite();
        if idw > model && knn > model {
            wins += 1;
        }
        lines.push(format!("{idw:.2e}/{knn:.2e}/{model:.2e}"));
    }
    verdict(
        finite && wins >= 4,
        format!("model beats both on {wins}/5 seeds; idw/knn/model mse: {}", lines.join(", ")),
    )
}

// ---------------------------------------------------------------- commands

fn dfsense(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfsense"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str], dir: &Path) -> Result<String, String> {
    let out = dfsense(args, dir);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("`dfsense {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn baseline_harness() -> Verdict {
    let run = || -> Result<(bool, String), String> {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let d = dir.path();
        run_ok(&["simulate", "-o", "sc"], d)?;
        run_ok(&["train", "-s", "sc", "-o", "ck", "--epochs", "1"], d)?;
        let csv = run_ok(&["evaluate", "-s", "sc", "--checkpoint", "ck", "--all-baselines", "--task", "all"], d)?;
        let expected: Vec<String> = Method::baselines().iter().map(|m| m.to_string()).collect();
        let mut ok = true;
        let mut notes = Vec::new();
        for task in ["evac", "match"] {
            let rows: Vec<Vec<&str>> =
                csv.lines().skip(1).map(|l| l.split(',').collect::<Vec<_>>()).filter(|f| f[1] == task).collect();
            let names: Vec<&str> = rows.iter().map(|f| f[0]).collect();
            let baselines = names.iter().filter(|n| expected.iter().any(|e| e == *n)).count();
            let learned = names.iter().filter(|n| **n == "learned").count();
            let distinct = expected.iter().all(|e| names.contains(&e.as_str()));
            let ilp_overflow_zero = rows.iter().filter(|f| f[0].ends_with("+ilp")).all(|f| f[3].parse::<f64>() == Ok(0.0));
            ok &= baselines == 8 && distinct && learned == 1 && rows.len() == 9 && ilp_overflow_zero;
            notes.push(format!("{task}: {baselines} baseline + {learned} learned rows, exact-solver overflow 0: {ilp_overflow_zero}"));
        }
        Ok((ok, notes.join("; ")))
    };
    match run() {
        Ok((pass, detail)) => verdict(pass, detail),
        Err(e) => verdict(false, e),
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

const SMALL: &str = "seed = 5
[scenario]
rows = 14
cols = 14
count = 20
[scenario.matching]
aircraft = 6
hangars = 6
[train]
batch_size = 8
pretrain_epochs = 2
e2e_epochs = 2
";

fn physics_and_determinism() -> Verdict {
    let suite = run_suite(&ScenarioConfig::default()).unwrap();
    let worst = suite.scenarios.iter().map(|s| s.mass_balance_error()).fold(0.0, f64::max);
    let session = || -> Result<(BTreeMap<String, Vec<u8>>, String), String> {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let d = dir.path();
        fs::write(d.join("run.toml"), SMALL).map_err(|e| e.to_string())?;
        let mut stdout = run_ok(&["config-default"], d)?;
        stdout += &run_ok(&["simulate", "-c", "run.toml", "-o", "sc"], d)?;
        stdout += &run_ok(&["train", "-c", "run.toml", "-s", "sc", "-o", "ck"], d)?;
        stdout += &run_ok(&["evaluate", "-c", "run.toml", "-s", "sc", "--checkpoint", "ck", "--all-baselines", "--task", "all"], d)?;
        stdout += &run_ok(&["ablate", "-c", "run.toml", "-s", "sc", "-o", "abl", "--epochs", "1"], d)?;
        Ok((snapshot(d), stdout))
    };
    let (a, b) = match (session(), session()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return verdict(false, e),
    };
    let differing: Vec<&String> = a.0.keys().filter(|k| b.0.get(*k) != a.0.get(*k)).collect();
    let identical = differing.is_empty() && a.0.len() == b.0.len() && a.1 == b.1;
    verdict(
        worst < 1e-6 && identical,
        format!(
            "max mass balance rel err {worst:.2e} over {} scenarios; {} output files and stdout byte-identical across reruns: {identical}{}",
            suite.len(),
            a.0.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {differing:?})") }
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 9] = [
    (1, "gradient correctness", gradients),
    (2, "solver exactness", solvers),
    (3, "sinkhorn marginals", sinkhorn_sums),
    (4, "sum-of-gamma mean", sum_of_gamma),
    (5, "i-mle on a linear task", linear_task),
    (6, "ablation direction", ablation),
    (7, "baseline harness", baseline_harness),
    (8, "mass balance and reproducibility", physics_and_determinism),
    (9, "imputation sanity", imputation),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let took = Duration::from_secs_f64(start.elapsed().as_secs_f64().round());
        println!("[{id}] {name}: {} - {} ({took:?})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
