use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::diffkit::{Matrix, Parameters};
use crate::floodsim::{run_suite, ScenarioConfig, FEATURE_DIM, INSITU_DIM};
use crate::rng;
use crate::selector::{imle_gradient, imle_target, perturb_and_map, sample_sum_of_gamma, score_locations};

fn small_config(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig { rows: 12, cols: 12, count: 15, seed, ..ScenarioConfig::default() };
    cfg.matching.aircraft = 5;
    cfg.matching.hangars = 5;
    cfg
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 8, pretrain_epochs: 2, e2e_epochs: 2, seed, ..TrainConfig::default() }
}

fn prepared(seed: u64) -> Prepared {
    let suite = run_suite(&small_config(seed)).unwrap();
    Prepared::new(&suite, &DecisionConfig::default(), &ImleConfig::default(), &small_train(seed), None).unwrap()
}

#[test]
fn split_is_contiguous_and_covers_the_suite() {
    let cfg = TrainConfig::default();
    let s = split_indices(200, &cfg).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (120, 40, 40));
    let all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    assert_eq!(all, (0..200).collect::<Vec<_>>());
    assert!(split_indices(1, &cfg).is_err());
}

#[test]
fn sig6_formatting_follows_printf_g() {
    let cases = [
        (0.0, "0"),
        (4160.38, "4160.38"),
        (3831.5, "3831.5"),
        (0.00238934, "0.00238934"),
        (1.0 / 3.0, "0.333333"),
        (123456789.0, "1.23457e+08"),
        (999999.5, "1e+06"),
        (0.0001, "0.0001"),
        (0.0000123, "1.23e-05"),
        (-2.5, "-2.5"),
        (68.43, "68.43"),
        (f64::NAN, "NaN"),
    ];
    for (v, want) in cases {
        assert_eq!(fmt_sig6(v), want, "{v}");
    }
}

#[test]
fn method_names_round_trip() {
    assert_eq!("learned".parse::<Method>().unwrap(), Method::LEARNED);
    assert_eq!(Method::LEARNED.to_string(), "learned");
    let baselines = Method::baselines();
    assert_eq!(baselines.len(), 8);
    let names: Vec<String> = baselines.iter().map(Method::to_string).collect();
    assert_eq!(names[0], "fixed+idw+ilp");
    assert_eq!(names[7], "pca+knn+iw");
    for m in &baselines {
        assert!(!m.needs_model());
        assert_eq!(m.to_string().parse::<Method>().unwrap(), *m);
    }
    assert!("fixed+model+ilp".parse::<Method>().unwrap().needs_model());
    for bad in ["", "fixed", "fixed+idw", "fixed+idw+ilp+x", "qr+idw+ilp", "fixed+idw+lp"] {
        assert!(bad.parse::<Method>().is_err(), "{bad:?}");
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let p = prepared(1);
    let cfg = TrainConfig { pretrain_epochs: 0, e2e_epochs: 0, ..small_train(1) };
    let init = p.init_params(&cfg);
    let (trained, report) = p.fit(&cfg).unwrap();
    assert_eq!(trained, init);
    assert!(report.history.is_empty());
    assert_eq!(report.best_epoch, None);
}

#[test]
fn pretraining_is_deterministic_and_reduces_the_loss() {
    let p = prepared(2);
    let cfg = TrainConfig { pretrain_epochs: 6, lr: 5e-3, ..small_train(2) };
    let run = || {
        let mut params = p.init_params(&cfg);
        let history = pretrain(&mut params, &p.ctx, &p.train, &p.val, &cfg).unwrap();
        (params, history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    assert!(ha.last().unwrap().train_loss < ha[0].train_loss, "{ha:?}");
    // Pre-training never touches the placement scorer or the heads.
    let init = p.init_params(&cfg);
    assert_eq!(a.scorer, init.scorer);
    assert_eq!(a.evac_head, init.evac_head);
    assert_eq!(a.match_head, init.match_head);
}

#[test]
fn end_to_end_training_is_reproducible() {
    let p = prepared(3);
    for task in Task::ALL {
        let cfg = TrainConfig { task, ..small_train(3) };
        let (a, ra) = p.fit(&cfg).unwrap();
        let (b, rb) = p.fit(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.history, rb.history);
        assert_eq!(history_csv(&ra.history), history_csv(&rb.history));
        assert_eq!(ra.history.len(), 4);
    }
}

#[test]
fn objectives_dispatch_to_the_right_losses() {
    let p = prepared(4);
    let cfg = small_train(4);
    let params = p.init_params(&cfg);
    let inst = &p.train[0];
    let z = indicator(p.ctx.n_cells(), &[0, 5, 40, 77]);
    for task in Task::ALL {
        let cfg = TrainConfig { task, ..cfg.clone() };
        let task_g = instance_grad(&p.ctx, &params, inst, &z, Objective::Task, &cfg).unwrap();
        let recon_g = instance_grad(&p.ctx, &params, inst, &z, Objective::Reconstruction, &cfg).unwrap();
        let detached = instance_grad(&p.ctx, &params, inst, &z, Objective::Detached, &cfg).unwrap();
        assert_eq!(task_g.loss, task_g.task_loss);
        assert_eq!(recon_g.loss, recon_g.mse);
        assert_eq!(detached.loss, detached.mse);
        assert_eq!(detached.task_loss, task_g.task_loss);
        // The detached variant trains the reconstructor exactly as pre-training does...
        assert_eq!(detached.grad.recon, recon_g.grad.recon);
        assert_eq!(detached.dz, recon_g.dz);
        // ...and its head exactly as the full objective does.
        let head = |g: &ModelParams| match task {
            Task::Evac => g.evac_head.flatten(),
            Task::Match => g.match_head.flatten(),
        };
        assert_eq!(head(&detached.grad), head(&task_g.grad));
        assert!(head(&task_g.grad).iter().any(|v| *v != 0.0));
        assert!(head(&recon_g.grad).iter().all(|v| *v == 0.0));
        assert_ne!(task_g.grad.recon, recon_g.grad.recon);
    }
    assert_eq!(Objective::for_variant(Variant::NoDfl), Objective::Detached);
    assert_eq!(Objective::for_variant(Variant::Full), Objective::Task);
    assert_eq!(Objective::for_variant(Variant::NoImle), Objective::Task);
    assert_eq!(Objective::for_variant(Variant::NoSt), Objective::Task);
}

fn indicator(n: usize, cells: &[usize]) -> Vec<f64> {
    let mut z = vec![0.0; n];
    cells.iter().for_each(|&c| z[c] = 1.0);
    z
}

#[test]
fn imle_gradients_on_pipeline_losses_are_balanced_unit_steps() {
    let p = prepared(5);
    let cfg = small_train(5);
    let params = p.init_params(&cfg);
    let imle = ImleConfig::default();
    let mut r = rng::stream(5, rng::streams::TRAIN_NOISE);
    let n = p.ctx.n_cells();
    let mut moved = 0;
    for (i, inst) in p.train.iter().enumerate() {
        let task = Task::ALL[i % 2];
        let cfg = TrainConfig { task, ..cfg.clone() };
        let (theta, _) = score_locations(&inst.score_input, &params.scorer).unwrap();
        let eps = sample_sum_of_gamma(n, imle.sog_k, imle.s_terms, imle.temperature, &mut r).unwrap();
        let k = 1 + i % 4;
        let z = perturb_and_map(&theta, &eps, k).unwrap();
        let g = instance_grad(&p.ctx, &params, inst, &z.to_f64(), Objective::Task, &cfg).unwrap();
        let z2 = perturb_and_map(&imle_target(&theta, &g.dz, imle.lambda).unwrap(), &eps, k).unwrap();
        let d = imle_gradient(&z, &z2).unwrap();
        assert!(d.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
        assert_eq!(d.iter().sum::<f64>(), 0.0);
        moved += usize::from(d.iter().any(|v| *v != 0.0));
    }
    assert!(moved > 0, "the task loss never moved a sensor");
}

#[test]
fn checkpoints_round_trip_exactly() {
    let p = prepared(6);
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::Full, Variant::NoSt] {
        let cfg = TrainConfig { variant, pretrain_epochs: 1, e2e_epochs: 1, ..small_train(6) };
        let (params, _) = p.fit(&cfg).unwrap();
        let path = dir.path().join(variant.name());
        save_checkpoint(&params, p.ctx.n_cells(), &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.is_linear(), variant == Variant::NoSt);
    }
    let path = dir.path().join("full");
    let data = path.join(CHECKPOINT_DATA);
    let mut bytes = std::fs::read(&data).unwrap();
    bytes.pop();
    std::fs::write(&data, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    std::fs::write(path.join(CHECKPOINT_META), "{}").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}

#[test]
fn exact_solvers_are_feasible_and_truth_lower_bounds_feasible_methods() {
    let p = prepared(7);
    let cfg = TrainConfig { pretrain_epochs: 1, e2e_epochs: 1, ..small_train(7) };
    let (params, _) = p.fit(&cfg).unwrap();
    let placements = Placements::fit(&p.ctx, &p.train, 4).unwrap();
    let eval = EvalConfig::default();
    // Evaluate on all 15 scenarios for a wider paired comparison.
    let all: Vec<Instance> = p.train.iter().chain(&p.val).chain(&p.test).cloned().collect();
    for task in Task::ALL {
        let mut methods = Method::baselines();
        methods.extend(["fixed+model+ilp", "learned+model+ilp", "pca+idw+iw", "learned"].map(|m| m.parse::<Method>().unwrap()));
        let oracle = evaluate(&p.ctx, "fixed+truth+ilp".parse().unwrap(), task, &all, Some(&params), &placements, &eval, 0).unwrap();
        assert_eq!(oracle.overflow, 0.0);
        assert_eq!(oracle.pred_mse, 0.0);
        for m in methods {
            let row = evaluate(&p.ctx, m, task, &all, Some(&params), &placements, &eval, 0).unwrap();
            assert!(row.overflow >= 0.0 && row.pred_mse >= 0.0);
            if m.decider == Decider::Ilp {
                assert_eq!(row.overflow, 0.0, "{m}");
            }
            if row.overflow == 0.0 {
                assert!(oracle.decision_cost <= row.decision_cost * (1.0 + 1e-12), "{task:?} {m}: {} > {}", oracle.decision_cost, row.decision_cost);
            }
        }
    }
}

#[test]
fn timing_is_opt_in_and_positive() {
    let p = prepared(8);
    let placements = Placements::fit(&p.ctx, &p.train, 4).unwrap();
    let m: Method = "fixed+idw+ilp".parse().unwrap();
    let off = evaluate(&p.ctx, m, Task::Evac, &p.test, None, &placements, &EvalConfig::default(), 0).unwrap();
    assert_eq!(off.infer_time_s, None);
    let on = EvalConfig { timing: true, ..EvalConfig::default() };
    let row = evaluate(&p.ctx, m, Task::Evac, &p.test, None, &placements, &on, 0).unwrap();
    assert!(row.infer_time_s.unwrap() > 0.0);
    assert!(evaluate(&p.ctx, Method::LEARNED, Task::Evac, &p.test, None, &placements, &on, 0).is_err());
}

#[test]
fn ablation_has_four_reproducible_rows() {
    let suite = run_suite(&small_config(9)).unwrap();
    let cfg = TrainConfig { pretrain_epochs: 1, e2e_epochs: 1, ..small_train(9) };
    let go = || run_ablation(&suite, &DecisionConfig::default(), &ImleConfig::default(), &cfg, &EvalConfig::default()).unwrap();
    let a = go();
    assert_eq!(a.to_csv(), go().to_csv());
    let names: Vec<&str> = a.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["full", "no_st", "no_imle", "no_dfl"]);
    assert_eq!(ablation_plot_csv(&a).lines().count(), 13);
}

fn hops(ctx: &Context, a: usize, b: usize) -> f64 {
    let g = &ctx.region.graph;
    g.distance(a, b) / g.cell_size()
}

/// Instances whose depth field is a fixed bump scaled by the reading at one
/// cell. That cell is marked by its features, so a good selector must learn
/// to pick it.
fn informative_instances(ctx: &Context, cell: usize, count: usize, seed: u64) -> Vec<Instance> {
    let n = ctx.n_cells();
    let mut r = rng::stream(seed, 90);
    (0..count)
        .map(|s| {
            let level: f64 = r.random_range(-1.5..1.5);
            let mut f = Matrix::zeros(n, FEATURE_DIM);
            for i in 0..n {
                for v in f.row_mut(i) {
                    *v = 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut r);
                }
            }
            f.row_mut(cell).copy_from_slice(&[3.0, -3.0, 3.0, -3.0]);
            let mut o = Matrix::zeros(n, INSITU_DIM);
            o.set(cell, 0, level);
            let target: Vec<f64> = (0..n).map(|i| level * (-hops(ctx, cell, i) / 2.0).exp()).collect();
            Instance {
                seed: s as u64,
                features: vec![f.clone(); 3],
                insitu: vec![o; 3],
                reading: vec![0.0; n],
                score_input: f,
                evac_costs: ctx.evac_costs(&target).unwrap(),
                match_costs: ctx.match_costs(&target),
                target,
            }
        })
        .collect()
}

/// Reconstruction-only Adam steps at placements that always include `cell`,
/// so the model knows what its reading is worth before the selector trains.
fn teach_reading(ctx: &Context, params: &mut ModelParams, train: &[Instance], cell: usize, cfg: &TrainConfig) {
    let n = ctx.n_cells();
    let mut adam = crate::diffkit::Adam::new(params, cfg.lr);
    let mut r = rng::stream(cfg.seed, 91);
    for _ in 0..40 {
        let mut g = params.zeros_like();
        for inst in train.iter().take(cfg.batch_size) {
            let others: Vec<usize> = (0..cfg.k - 1).map(|_| r.random_range(0..n)).collect();
            let z = indicator(n, &[&[cell], &others[..]].concat());
            g.accumulate(&instance_grad(ctx, params, inst, &z, Objective::Reconstruction, cfg).unwrap().grad).unwrap();
        }
        adam.step(params, &g).unwrap();
    }
}

#[test]
fn selector_learns_the_single_informative_cell() {
    let suite = run_suite(&small_config(10)).unwrap();
    // Reconstruction losses here are O(0.01), so the perturbation strength
    // has to be larger than the default for a selection to ever flip.
    let imle = ImleConfig { lambda: 100.0, ..ImleConfig::default() };
    let ctx = Context::new(Arc::clone(&suite.region), DecisionConfig::default(), imle).unwrap();
    let cell = 77;
    let mut hits = 0;
    for seed in 0..10 {
        let train = informative_instances(&ctx, cell, 24, seed);
        let test = informative_instances(&ctx, cell, 5, 100 + seed);
        let cfg = TrainConfig {
            variant: Variant::NoDfl,
            batch_size: 8,
            lr: 5e-3,
            e2e_epochs: 25,
            window: 3,
            seed,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(&ctx, cfg.variant, InputScale::identity(), seed);
        teach_reading(&ctx, &mut params, &train, cell, &cfg);
        train_e2e(&mut params, &ctx, &train, &[], &cfg).unwrap();
        if test.iter().all(|inst| select(&params, inst, cfg.k).unwrap().contains(cell)) {
            hits += 1;
        }
    }
    assert!(hits >= 9, "informative cell selected in {hits} of 10 seeds");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_csv_has_one_line_per_row(costs in prop::collection::vec(0.0f64..1e4, 0..10)) {
        let table = MetricsTable {
            rows: costs
                .iter()
                .map(|&c| MetricsRow {
                    method: "m".into(),
                    task: Task::Evac,
                    decision_cost: c,
                    overflow: 0.0,
                    pred_mse: 0.0,
                    infer_time_s: None,
                    seed: 0,
                })
                .collect(),
        };
        let csv = table.to_csv();
        prop_assert_eq!(csv.lines().count(), costs.len() + 1);
        for (line, c) in csv.lines().skip(1).zip(&costs) {
            let field: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            prop_assert!((field - c).abs() <= 1e-5 * c.abs().max(1e-300));
        }
    }

    #[test]
    fn split_never_overlaps(n in 5usize..500, train in 0.1f64..0.7, val in 0.0f64..0.25) {
        let cfg = TrainConfig { train_frac: train, val_frac: val, ..TrainConfig::default() };
        if let Ok(s) = split_indices(n, &cfg) {
            prop_assert!(!s.train.is_empty() && !s.test.is_empty());
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        }
    }
}
