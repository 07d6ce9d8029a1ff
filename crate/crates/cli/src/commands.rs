use std::fs;
use std::path::{Path, PathBuf};

use dfsense_core::floodsim::{load_suite, run_suite, save_suite, ScenarioSuite};
use dfsense_core::pipeline::{
    ablation_gnuplot, ablation_plot_csv, evaluate as score, history_csv, load_checkpoint, run_ablation,
    save_checkpoint, Method, MetricsTable, Placements, Prepared, Task, Variant,
};

use crate::config::RunConfig;
use crate::{CliError, Common};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_PLOT: &str = "ablation_plot.csv";
pub const ABLATION_SCRIPT: &str = "ablation.gp";

fn config(common: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(common.config.as_deref())?.resolve(common.seed)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn summary(suite: &ScenarioSuite, k: usize) -> String {
    let r = &suite.region;
    let mass = suite.scenarios.iter().map(|s| s.mass_balance_error()).fold(0.0, f64::max);
    format!(
        "scenarios {}  cells N={}  window T={}  sensors K={}\n\
         evacuation: {} routes to {} shelters, demand {}\n\
         relocation: {} aircraft, {} hangars\n\
         max relative mass-balance error {mass:.2e}",
        suite.len(),
        r.n_cells(),
        r.window(),
        k,
        r.evac.n_routes(),
        r.evac.n_shelters(),
        r.evac.demand,
        r.matching.n_aircraft(),
        r.matching.n_hangars(),
    )
}

pub fn simulate(common: &Common, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = config(common)?;
    let out = out.unwrap_or(cfg.paths.scenarios.clone());
    let suite = run_suite(&cfg.scenario)?;
    save_suite(&suite, &out)?;
    println!("{}", summary(&suite, cfg.train.k));
    println!("written to {}", out.display());
    Ok(())
}

pub fn train(
    common: &Common,
    scenarios: Option<PathBuf>,
    out: Option<PathBuf>,
    variant: Option<Variant>,
    task: Option<Task>,
    epochs: Option<usize>,
    pretrain_epochs: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = config(common)?;
    let suite = load_suite(&scenarios.unwrap_or(cfg.paths.scenarios.clone()))?;
    let t = &mut cfg.train;
    t.window = suite.region.window();
    if let Some(v) = variant {
        t.variant = v;
    }
    if let Some(task) = task {
        t.task = task;
    }
    if let Some(e) = epochs {
        t.pretrain_epochs = e;
        t.e2e_epochs = e;
    }
    if let Some(e) = pretrain_epochs {
        t.pretrain_epochs = e;
    }
    let prepared = Prepared::new(&suite, &cfg.decision, &cfg.imle, &cfg.train, None)?;
    let (params, report) = prepared.fit(&cfg.train)?;
    let out = out.unwrap_or(cfg.paths.checkpoint.clone());
    save_checkpoint(&params, prepared.ctx.n_cells(), &out)?;
    write(&out.join(TRAIN_LOG), &history_csv(&report.history))?;
    match report.best_epoch {
        Some(e) => println!("kept end-to-end epoch {e}; checkpoint in {}", out.display()),
        None => println!("checkpoint in {}", out.display()),
    }
    Ok(())
}

fn parse_tasks(arg: Option<&str>, default: Task) -> Result<Vec<Task>, CliError> {
    match arg {
        None => Ok(vec![default]),
        Some("all") => Ok(Task::ALL.to_vec()),
        Some(s) => s
            .parse()
            .map(|t| vec![t])
            .map_err(|_| CliError::usage(format!("unknown task {s:?}; expected evac, match or all"))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    common: &Common,
    scenarios: Option<PathBuf>,
    methods: &[String],
    all_baselines: bool,
    checkpoint: Option<PathBuf>,
    task: Option<String>,
    timing: bool,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = config(common)?;
    cfg.eval.timing |= timing;
    let tasks = parse_tasks(task.as_deref(), cfg.train.task)?;
    let mut chosen: Vec<Method> = methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<Result<_, _>>()?;
    if all_baselines {
        chosen.extend(Method::baselines());
        if checkpoint.is_some() {
            chosen.push(Method::LEARNED);
        } else {
            log::warn!("no --checkpoint given; the learned row is skipped");
        }
    }
    if chosen.is_empty() {
        return Err(CliError::usage("nothing to evaluate: pass --method or --all-baselines"));
    }
    if let Some(m) = chosen.iter().find(|m| m.needs_model()) {
        if checkpoint.is_none() {
            return Err(CliError::usage(format!("method {m} needs --checkpoint")));
        }
    }
    let params = checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let suite = load_suite(&scenarios.unwrap_or(cfg.paths.scenarios.clone()))?;
    cfg.train.window = suite.region.window();
    let scale = params.as_ref().map(|p| p.scale.clone());
    let prepared = Prepared::new(&suite, &cfg.decision, &cfg.imle, &cfg.train, scale)?;
    if let Some(p) = &params {
        if p.evac_head.output_dim() != suite.region.evac.n_routes() {
            return Err(CliError::usage("checkpoint was trained on a different region"));
        }
    }
    let placements = Placements::fit(&prepared.ctx, &prepared.train, cfg.eval.k)?;
    let mut table = MetricsTable::default();
    for &task in &tasks {
        for &method in &chosen {
            table.rows.push(score(
                &prepared.ctx,
                method,
                task,
                &prepared.test,
                params.as_ref(),
                &placements,
                &cfg.eval,
                cfg.seed,
            )?);
        }
    }
    let csv = table.to_csv();
    match out {
        Some(path) => write(&path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn ablate(
    common: &Common,
    scenarios: Option<PathBuf>,
    out: Option<PathBuf>,
    task: Option<Task>,
    epochs: Option<usize>,
    pretrain_epochs: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = config(common)?;
    let suite = match scenarios {
        Some(dir) => load_suite(&dir)?,
        None => run_suite(&cfg.scenario)?,
    };
    let t = &mut cfg.train;
    t.window = suite.region.window();
    if let Some(task) = task {
        t.task = task;
    }
    if let Some(e) = epochs {
        t.pretrain_epochs = e;
        t.e2e_epochs = e;
    }
    if let Some(e) = pretrain_epochs {
        t.pretrain_epochs = e;
    }
    let table = run_ablation(&suite, &cfg.decision, &cfg.imle, &cfg.train, &cfg.eval)?;
    let out = out.unwrap_or(cfg.paths.out.clone());
    write(&out.join(ABLATION_CSV), &table.to_csv())?;
    write(&out.join(ABLATION_PLOT), &ablation_plot_csv(&table))?;
    write(&out.join(ABLATION_SCRIPT), &ablation_gnuplot(ABLATION_PLOT))?;
    print!("{}", table.to_csv());
    Ok(())
}
