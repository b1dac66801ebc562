use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dlo_core::datasets::{collect_domain_randomized, load_dataset, save_dataset};
use dlo_core::episode::{
    desired_shapes, run_battery, start_sim, stretched_shape, DesiredShape, EpisodeConfig, EpisodeLog, Method,
};
use dlo_core::evaluate::{evaluate, transformed_dataset};
use dlo_core::metrics::{summarize, summary_csv, Summary};
use dlo_core::oracle::jacobian_oracle;
use dlo_core::rbfn::RbfnJacobianModel;
use dlo_core::state::StateEncoding;
use dlo_core::train::train_offline;
use serde::Serialize;
use serde_json::json;

use crate::cli::{BenchArgs, CollectArgs, CommonArgs, ControlArgs, EvalArgs, OracleArgs, TrainArgs};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::svg::line_plot;

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "DLOLAB_WORKERS";

fn load(common: &CommonArgs) -> Result<(RunConfig, u64), CliError> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(cfg.seed);
    init_workers(&cfg)?;
    Ok((cfg, seed))
}

fn init_workers(cfg: &RunConfig) -> Result<(), CliError> {
    let from_env = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| CliError::validation(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = from_env.or(cfg.battery.workers) {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn load_model(path: &Path) -> Result<RbfnJacobianModel, CliError> {
    RbfnJacobianModel::load(path).map_err(|e| CliError::validation(format!("model {}: {e}", path.display())))
}

pub fn collect(args: &CollectArgs) -> Result<(), CliError> {
    let (cfg, seed) = load(&args.common)?;
    let duration = args.duration.unwrap_or(cfg.collection.duration);
    if !(duration > 0.0) {
        return Err(CliError::validation(format!("duration must be positive, got {duration}")));
    }
    let dlos = cfg.dlos();
    let data = collect_domain_randomized(&cfg.sim, &dlos, duration, &cfg.collection.to_core(), cfg.planar, seed)?;
    save_dataset(&data, &args.out)?;
    print_json(&json!({
        "tuples": data.len(),
        "dlos": dlos.len(),
        "seed": seed,
        "out": args.out,
    }))
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let (cfg, seed) = load(&args.common)?;
    let mut tc = cfg.training.clone();
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    if args.no_augmentation {
        tc.augmentation = false;
    }
    if args.no_scale_normalization {
        tc.encoding = StateEncoding::Unnormalized;
    }
    tc.validate()?;
    let data = load_dataset(&args.data)?;
    let (model, report) = train_offline(&data, &tc, seed)?;
    model.save(&args.out)?;
    print_json(&json!({
        "samples": data.len(),
        "out": args.out,
        "best_epoch": report.best_epoch,
        "steps": report.steps,
        "final_train_loss": report.train_loss.last(),
        "final_validation_loss": report.validation_loss.last(),
    }))
}

pub fn eval_model(args: &EvalArgs) -> Result<(), CliError> {
    let (cfg, seed) = load(&args.common)?;
    if args.steps == 0 {
        return Err(CliError::validation("steps must be positive"));
    }
    let model = load_model(&args.model)?;
    let data = load_dataset(&args.data)?;
    let dt = cfg.collection.dt;
    let original = evaluate(&model, &data, args.steps, dt)?;
    if args.transform {
        let moved = transformed_dataset(&data, dt, args.max_translation, seed);
        let transformed = evaluate(&model, &moved, args.steps, dt)?;
        print_json(&json!({ "original": original, "transformed": transformed }))
    } else {
        print_json(&json!({ "original": original }))
    }
}

pub fn oracle(args: &OracleArgs) -> Result<(), CliError> {
    let (cfg, seed) = load(&args.common)?;
    if args.count == 0 || !(args.eps > 0.0) {
        return Err(CliError::validation("oracle needs count > 0 and eps > 0"));
    }
    let report = jacobian_oracle(&cfg.sim, &cfg.dlo, args.count, seed, args.eps)?;
    print_json(&report)
}

fn parse_desired(spec: &str, cfg: &RunConfig, count: usize, seed: u64) -> Result<Vec<DesiredShape>, CliError> {
    let mask = &cfg.controller.dof_mask;
    match spec {
        "random" => Ok(desired_shapes(&cfg.sim, &cfg.dlo, &cfg.battery.desired, mask, count, seed)?),
        "initial" => {
            let s = start_sim(&cfg.sim, &cfg.dlo, cfg.planar)?;
            Ok(vec![
                DesiredShape {
                    features: s.features(),
                    ends: s.ends.clone(),
                };
                count
            ])
        }
        other => {
            let ratio = other
                .strip_prefix("stretched:")
                .and_then(|r| r.parse::<f64>().ok())
                .ok_or_else(|| CliError::validation(format!("unknown desired-shape source `{other}`")))?;
            Ok(vec![stretched_shape(&cfg.sim, &cfg.dlo, ratio)?; count])
        }
    }
}

/// Episode logs of one labelled battery run.
pub struct BatteryRun {
    pub label: String,
    pub logs: Vec<EpisodeLog>,
}

impl BatteryRun {
    pub fn summary(&self) -> Summary {
        summarize(&self.logs.iter().map(|l| l.result.clone()).collect::<Vec<_>>())
    }
}

fn run_labelled(
    label: String,
    cfg: &RunConfig,
    model: Option<&RbfnJacobianModel>,
    shapes: &[DesiredShape],
    method: Method,
    episode: &EpisodeConfig,
    seed: u64,
) -> Result<BatteryRun, CliError> {
    if method.needs_model() && model.is_none() {
        return Err(CliError::validation(format!("method {} needs --model", method.name())));
    }
    log::info!("running {label} on {} shapes", shapes.len());
    let logs = run_battery(&cfg.sim, &cfg.dlo, model, shapes, method, episode, seed)?;
    Ok(BatteryRun { label, logs })
}

/// Writes per-step JSONL traces, an episode index, the summary CSV and an
/// SVG of mean error traces.
pub fn write_outputs(dir: &Path, runs: &[BatteryRun]) -> Result<String, CliError> {
    fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(fs::File::create(dir.join("episodes.jsonl"))?);
    for run in runs {
        let sub = dir.join(&run.label);
        fs::create_dir_all(&sub)?;
        for (i, log) in run.logs.iter().enumerate() {
            let mut w = BufWriter::new(fs::File::create(sub.join(format!("episode_{i:03}.jsonl")))?);
            for step in &log.steps {
                serde_json::to_writer(&mut w, step).map_err(|e| CliError::runtime(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            let line = json!({
                "label": run.label,
                "episode": i,
                "method": log.method,
                "final_error": log.result.final_error,
                "success": log.result.success,
                "time_to_success": log.result.time_to_success,
                "translation": log.result.translation,
                "relative_deformation": log.result.relative_deformation,
                "init_time": log.init_time,
                "max_nu_norm": log.max_nu_norm,
                "max_strain": log.max_strain,
                "aborted": log.aborted,
                "lyapunov_violations": log.lyapunov_violations(1e-9),
            });
            writeln!(index, "{line}")?;
        }
    }
    index.flush()?;
    let rows: Vec<(String, Summary)> = runs.iter().map(|r| (r.label.clone(), r.summary())).collect();
    let csv = summary_csv(&rows);
    fs::write(dir.join("summary.csv"), &csv)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = runs.iter().map(|r| (r.label.clone(), mean_trace(&r.logs))).collect();
    fs::write(
        dir.join("traces.svg"),
        line_plot("Mean task error", "time (s)", "error (m)", &series),
    )?;
    Ok(csv)
}

/// Mean error per trace sample; episodes that ended early hold their last
/// value.
pub fn mean_trace(logs: &[EpisodeLog]) -> Vec<(f64, f64)> {
    let len = logs.iter().map(|l| l.result.trace.len()).max().unwrap_or(0);
    let Some(longest) = logs.iter().find(|l| l.result.trace.len() == len) else {
        return vec![];
    };
    (0..len)
        .map(|k| {
            let sum: f64 = logs
                .iter()
                .map(|l| l.result.trace.get(k).or(l.result.trace.last()).map_or(0.0, |p| p.1))
                .sum();
            (longest.result.trace[k].0, sum / logs.len() as f64)
        })
        .collect()
}

fn methods(cfg: &RunConfig, single: Option<&str>) -> Result<Vec<Method>, CliError> {
    match single {
        Some(m) => Ok(vec![m.parse::<Method>()?]),
        None => Ok(cfg.battery.methods.clone()),
    }
}

pub fn control(args: &ControlArgs) -> Result<(), CliError> {
    let (cfg, seed) = load(&args.common)?;
    let episodes = args.episodes.unwrap_or(cfg.battery.episodes);
    if episodes == 0 {
        return Err(CliError::validation("episodes must be positive"));
    }
    let methods = methods(&cfg, args.method.as_deref())?;
    let model = args.model.as_deref().map(load_model).transpose()?;
    let shapes = parse_desired(&args.desired, &cfg, episodes, seed)?;
    let episode = cfg.episode_config();
    let runs = methods
        .into_iter()
        .map(|m| run_labelled(m.name().to_string(), &cfg, model.as_ref(), &shapes, m, &episode, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let dir: PathBuf = args.out.clone().unwrap_or(cfg.output.dir.clone());
    print!("{}", write_outputs(&dir, &runs)?);
    Ok(())
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let (cfg, seed) = load(&args.common)?;
    let model = args.model.as_deref().map(load_model).transpose()?;
    let shapes = parse_desired("random", &cfg, cfg.battery.episodes, seed)?;
    let base = cfg.episode_config();
    let mut runs = vec![];
    for &m in &cfg.battery.methods {
        runs.push(run_labelled(m.name().to_string(), &cfg, model.as_ref(), &shapes, m, &base, seed)?);
    }
    for &eta in &cfg.battery.eta_sweep {
        let mut e = base.clone();
        e.adaptation.eta = eta;
        runs.push(run_labelled(format!("ours-eta-{eta}"), &cfg, model.as_ref(), &shapes, Method::Ours, &e, seed)?);
    }
    for &noise in &cfg.battery.noise_sweep {
        let mut e = base.clone();
        e.noise_std = noise;
        runs.push(run_labelled(format!("ours-noise-{noise}"), &cfg, model.as_ref(), &shapes, Method::Ours, &e, seed)?);
    }
    let dir: PathBuf = args.out.clone().unwrap_or(cfg.output.dir.clone());
    print!("{}", write_outputs(&dir, &runs)?);
    write_json(&dir.join("config.json"), &cfg)
}
