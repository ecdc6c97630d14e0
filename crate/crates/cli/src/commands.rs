//! Command implementations.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use diffcast_core::checkpoint;
use diffcast_core::data::{
    load_csv, make_inference_window, make_windows, save_csv, split, CovariateSpec, Scaler, WindowSpec,
};
use diffcast_core::memstats;
use diffcast_core::metrics::Metrics;
use diffcast_core::model::{evaluate, evaluate_persistence, ModelConfig};
use diffcast_core::scaling::{adjacency_probe, fit_loglog_slope, ProbeConfig};
use diffcast_core::synth::synth_generate;

use crate::{BenchArgs, EvalArgs, ModelFlags, PredictArgs, SynthArgs, TrainArgs};

/// Configuration-layer failures that map to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Flat JSON config file; keys mirror the command-line flags. Flags given on
/// the command line override file values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(rename = "M")]
    neighborhood: Option<usize>,
    #[serde(rename = "K")]
    top_k: Option<usize>,
    #[serde(rename = "J")]
    diffusion_steps: Option<usize>,
    heads: Option<usize>,
    hidden: Option<usize>,
    embed_dim: Option<usize>,
    alpha: Option<f64>,
    history: Option<usize>,
    forecast: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
    stride: Option<usize>,
    day_of_week: Option<bool>,
    convergence_iter: Option<usize>,
}

struct ResolvedConfig {
    model: ModelConfig,
    stride: usize,
    covariates: CovariateSpec,
}

fn resolve_config(flags: &ModelFlags, num_nodes: usize) -> anyhow::Result<ResolvedConfig> {
    let file: FileConfig = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    let defaults = ModelConfig::default();
    let neighborhood = flags
        .neighborhood
        .or(file.neighborhood)
        .unwrap_or_else(|| defaults.neighborhood.min(num_nodes.saturating_sub(1)).max(1));
    let top_k = flags
        .top_k
        .or(file.top_k)
        .unwrap_or_else(|| (neighborhood * 4 / 5).max(1).min(neighborhood - 1));

    let covariates = CovariateSpec {
        time_of_day: true,
        day_of_week: flags.day_of_week || file.day_of_week.unwrap_or(false),
    };

    let model = ModelConfig {
        num_nodes,
        neighborhood,
        top_k,
        embed_dim: flags.embed_dim.or(file.embed_dim).unwrap_or(defaults.embed_dim),
        hidden_dim: flags.hidden.or(file.hidden).unwrap_or(defaults.hidden_dim),
        heads: flags.heads.or(file.heads).unwrap_or(defaults.heads),
        diffusion_steps: flags
            .diffusion_steps
            .or(file.diffusion_steps)
            .unwrap_or(defaults.diffusion_steps),
        history: flags.history.or(file.history).unwrap_or(defaults.history),
        horizon: flags.forecast.or(file.forecast).unwrap_or(defaults.horizon),
        in_channels: covariates.in_channels(),
        out_channels: 1,
        alpha: flags.alpha.or(file.alpha).unwrap_or(defaults.alpha),
        convergence_iter: flags.convergence_iter.or(file.convergence_iter),
        batch_size: flags.batch_size.or(file.batch_size).unwrap_or(defaults.batch_size),
        learning_rate: flags.lr.or(file.lr).unwrap_or(defaults.learning_rate),
        max_epochs: flags.epochs.or(file.epochs).unwrap_or(defaults.max_epochs),
        seed: flags.seed.or(file.seed).unwrap_or(defaults.seed),
    };
    model.validate()?;
    Ok(ResolvedConfig {
        model,
        stride: flags.stride.or(file.stride).unwrap_or(1),
        covariates,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let (dataset, truth) = synth_generate(args.nodes, args.steps, args.hubs, args.seed)?;
    save_csv(&dataset, &args.out)?;
    let sidecar = args
        .sidecar
        .unwrap_or_else(|| args.out.with_extension("json"));
    write_json(&sidecar, &truth)?;
    println!(
        "wrote {} steps x {} nodes to {} (ground truth: {})",
        args.steps,
        args.nodes,
        args.out.display(),
        sidecar.display()
    );
    Ok(())
}

/// Default reporting horizons, clipped to the model's forecast length.
fn default_horizons(forecast: usize) -> Vec<usize> {
    let picks: Vec<usize> = [3usize, 6, 12].into_iter().filter(|&h| h <= forecast).collect();
    if picks.is_empty() {
        vec![forecast]
    } else {
        picks
    }
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let dataset = load_csv(&args.data)?;
    let resolved = resolve_config(&args.model, dataset.num_nodes())?;
    let cfg = &resolved.model;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;

    let ranges = split(&dataset)?;
    let scaler = Scaler::fit(&dataset, ranges.train.clone())?;
    let spec = WindowSpec {
        history: cfg.history,
        horizon: cfg.horizon,
        stride: resolved.stride,
    };
    let train_batches = make_windows(
        &dataset,
        ranges.train,
        spec,
        &scaler,
        resolved.covariates,
        cfg.batch_size,
    )?;
    let val_spec = WindowSpec { stride: 1, ..spec };
    let val_batches = make_windows(
        &dataset,
        ranges.val,
        val_spec,
        &scaler,
        resolved.covariates,
        cfg.batch_size,
    )?;

    println!(
        "training on {} ({} nodes, {} steps): N={} M={} K={} d={} hidden={} heads={} J={} alpha={} h={} f={} batches={}",
        args.data.display(),
        dataset.num_nodes(),
        dataset.num_steps(),
        cfg.num_nodes,
        cfg.neighborhood,
        cfg.top_k,
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.heads,
        cfg.diffusion_steps,
        cfg.alpha,
        cfg.history,
        cfg.horizon,
        train_batches.len(),
    );

    let log_path = args.out.join("train_log.csv");
    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log, "epoch,iter,train_loss,val_mae")?;

    let started = Instant::now();
    let outcome = diffcast_core::train::train(cfg, &train_batches, &val_batches, &scaler, |entry| {
        writeln!(
            log,
            "{},{},{:.9},{:.9}",
            entry.epoch, entry.iter, entry.train_loss, entry.val_mae
        )
        .expect("writing epoch log");
        println!(
            "epoch {:>3} iter {:>6} train_loss {:.6} val_mae {:.6}",
            entry.epoch, entry.iter, entry.train_loss, entry.val_mae
        );
    })?;
    log.flush()?;

    let ckpt_path = args.out.join("model.ckpt");
    checkpoint::save(
        &ckpt_path,
        &outcome.model,
        &scaler,
        &outcome.optimizer,
        outcome.iterations as u64,
    )?;

    let horizons = default_horizons(cfg.horizon);
    let metrics = evaluate(&outcome.model, &val_batches, &scaler, &horizons)?;
    let metrics_path = args.out.join("metrics.json");
    write_json(&metrics_path, &as_string_keys(&metrics))?;

    println!(
        "done in {:.1?}: best val MAE {:.6}; wrote {}, {}, {}",
        started.elapsed(),
        outcome.best_val_mae,
        ckpt_path.display(),
        log_path.display(),
        metrics_path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

fn as_string_keys(
    metrics: &std::collections::BTreeMap<usize, Metrics>,
) -> std::collections::BTreeMap<String, Metrics> {
    metrics
        .iter()
        .map(|(h, m)| (h.to_string(), *m))
        .collect()
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    let cfg = loaded.model.config().clone();
    for &h in &args.horizon {
        if h == 0 || h > cfg.horizon {
            return Err(ConfigError(format!(
                "horizon {h} outside the model's forecast range 1..={}",
                cfg.horizon
            ))
            .into());
        }
    }

    let dataset = load_csv(&args.data)?;
    if dataset.num_nodes() != cfg.num_nodes {
        return Err(diffcast_core::CoreError::data(format!(
            "dataset has {} nodes but the checkpoint was trained on {}",
            dataset.num_nodes(),
            cfg.num_nodes
        ))
        .into());
    }
    let ranges = split(&dataset)?;
    let range = match args.split {
        EvalSplit::Train => ranges.train,
        EvalSplit::Val => ranges.val,
        EvalSplit::Test => ranges.test,
        EvalSplit::All => 0..dataset.num_steps(),
    };
    let covariates = CovariateSpec {
        time_of_day: true,
        day_of_week: cfg.in_channels > 2,
    };
    let spec = WindowSpec {
        history: cfg.history,
        horizon: cfg.horizon,
        stride: 1,
    };
    let batches = make_windows(&dataset, range, spec, &loaded.scaler, covariates, cfg.batch_size)?;

    let metrics = evaluate(&loaded.model, &batches, &loaded.scaler, &args.horizon)?;
    let persistence = evaluate_persistence(&batches, &loaded.scaler, &args.horizon, cfg.history)?;

    println!("horizon        mae       rmse       mape   (persistence mae)");
    for &h in &args.horizon {
        println!(
            "{:>7} {:>10.5} {:>10.5} {:>9.2}%   ({:.5})",
            h,
            metrics[&h].mae,
            metrics[&h].rmse,
            metrics[&h].mape * 100.0,
            persistence[&h].mae
        );
    }
    write_json(&args.out, &as_string_keys(&metrics))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn predict(args: PredictArgs) -> anyhow::Result<()> {
    let loaded = checkpoint::load(&args.checkpoint)?;
    let cfg = loaded.model.config().clone();
    let dataset = load_csv(&args.data)?;
    if dataset.num_nodes() != cfg.num_nodes {
        return Err(diffcast_core::CoreError::data(format!(
            "dataset has {} nodes but the checkpoint was trained on {}",
            dataset.num_nodes(),
            cfg.num_nodes
        ))
        .into());
    }
    let covariates = CovariateSpec {
        time_of_day: true,
        day_of_week: cfg.in_channels > 2,
    };
    let window = make_inference_window(&dataset, cfg.history, cfg.horizon, &loaded.scaler, covariates)?;
    let predictions = loaded.model.predict_batch(&window, &loaded.scaler)?;

    let interval = dataset.interval();
    let last_ts = *dataset.timestamps().last().expect("non-empty dataset");
    let mut out = String::new();
    out.push_str("timestamp");
    for name in dataset.node_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let n = cfg.num_nodes;
    for step in 0..cfg.horizon {
        out.push_str(&(last_ts + (step as i64 + 1) * interval).to_string());
        for node in 0..n {
            out.push(',');
            out.push_str(&format!("{}", predictions.data()[(step * n) + node]));
        }
        out.push('\n');
    }
    fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} forecast rows x {} nodes to {}",
        cfg.horizon,
        n,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Spread {
    min: f64,
    median: f64,
    max: f64,
}

impl Spread {
    fn of(mut values: Vec<f64>) -> Spread {
        values.sort_by(f64::total_cmp);
        Spread {
            min: values[0],
            median: values[values.len() / 2],
            max: values[values.len() - 1],
        }
    }
}

#[derive(Debug, Serialize)]
struct BenchEntry {
    nodes: usize,
    peak_bytes: Spread,
    wall_ms: Spread,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    neighborhood: usize,
    dense_mode: bool,
    repetitions: usize,
    entries: Vec<BenchEntry>,
    memory_slope: f64,
}

pub fn bench(args: BenchArgs) -> anyhow::Result<()> {
    if args.bench_n.len() < 2 {
        return Err(ConfigError("bench needs at least two node counts".into()).into());
    }
    if args.repetitions == 0 {
        return Err(ConfigError("repetitions must be >= 1".into()).into());
    }

    let mut entries = Vec::new();
    for &nodes in &args.bench_n {
        if !args.dense_mode && args.neighborhood >= nodes {
            return Err(ConfigError(format!(
                "slim probe needs M < N, got M = {} and N = {nodes}",
                args.neighborhood
            ))
            .into());
        }
        let mut peaks = Vec::new();
        let mut walls = Vec::new();
        for rep in 0..args.repetitions {
            let probe = ProbeConfig {
                num_nodes: nodes,
                neighborhood: if args.dense_mode { nodes } else { args.neighborhood },
                top_k: (args.neighborhood * 4 / 5).max(1),
                embed_dim: args.embed_dim,
                heads: args.heads,
                alpha: args.alpha,
                dense: args.dense_mode,
                seed: args.seed.wrapping_add(rep as u64),
                ..ProbeConfig::default()
            };
            let started = Instant::now();
            let (result, peak) = memstats::measure_peak(|| adjacency_probe(&probe));
            result?;
            walls.push(started.elapsed().as_secs_f64() * 1e3);
            peaks.push(peak as f64);
        }
        println!(
            "N = {:>6}: peak {:>12.0} bytes (median), wall {:>8.1} ms (median)",
            nodes,
            Spread::of(peaks.clone()).median,
            Spread::of(walls.clone()).median
        );
        entries.push(BenchEntry {
            nodes,
            peak_bytes: Spread::of(peaks),
            wall_ms: Spread::of(walls),
        });
    }

    let xs: Vec<f64> = entries.iter().map(|e| e.nodes as f64).collect();
    let ys: Vec<f64> = entries.iter().map(|e| e.peak_bytes.median).collect();
    let memory_slope = fit_loglog_slope(&xs, &ys);
    println!(
        "log-log memory slope vs N: {memory_slope:.3} ({} route)",
        if args.dense_mode { "dense" } else { "slim" }
    );

    let report = BenchReport {
        neighborhood: args.neighborhood,
        dense_mode: args.dense_mode,
        repetitions: args.repetitions,
        entries,
        memory_slope,
    };
    write_json(&args.out, &report)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
