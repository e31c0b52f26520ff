use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use saep::gradcheck::gradcheck_suite;
use saep::layers::{build_report, select_layers as pick_layers, LayerSimilarityReport};
use saep::npy::tensor_to_npy;
use saep::projector::{load_features, load_weights, save_checkpoint};
use saep::train::{demo_config, train_probe, TrainOptions};
use saep::{
    cost_report, saep_forward, saep_init, Error, MultiLevelFeatures, Result, Rng, SaepConfig,
};
use serde_json::json;

pub const THREADS_ENV: &str = "SAEP_THREADS";

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Arg(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Truncated { .. } => 3,
        Error::Shape(_) | Error::Numeric(_) | Error::Config(_) => 4,
    }
}

pub fn report_error(e: &Error) -> ExitCode {
    eprintln!("{}: {e}", e.code());
    ExitCode::from(exit_code(e))
}

/// Caps rayon's worker count from `SAEP_THREADS`.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Arg(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Arg(format!("cannot size thread pool: {e}")))
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json serializes")
    );
}

pub fn project(features: &Path, params: &Path, config: &Path, out: &Path) -> Result<()> {
    let config = SaepConfig::load(config)?;
    config.validate()?;
    let weights = load_weights(params, &config)?;
    let features = load_features(features, &config)?;
    let (tokens, _) = saep_forward(&features, &weights, &config)?;
    tensor_to_npy(&tokens.tokens, out)?;
    print_json(&json!(cost_report(&config)));
    Ok(())
}

pub fn init(config_path: &Path, out: &Path) -> Result<()> {
    let config = SaepConfig::load(config_path)?;
    let params = saep_init(&config, &mut Rng::new(config.seed))?;
    save_checkpoint(out, &params.weights, &config)?;
    print_json(&json!({
        "checkpoint": out.display().to_string(),
        "config": config,
        "parameters": params.weights.tensors().iter().map(|t| t.len()).sum::<usize>(),
    }));
    Ok(())
}

pub fn analyze_layers(dumps: &Path, out: &Path) -> Result<()> {
    let report = build_report(dumps)?;
    let mut text = report.to_json();
    text.push('\n');
    write_text_atomic(out, &text)?;
    print_json(&json!(report));
    Ok(())
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Arg(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    std::fs::write(&tmp, text).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io(e)
    })
}

pub fn select_layers(report: &Path, k: usize, last: Option<usize>) -> Result<()> {
    let report = LayerSimilarityReport::load(report)?;
    let selection = pick_layers(&report, k, last)?;
    print_json(&json!(selection));
    Ok(())
}

const WARMUP: usize = 5;

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn bench(config: &SaepConfig, iters: usize) -> Result<()> {
    if iters == 0 {
        return Err(Error::Arg("--iters must be at least 1".into()));
    }
    config.validate().map_err(|e| Error::Arg(e.to_string()))?;
    let mut rng = Rng::new(config.seed);
    let params = saep_init(config, &mut rng)?;
    let grids = (0..config.k)
        .map(|_| {
            saep::rand_uniform(&mut rng, &[config.h, config.w, config.c], -1.0, 1.0)
                .and_then(saep::FeatureGrid::new)
        })
        .collect::<Result<Vec<_>>>()?;
    let features = MultiLevelFeatures::new((1..=config.k).collect(), grids)?;

    for _ in 0..WARMUP {
        saep_forward(&features, &params.weights, config)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        let (tokens, _) = saep_forward(&features, &params.weights, config)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(tokens);
    }
    times.sort_by(f64::total_cmp);
    let median = if iters % 2 == 1 {
        times[iters / 2]
    } else {
        0.5 * (times[iters / 2 - 1] + times[iters / 2])
    };
    let cost = cost_report(config);
    let tokens_per_second = cost.tokens_out as f64 / (median / 1e3);
    print_json(&json!({
        "iters": iters,
        "warmup": WARMUP,
        "median_ms": median,
        "p95_ms": percentile(&times, 0.95),
        "tokens_per_second": tokens_per_second,
        "threads": rayon::current_num_threads(),
        "cost": cost,
    }));
    Ok(())
}

pub fn gradcheck(seed: u64, eps: f64) -> Result<()> {
    let report = gradcheck_suite(seed, eps)?;
    print_json(&json!(report));
    if report.violations > 0 {
        return Err(Error::Numeric(format!(
            "{} gradient elements exceed tolerance",
            report.violations
        )));
    }
    Ok(())
}

pub fn train_demo(steps: u64, seed: u64, shuffle_ablation: bool, csv: Option<&Path>) -> Result<()> {
    let config = demo_config(seed);
    let opts = TrainOptions {
        steps,
        seed,
        ..TrainOptions::default()
    };
    let report = train_probe(&config, &opts)?;
    if let Some(path) = csv {
        write_text_atomic(path, &report.to_csv())?;
    }
    let shuffled = if shuffle_ablation {
        Some(train_probe(
            &config,
            &TrainOptions {
                shuffle_tokens: true,
                ..opts
            },
        )?)
    } else {
        None
    };
    let losses: Vec<f64> = report.steps.iter().map(|r| r.loss).collect();
    print_json(&json!({
        "task": "quadrant",
        "config": config,
        "steps": steps,
        "seed": seed,
        "batch_size": opts.batch_size,
        "lr": opts.lr,
        "eval_samples": opts.eval_samples,
        "initial_loss": report.initial_loss,
        "eval_loss": report.eval_loss,
        "accuracy": report.accuracy,
        "shuffled_accuracy": shuffled.as_ref().map(|r| r.accuracy),
        "accuracy_drop": shuffled.as_ref().map(|r| report.accuracy - r.accuracy),
        "loss_trace": losses,
    }));
    Ok(())
}
