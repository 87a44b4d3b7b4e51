//! Command-line front end for the calibrate / equalize / quantize / analyze pipeline.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on configuration errors
//! (with a JSON object on stderr).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use eqquant::pipeline::{self, PipelineConfig};
use eqquant::Error;

#[derive(Parser, Debug)]
#[command(name = "eqquant", version, about = "Channel equalization and quantization-noise analysis for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model manifest (weights default to the same path with `.bin`).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Calibration record written by `calibrate`.
    #[arg(long, global = true)]
    calibration: Option<PathBuf>,
    /// Directory of raw little-endian f64 sample files (`*.bin`).
    #[arg(long, global = true)]
    samples_dir: Option<PathBuf>,
    #[arg(long, short = 'o', global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample passes.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Calibration sample count.
    #[arg(long, global = true)]
    count: Option<usize>,
    #[arg(long, global = true)]
    bits_w: Option<u32>,
    #[arg(long, global = true)]
    bits_a: Option<u32>,
    #[arg(long, global = true)]
    bits_b: Option<u32>,
    #[arg(long, global = true)]
    s_max: Option<f64>,
    /// none, one-step, two-step or two-step-mobilenet.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Smallest factor two-step mobilenet mode may apply.
    #[arg(long, global = true)]
    floor: Option<f64>,
    /// weights-only, activations-only or full.
    #[arg(long, global = true)]
    quant_mode: Option<String>,
    #[arg(long, global = true)]
    bias_correction: bool,
    #[arg(long, global = true)]
    bias_correction_samples: Option<usize>,
    /// Measure noise on held-out samples instead of the calibration set.
    #[arg(long, global = true)]
    heldout: bool,
    #[arg(long, global = true)]
    eval_samples: Option<usize>,
    /// by-first-run or per-run.
    #[arg(long, global = true)]
    sort: Option<String>,
    /// Keep batch-norm nodes unfolded when loading.
    #[arg(long, global = true)]
    no_fold: bool,
    /// Drop the `# ` header line from CSV outputs.
    #[arg(long, global = true)]
    no_header: bool,
    /// Add a wall-clock timestamp to the CSV header line.
    #[arg(long, global = true)]
    timestamp: bool,

    // fixture shape
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    channels: Option<usize>,
    #[arg(long, global = true)]
    imbalance: Option<f64>,
    /// chain, residual or depthwise-chain.
    #[arg(long, global = true)]
    topology: Option<String>,
    /// linear, relu, relu6 or prelu.
    #[arg(long, global = true)]
    activation: Option<String>,
    #[arg(long, global = true)]
    input_hw: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic fixture network.
    Fixture,
    /// Record per-node ranges and energies.
    Calibrate,
    /// Rescale channels and write the equalized model and scale vectors.
    Equalize,
    /// Attach fake-quantization specs, optionally with bias correction.
    Quantize,
    /// Measured and predicted SQNR, OE bounds and pre/post comparison.
    Analyze,
    /// End-to-end run on built-in imbalanced fixtures.
    Demo,
}

fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T, Error> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("--{flag}: unrecognized value `{value}`")))
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            PipelineConfig::from_json(&text)?
        }
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    if cli.model.is_some() {
        cfg.model = cli.model.clone();
    }
    if cli.weights.is_some() {
        cfg.weights = cli.weights.clone();
    }
    if cli.calibration.is_some() {
        cfg.calibration = cli.calibration.clone();
    }
    if cli.samples_dir.is_some() {
        cfg.samples_dir = cli.samples_dir.clone();
    }
    set!(cfg.output_dir, cli.out);
    set!(cfg.seed, cli.seed);
    set!(cfg.threads, cli.threads);
    set!(cfg.calibration_count, cli.count);
    set!(cfg.bits.weights, cli.bits_w);
    set!(cfg.bits.activations, cli.bits_a);
    set!(cfg.bits.biases, cli.bits_b);
    set!(cfg.s_max, cli.s_max);
    set!(cfg.attenuation_floor, cli.floor);
    set!(cfg.bias_correction_samples, cli.bias_correction_samples);
    set!(cfg.eval_samples, cli.eval_samples);
    set!(cfg.fixture.layers, cli.layers);
    set!(cfg.fixture.channels, cli.channels);
    set!(cfg.fixture.imbalance, cli.imbalance);
    set!(cfg.fixture.input_hw, cli.input_hw);
    if let Some(m) = &cli.mode {
        cfg.equalization = parse_enum("mode", m)?;
    }
    if let Some(m) = &cli.quant_mode {
        cfg.quant_mode = parse_enum("quant-mode", m)?;
    }
    if let Some(s) = &cli.sort {
        cfg.sort = parse_enum("sort", s)?;
    }
    if let Some(t) = &cli.topology {
        cfg.fixture.topology = parse_enum("topology", t)?;
    }
    if let Some(a) = &cli.activation {
        cfg.fixture.activation = match a.as_str() {
            "prelu" => eqquant::ActivationKind::Prelu { slopes: Vec::new() },
            other => serde_json::from_value(serde_json::json!({ "kind": other }))
                .map_err(|_| Error::Config(format!("--activation: unrecognized value `{other}`")))?,
        };
    }
    cfg.bias_correction |= cli.bias_correction;
    cfg.heldout |= cli.heldout;
    cfg.no_fold |= cli.no_fold;
    cfg.header &= !cli.no_header;
    cfg.timestamp |= cli.timestamp;
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command, cfg: &PipelineConfig) -> Result<pipeline::Outcome, Error> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Fixture => pipeline::cmd_fixture(cfg),
        Command::Calibrate => pipeline::cmd_calibrate(cfg),
        Command::Equalize => pipeline::cmd_equalize(cfg),
        Command::Quantize => pipeline::cmd_quantize(cfg),
        Command::Analyze => pipeline::cmd_analyze(cfg),
        Command::Demo => pipeline::cmd_demo(cfg),
    })
}

fn report(err: &Error) -> ExitCode {
    let kind = if err.is_config() { "config" } else { "runtime" };
    eprintln!("{}", serde_json::json!({ "error": kind, "message": err.to_string() }));
    ExitCode::from(if err.is_config() { 2 } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    match run(cli.command, &cfg) {
        Ok(out) => {
            if !out.summary.is_empty() {
                println!("{}", out.summary.trim_end());
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}
