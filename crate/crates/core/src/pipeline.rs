//! The calibrate / equalize / quantize / analyze workflow behind the CLI.
//!
//! Every command reads its inputs from files named in [`PipelineConfig`]
//! (or regenerates them deterministically from the seed) and writes its
//! outputs into `output_dir`, so commands can be chained across processes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::equalize::{
    bias_correct, one_step_equalize, two_step_equalize, Equalization, TwoStepMode, DEFAULT_ATTENUATION_FLOOR,
    DEFAULT_BIAS_CORRECTION_SAMPLES, DEFAULT_S_MAX,
};
use crate::error::{Error, Result};
use crate::fixture::{make_fixture, FixtureSpec, SampleStream, Topology};
use crate::graph::Graph;
use crate::model_io::{load_annotated, save_model, Dtype, ModelPaths, Sidecar};
use crate::noise::{compare_runs, measure_sqnr, optimal_equalization_bound, BoundTarget, OptimalBound, RunSort, SqnrReport};
use crate::quant::{calibrate, quantize_graph, BitWidths, CalibrationRecord, QuantMode};
use crate::tensor::Tensor;
use crate::ActivationKind;

pub const DEFAULT_CALIBRATION_COUNT: usize = 64;
/// First sample index of the bias-correction set in a generated stream.
pub const BIAS_CORRECTION_OFFSET: u64 = 1 << 20;
/// First sample index of the held-out evaluation set in a generated stream.
pub const HELDOUT_OFFSET: u64 = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EqualizationMode {
    #[default]
    None,
    OneStep,
    TwoStep,
    TwoStepMobilenet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Model manifest. When absent the fixture described by `fixture` is used.
    pub model: Option<PathBuf>,
    /// Weights blob; defaults to the manifest path with a `.bin` extension.
    pub weights: Option<PathBuf>,
    /// Calibration record produced by `calibrate`.
    pub calibration: Option<PathBuf>,
    pub fixture: FixtureSpec,
    /// Directory of raw little-endian f64 sample files (`*.bin`, one
    /// `h*w*c` tensor each, taken in file-name order). When absent samples
    /// are drawn from a seeded uniform stream.
    pub samples_dir: Option<PathBuf>,
    pub calibration_count: usize,
    pub bits: BitWidths,
    pub s_max: f64,
    pub equalization: EqualizationMode,
    pub attenuation_floor: f64,
    pub quant_mode: QuantMode,
    pub bias_correction: bool,
    pub bias_correction_samples: usize,
    /// Measure noise on a held-out set instead of the calibration samples.
    pub heldout: bool,
    pub eval_samples: usize,
    pub sort: RunSort,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
    /// Leave batch-norm nodes unfolded on load.
    pub no_fold: bool,
    /// Emit a `# ` header line at the top of CSV artifacts.
    pub header: bool,
    /// Include a wall-clock timestamp in the header line.
    pub timestamp: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: None,
            weights: None,
            calibration: None,
            fixture: FixtureSpec::default(),
            samples_dir: None,
            calibration_count: DEFAULT_CALIBRATION_COUNT,
            bits: BitWidths::default(),
            s_max: DEFAULT_S_MAX,
            equalization: EqualizationMode::None,
            attenuation_floor: DEFAULT_ATTENUATION_FLOOR,
            quant_mode: QuantMode::Full,
            bias_correction: false,
            bias_correction_samples: DEFAULT_BIAS_CORRECTION_SAMPLES,
            heldout: false,
            eval_samples: DEFAULT_CALIBRATION_COUNT,
            sort: RunSort::ByFirstRun,
            output_dir: PathBuf::from("out"),
            seed: 0,
            threads: 1,
            no_fold: false,
            header: true,
            timestamp: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.calibration_count == 0 || self.bias_correction_samples == 0 || self.eval_samples == 0 {
            return bad("sample counts must be at least 1".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        for (name, b) in [("weight", self.bits.weights), ("activation", self.bits.activations)] {
            if !(2..=24).contains(&b) {
                return bad(format!("{name} bits must lie in [2, 24], got {b}"));
            }
        }
        if !(2..=53).contains(&self.bits.biases) {
            return bad(format!("bias bits must lie in [2, 53], got {}", self.bits.biases));
        }
        if !(self.s_max.is_finite() && self.s_max >= 1.0) {
            return bad(format!("s_max must be >= 1, got {}", self.s_max));
        }
        if !(self.attenuation_floor > 0.0 && self.attenuation_floor <= 1.0) {
            return bad(format!("attenuation floor must lie in (0, 1], got {}", self.attenuation_floor));
        }
        if self.model.is_none() {
            FixtureSpec {
                seed: self.seed,
                ..self.fixture.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn header_lines(&self, command: &str) -> Vec<String> {
        if !self.header {
            return Vec::new();
        }
        let mut line = format!(
            "eqquant {} command={command} seed={} bits={}/{}/{}",
            env!("CARGO_PKG_VERSION"),
            self.seed,
            self.bits.weights,
            self.bits.activations,
            self.bits.biases
        );
        if self.timestamp {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let _ = write!(line, " generated_unix={secs}");
        }
        vec![line]
    }
}

/// Files written by a command plus a short human-readable summary.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

impl Outcome {
    fn write(&mut self, path: PathBuf, contents: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, &text)
    }

    fn model(&mut self, cfg: &PipelineConfig, stem: &str, graph: &Graph, sidecar: Option<&Sidecar>) -> Result<()> {
        let paths = ModelPaths::new(&cfg.output_dir, stem);
        save_model(graph, &paths, Dtype::F64, stem, sidecar)?;
        self.files.push(paths.manifest);
        self.files.push(paths.weights);
        if paths.sidecar.exists() {
            self.files.push(paths.sidecar);
        }
        Ok(())
    }
}

/// Where input samples come from.
#[derive(Debug, Clone)]
pub enum SampleSource {
    Stream(SampleStream),
    Files(Vec<PathBuf>, [usize; 3]),
}

impl SampleSource {
    fn for_config(cfg: &PipelineConfig, shape: [usize; 3]) -> Result<Self> {
        let Some(dir) = &cfg.samples_dir else {
            return Ok(SampleSource::Stream(SampleStream::new(cfg.seed, shape)));
        };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::NotEnoughSamples {
                required: 1,
                available: 0,
            });
        }
        Ok(SampleSource::Files(files, shape))
    }

    fn read_file(path: &Path, shape: [usize; 3]) -> Result<Tensor> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let n = shape.iter().product::<usize>();
        if bytes.len() != n * 8 {
            return Err(Error::Format(format!(
                "{}: expected {} bytes for shape {shape:?}, found {}",
                path.display(),
                n * 8,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(vec![1, shape[0], shape[1], shape[2]], data)
    }

    /// Up to `count` samples. Generated streams give disjoint index windows
    /// per role; a directory is split in file order.
    pub fn take(&self, role: SampleRole, count: usize, calibration_count: usize) -> Result<Vec<Tensor>> {
        match self {
            SampleSource::Stream(s) => {
                let start = match role {
                    SampleRole::Calibration => 0,
                    SampleRole::BiasCorrection => BIAS_CORRECTION_OFFSET,
                    SampleRole::Heldout => HELDOUT_OFFSET,
                };
                Ok(s.batch(start, count))
            }
            SampleSource::Files(files, shape) => {
                let start = match role {
                    SampleRole::Calibration | SampleRole::BiasCorrection => 0,
                    SampleRole::Heldout => calibration_count.min(files.len()),
                };
                files
                    .iter()
                    .skip(start)
                    .take(count)
                    .map(|p| Self::read_file(p, *shape))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleRole {
    Calibration,
    BiasCorrection,
    Heldout,
}

/// Loads the configured model, or builds the configured fixture.
pub fn load_input_model(cfg: &PipelineConfig) -> Result<(Graph, Option<Sidecar>)> {
    match &cfg.model {
        Some(manifest) => {
            let mut paths = ModelPaths::from_manifest(manifest);
            if let Some(w) = &cfg.weights {
                paths.weights = w.clone();
            }
            load_annotated(&paths, !cfg.no_fold)
        }
        None => Ok((make_fixture(&fixture_spec(cfg))?, None)),
    }
}

fn fixture_spec(cfg: &PipelineConfig) -> FixtureSpec {
    FixtureSpec {
        seed: cfg.seed,
        ..cfg.fixture.clone()
    }
}

fn samples(cfg: &PipelineConfig, graph: &Graph) -> Result<SampleSource> {
    SampleSource::for_config(cfg, graph.input_shape())
}

fn calibration_samples(cfg: &PipelineConfig, src: &SampleSource) -> Result<Vec<Tensor>> {
    let xs = src.take(SampleRole::Calibration, cfg.calibration_count, cfg.calibration_count)?;
    if xs.len() < cfg.calibration_count {
        return Err(Error::NotEnoughSamples {
            required: cfg.calibration_count,
            available: xs.len(),
        });
    }
    Ok(xs)
}

/// Reads the configured calibration record, or calibrates afresh.
fn obtain_calibration(cfg: &PipelineConfig, graph: &Graph, src: &SampleSource, required: bool) -> Result<CalibrationRecord> {
    match &cfg.calibration {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let record = CalibrationRecord::from_json(&text)?;
            Ok(if record.bits == cfg.bits { record } else { record.with_bits(cfg.bits) })
        }
        None if required => Err(Error::Config(
            "this command needs --calibration (run `calibrate` first)".into(),
        )),
        None => calibrate(graph, calibration_samples(cfg, src)?, cfg.calibration_count, cfg.bits),
    }
}

/// Applies the configured equalization. `None` mode returns the inputs untouched.
/// When the analytic calibration update is inexact, the equalized graph is
/// recalibrated on the calibration samples.
pub fn equalize_with(
    cfg: &PipelineConfig,
    graph: &Graph,
    calib: &CalibrationRecord,
    src: &SampleSource,
) -> Result<Option<Equalization>> {
    let mut eq = match cfg.equalization {
        EqualizationMode::None => None,
        EqualizationMode::OneStep => Some(one_step_equalize(graph, calib, cfg.s_max)?),
        EqualizationMode::TwoStep => Some(two_step_equalize(graph, calib, cfg.s_max, TwoStepMode::Standard)?),
        EqualizationMode::TwoStepMobilenet => Some(two_step_equalize(
            graph,
            calib,
            cfg.s_max,
            TwoStepMode::Mobilenet {
                attenuation_floor: cfg.attenuation_floor,
            },
        )?),
    };
    if let Some(eq) = eq.as_mut().filter(|e| !e.recalibrate.is_empty()) {
        eq.calibration = calibrate(&eq.graph, calibration_samples(cfg, src)?, cfg.calibration_count, cfg.bits)?;
    }
    Ok(eq)
}

pub fn cmd_fixture(cfg: &PipelineConfig) -> Result<Outcome> {
    cfg.validate()?;
    let spec = fixture_spec(cfg);
    let graph = make_fixture(&spec)?;
    let mut out = Outcome::default();
    out.model(cfg, "model", &graph, None)?;
    out.summary = format!(
        "fixture: {:?} topology, {} layers, {} channels, imbalance {}",
        spec.topology,
        graph.layer_ids().len(),
        spec.channels,
        spec.imbalance
    );
    Ok(out)
}

pub fn cmd_calibrate(cfg: &PipelineConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (graph, _) = load_input_model(cfg)?;
    let src = samples(cfg, &graph)?;
    let record = calibrate(&graph, calibration_samples(cfg, &src)?, cfg.calibration_count, cfg.bits)?;
    let mut out = Outcome::default();
    out.write(cfg.out("calibration.json"), &(record.to_json()? + "\n"))?;
    out.summary = format!(
        "calibrated {} nodes on {} samples ({} diagnostics)",
        record.nodes.len(),
        record.sample_count,
        record.diagnostics.len()
    );
    Ok(out)
}

pub fn cmd_equalize(cfg: &PipelineConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (graph, _) = load_input_model(cfg)?;
    let src = samples(cfg, &graph)?;
    let calib = obtain_calibration(cfg, &graph, &src, false)?;
    let mut out = Outcome::default();
    match equalize_with(cfg, &graph, &calib, &src)? {
        None => {
            out.model(cfg, "equalized", &graph, None)?;
            out.write(cfg.out("calibration.equalized.json"), &(calib.to_json()? + "\n"))?;
            out.summary = "equalization mode `none`: model copied unchanged".into();
        }
        Some(eq) => {
            let sidecar = Sidecar {
                format_version: crate::model_io::FORMAT_VERSION,
                scales: eq.scales.clone(),
                eligibility: Some(eq.report.clone()),
                quant: Default::default(),
            };
            out.model(cfg, "equalized", &eq.graph, Some(&sidecar))?;
            out.write(cfg.out("scales.json"), &(eq.audit_json()? + "\n"))?;
            out.write(cfg.out("calibration.equalized.json"), &(eq.calibration.to_json()? + "\n"))?;
            let (before, after) = spread(&calib, &eq);
            out.summary = format!(
                "equalized {} of {} layers; mean activation extremum spread {before:.2} -> {after:.2}",
                eq.report.eligible().count(),
                eq.report.layers.len()
            );
        }
    }
    Ok(out)
}

/// Mean over eligible layers of max/min per-channel activation extremum.
fn spread(before: &CalibrationRecord, eq: &Equalization) -> (f64, f64) {
    let ratio = |c: &CalibrationRecord, id: &str| {
        let m = c.node(id).map(|n| n.activation.channel_extrema()).unwrap_or_default();
        let hi = m.iter().copied().fold(0.0, f64::max);
        let lo = m.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        if lo.is_finite() {
            hi / lo
        } else {
            1.0
        }
    };
    let ids: Vec<&str> = eq.report.eligible().collect();
    if ids.is_empty() {
        return (1.0, 1.0);
    }
    let n = ids.len() as f64;
    (
        ids.iter().map(|id| ratio(before, id)).sum::<f64>() / n,
        ids.iter().map(|id| ratio(&eq.calibration, id)).sum::<f64>() / n,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasCorrectionSummary {
    pub samples_used: usize,
    pub corrections: std::collections::BTreeMap<String, Vec<f64>>,
    pub diagnostics: Vec<String>,
}

pub fn cmd_quantize(cfg: &PipelineConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (graph, _) = load_input_model(cfg)?;
    let src = samples(cfg, &graph)?;
    let calib = obtain_calibration(cfg, &graph, &src, true)?;
    let mut quant = quantize_graph(&graph, &calib, cfg.quant_mode)?;
    let mut out = Outcome::default();
    let mut summary = format!(
        "quantized {} layers ({:?}, {}/{}/{} bits)",
        graph.layer_ids().len(),
        cfg.quant_mode,
        cfg.bits.weights,
        cfg.bits.activations,
        cfg.bits.biases
    );
    if cfg.bias_correction {
        let xs = src.take(SampleRole::BiasCorrection, cfg.bias_correction_samples, cfg.calibration_count)?;
        let bc = bias_correct(&graph, &quant, xs, cfg.bias_correction_samples)?;
        let _ = write!(summary, "; bias-corrected on {} samples", bc.samples_used);
        out.json(
            cfg.out("bias_correction.json"),
            &BiasCorrectionSummary {
                samples_used: bc.samples_used,
                corrections: bc.corrections,
                diagnostics: bc.diagnostics,
            },
        )?;
        quant = bc.graph;
    }
    out.model(cfg, "quantized", &quant, None)?;
    out.summary = summary;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub mean_sqnr_db: ModeMeans,
    pub mean_predicted_sqnr_db: PredMeans,
    pub output_mse: crate::noise::ModeValues<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_mse_bias_corrected: Option<f64>,
    pub additivity: f64,
    pub mean_oe_gap_db: OeGaps,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModeMeans {
    pub weights: f64,
    pub activations: f64,
    pub full: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PredMeans {
    pub weights: f64,
    pub activations: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OeGaps {
    pub weights: f64,
    pub activations: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSummary {
    pub samples: usize,
    pub heldout: bool,
    pub estimator: &'static str,
    pub runs: Vec<RunSummary>,
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn oe_csv(header: &[String], bounds: &[OptimalBound]) -> String {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    s.push_str("layer_id,current_sqnr_db,optimal_sqnr_db,gap_db\n");
    for b in bounds {
        let _ = writeln!(s, "{},{},{},{}", b.layer, b.current, b.optimal, b.gap_db());
    }
    s
}

/// One analyzed network state: its SQNR report and OE bounds.
pub struct AnalyzedRun {
    pub name: String,
    pub report: SqnrReport,
    pub oe_weights: Vec<OptimalBound>,
    pub oe_activations: Vec<OptimalBound>,
    pub summary: RunSummary,
}

fn analyze_run(
    cfg: &PipelineConfig,
    name: &str,
    graph: &Graph,
    calib: &CalibrationRecord,
    eval: &[Tensor],
    src: &SampleSource,
) -> Result<AnalyzedRun> {
    let report = measure_sqnr(graph, calib, eval)?;
    let oe_weights = optimal_equalization_bound(graph, calib, BoundTarget::Weights)?;
    let oe_activations = optimal_equalization_bound(graph, calib, BoundTarget::Activations)?;
    let output_mse_bias_corrected = if cfg.bias_correction {
        let quant = quantize_graph(graph, calib, QuantMode::Full)?;
        let xs = src.take(SampleRole::BiasCorrection, cfg.bias_correction_samples, cfg.calibration_count)?;
        let bc = bias_correct(graph, &quant, xs, cfg.bias_correction_samples)?;
        Some(output_mse(graph, &bc.graph, eval)?)
    } else {
        None
    };
    let summary = RunSummary {
        name: name.to_string(),
        mean_sqnr_db: ModeMeans {
            weights: report.mean_sqnr_db(QuantMode::WeightsOnly),
            activations: report.mean_sqnr_db(QuantMode::ActivationsOnly),
            full: report.mean_sqnr_db(QuantMode::Full),
        },
        mean_predicted_sqnr_db: PredMeans {
            weights: finite_mean(report.layers.iter().map(|l| l.predicted.weights.db())),
            activations: finite_mean(report.layers.iter().map(|l| l.predicted.activations.db())),
        },
        output_mse: report.output_mse,
        output_mse_bias_corrected,
        additivity: report.additivity,
        mean_oe_gap_db: OeGaps {
            weights: finite_mean(oe_weights.iter().map(OptimalBound::gap_db)),
            activations: finite_mean(oe_activations.iter().map(OptimalBound::gap_db)),
        },
    };
    Ok(AnalyzedRun {
        name: name.to_string(),
        report,
        oe_weights,
        oe_activations,
        summary,
    })
}

/// Mean squared difference between two graphs' outputs over `samples`.
pub fn output_mse(reference: &Graph, other: &Graph, samples: &[Tensor]) -> Result<f64> {
    let mut sum = crate::stats::CompensatedSum::new();
    let mut n = 0usize;
    for x in samples {
        let (a, b) = (reference.run(x)?, other.run(x)?);
        for (p, q) in a.data().iter().zip(b.data()) {
            sum.add((p - q) * (p - q));
        }
        n += a.len();
    }
    Ok(sum.value() / n as f64)
}

/// Analyzes the input network and, when an equalization mode is set, the
/// equalized one too, writing per-run CSVs, a comparison table and a summary.
pub fn analyze(cfg: &PipelineConfig, command: &str, graph: &Graph, out: &mut Outcome) -> Result<Vec<AnalyzedRun>> {
    let src = samples(cfg, graph)?;
    let calib = obtain_calibration(cfg, graph, &src, false)?;
    let eval = if cfg.heldout {
        src.take(SampleRole::Heldout, cfg.eval_samples, cfg.calibration_count)?
    } else {
        src.take(SampleRole::Calibration, cfg.eval_samples, cfg.calibration_count)?
    };
    if eval.is_empty() {
        return Err(Error::NotEnoughSamples {
            required: 1,
            available: 0,
        });
    }
    let header = cfg.header_lines(command);
    let mut runs = vec![analyze_run(cfg, "pre", graph, &calib, &eval, &src)?];
    if let Some(eq) = equalize_with(cfg, graph, &calib, &src)? {
        let name = match cfg.equalization {
            EqualizationMode::OneStep => "one_step",
            EqualizationMode::TwoStep => "two_step",
            _ => "two_step_mobilenet",
        };
        runs.push(analyze_run(cfg, name, &eq.graph, &eq.calibration, &eval, &src)?);
    }
    for r in &runs {
        out.write(cfg.out(&format!("sqnr_{}.csv", r.name)), &r.report.to_csv(&header))?;
        out.write(cfg.out(&format!("oe_weights_{}.csv", r.name)), &oe_csv(&header, &r.oe_weights))?;
        out.write(cfg.out(&format!("oe_activations_{}.csv", r.name)), &oe_csv(&header, &r.oe_activations))?;
    }
    let named: Vec<(&str, &SqnrReport)> = runs.iter().map(|r| (r.name.as_str(), &r.report)).collect();
    let mut table = String::new();
    for h in &header {
        let _ = writeln!(table, "# {h}");
    }
    table.push_str(&compare_runs(&named, cfg.sort, QuantMode::ActivationsOnly)?);
    out.write(cfg.out("comparison.csv"), &table)?;
    out.json(
        cfg.out("summary.json"),
        &AnalysisSummary {
            samples: eval.len(),
            heldout: cfg.heldout,
            estimator: crate::noise::ESTIMATOR_NOTE,
            runs: runs.iter().map(|r| r.summary.clone()).collect(),
        },
    )?;
    Ok(runs)
}

fn describe(runs: &[AnalyzedRun]) -> String {
    let mut s = String::new();
    for r in runs {
        let m = &r.summary;
        let _ = write!(
            s,
            "{:<20} SQNR dB w/a/full {:>7.2} {:>7.2} {:>7.2}  output MSE {:.4e}",
            m.name, m.mean_sqnr_db.weights, m.mean_sqnr_db.activations, m.mean_sqnr_db.full, m.output_mse.full
        );
        if let Some(bc) = m.output_mse_bias_corrected {
            let _ = write!(s, "  bias-corrected {bc:.4e}");
        }
        s.push('\n');
    }
    s
}

pub fn cmd_analyze(cfg: &PipelineConfig) -> Result<Outcome> {
    cfg.validate()?;
    let (graph, _) = load_input_model(cfg)?;
    let mut out = Outcome::default();
    let runs = analyze(cfg, "analyze", &graph, &mut out)?;
    out.summary = describe(&runs);
    Ok(out)
}

/// Built-in end-to-end reproduction on imbalanced fixtures.
pub fn cmd_demo(cfg: &PipelineConfig) -> Result<Outcome> {
    cfg.validate()?;
    let cases = [
        ("chain_relu", Topology::Chain, ActivationKind::Relu, EqualizationMode::TwoStep),
        ("depthwise_relu6", Topology::DepthwiseChain, ActivationKind::Relu6, EqualizationMode::TwoStepMobilenet),
    ];
    let mut out = Outcome::default();
    let mut text = String::new();
    for (name, topology, activation, final_mode) in cases {
        let fixture = FixtureSpec {
            topology,
            activation,
            imbalance: 100.0,
            ..cfg.fixture.clone()
        };
        let _ = writeln!(text, "== {name} (imbalance 100) ==");
        let mut all = Vec::new();
        for mode in [EqualizationMode::OneStep, final_mode] {
            let case = PipelineConfig {
                model: None,
                calibration: None,
                fixture: fixture.clone(),
                equalization: mode,
                bias_correction: true,
                output_dir: cfg.output_dir.join(name).join(format!("{mode:?}").to_lowercase()),
                ..cfg.clone()
            };
            let graph = make_fixture(&fixture_spec(&case))?;
            let runs = analyze(&case, "demo", &graph, &mut out)?;
            if all.is_empty() {
                all.extend(runs);
            } else {
                all.extend(runs.into_iter().skip(1));
            }
        }
        text.push_str(&describe(&all));
        let pre = &all[0].summary;
        let last = &all[all.len() - 1].summary;
        let _ = writeln!(
            text,
            "activation SQNR {:+.2} dB, output MSE reduced {:.2}x",
            last.mean_sqnr_db.activations - pre.mean_sqnr_db.activations,
            pre.output_mse.full / last.output_mse.full
        );
        if last.mean_sqnr_db.activations <= pre.mean_sqnr_db.activations {
            warn!("{name}: equalization did not improve mean activation SQNR");
        }
    }
    info!("demo wrote {} files", out.files.len());
    out.summary = text;
    Ok(out)
}
