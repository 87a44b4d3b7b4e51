//! Channel equalization by inversely-proportional factorization.
//!
//! Scaling output channel `i` of a layer (kernel slice and bias) by `c_i > 0`
//! scales its post-activation output by `c_i` whenever the activation is
//! positively homogeneous. Dividing every consumer weight that reads channel
//! `i` by `c_i` then leaves the network function unchanged. The passes here
//! pick `c` per layer, in topological order, so that per-channel weight and
//! activation extrema move toward the layer extremum.

use std::collections::BTreeMap;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeKind, Taps};
use crate::quant::{CalibrationRecord, TensorStats};
use crate::stats::CompensatedSum;
use crate::tensor::Tensor;

pub const DEFAULT_S_MAX: f64 = 16.0;
pub const DEFAULT_ATTENUATION_FLOOR: f64 = 0.7;
pub const RELU6_CEILING: f64 = 6.0;
pub const DEFAULT_BIAS_CORRECTION_SAMPLES: usize = 1000;
pub const MIN_BIAS_CORRECTION_SAMPLES: usize = 32;

/// Per-output-channel factors applied to one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    pub layer: String,
    pub factors: Vec<f64>,
    pub s_max: f64,
}

impl ScaleVector {
    pub fn ones(layer: impl Into<String>, channels: usize, s_max: f64) -> Self {
        Self {
            layer: layer.into(),
            factors: vec![1.0; channels],
            s_max,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.factors.iter().all(|&f| f == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NonHomogeneousActivation,
    JunctionConsumer,
    NetworkOutput,
    NoCalibration,
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SkipReason::NonHomogeneousActivation => "non-homogeneous activation",
            SkipReason::JunctionConsumer => "junction consumer",
            SkipReason::NetworkOutput => "network output",
            SkipReason::NoCalibration => "no calibration",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum Eligibility {
    Eligible,
    Skipped(SkipReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEligibility {
    pub layer: String,
    #[serde(flatten)]
    pub eligibility: Eligibility,
}

/// One entry per layer, in topological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EligibilityReport {
    pub layers: Vec<LayerEligibility>,
}

impl EligibilityReport {
    pub fn get(&self, layer: &str) -> Option<Eligibility> {
        self.layers.iter().find(|l| l.layer == layer).map(|l| l.eligibility)
    }

    pub fn eligible(&self) -> impl Iterator<Item = &str> {
        self.layers
            .iter()
            .filter(|l| l.eligibility == Eligibility::Eligible)
            .map(|l| l.layer.as_str())
    }
}

/// How `factorize_pair` treats a ReLU6 producer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relu6Policy {
    Reject,
    /// The caller guarantees `c_i * x <= 6` over the data of interest.
    Attested,
}

/// Whether `layer` may be rescaled against its consumers.
pub fn eligibility(
    graph: &Graph,
    layer: &str,
    calib: Option<&CalibrationRecord>,
    relu6: Relu6Policy,
) -> Result<Eligibility> {
    let l = graph.layer(layer)?;
    if !l.activation.is_positively_homogeneous() && relu6 == Relu6Policy::Reject {
        return Ok(Eligibility::Skipped(SkipReason::NonHomogeneousActivation));
    }
    let consumers = graph.successors(layer)?;
    if graph.is_output(layer) || consumers.is_empty() {
        return Ok(Eligibility::Skipped(SkipReason::NetworkOutput));
    }
    if consumers.iter().any(|n| !matches!(n.kind, NodeKind::Layer(_))) {
        return Ok(Eligibility::Skipped(SkipReason::JunctionConsumer));
    }
    if let Some(c) = calib {
        if !c.nodes.contains_key(layer) {
            return Ok(Eligibility::Skipped(SkipReason::NoCalibration));
        }
    }
    Ok(Eligibility::Eligible)
}

/// Scales output channel `i` of `layer` (kernel and bias) by `factors[i]` and
/// divides the matching input-channel weights of every consumer.
pub fn factorize_pair(graph: &Graph, layer: &str, factors: &[f64]) -> Result<Graph> {
    factorize_pair_with(graph, layer, factors, Relu6Policy::Reject)
}

pub fn factorize_pair_with(graph: &Graph, layer: &str, factors: &[f64], relu6: Relu6Policy) -> Result<Graph> {
    if let Eligibility::Skipped(reason) = eligibility(graph, layer, None, relu6)? {
        return Err(Error::Ineligible {
            layer: layer.to_string(),
            reason: reason.to_string(),
        });
    }
    let channels = graph.layer(layer)?.out_channels();
    if factors.len() != channels {
        return Err(Error::ShapeMismatch {
            context: format!("factorize_pair({layer})"),
            dimension: "scale vector length",
            expected: channels,
            actual: factors.len(),
        });
    }
    if let Some((channel, &value)) = factors.iter().enumerate().find(|(_, f)| !(f.is_finite() && **f > 0.0)) {
        return Err(Error::NonPositiveFactor { channel, value });
    }
    let consumers: Vec<String> = graph.successors(layer)?.iter().map(|n| n.id.clone()).collect();
    let mut out = graph.clone();
    {
        let l = out.layer_mut(layer)?;
        l.scale_output_channels(factors)?;
        l.bias = l.bias.scale_channels(factors)?;
    }
    for c in consumers {
        out.layer_mut(&c)?.divide_input_channels(factors)?;
    }
    Ok(out)
}

fn ratio(layer_max: f64, channel_max: f64) -> f64 {
    if channel_max == 0.0 {
        f64::INFINITY
    } else {
        layer_max / channel_max
    }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// One-step factors: `min(kerMax / kerChMax, actMax / actChMax, s_max)`.
///
/// Channels whose weight or activation extremum is zero get an infinite
/// ratio and fall through to `s_max` (or the other ratio); each such channel
/// produces a diagnostic.
pub fn one_step_factors(kernel_max: &[f64], act_max: &[f64], s_max: f64) -> (Vec<f64>, Vec<String>) {
    let k_top = max_of(kernel_max);
    let a_top = max_of(act_max);
    let mut diags = Vec::new();
    let factors = kernel_max
        .iter()
        .zip(act_max)
        .enumerate()
        .map(|(i, (&k, &a))| {
            if k == 0.0 || a == 0.0 {
                diags.push(format!(
                    "channel {i}: dead channel (kernel max {k}, activation max {a}); ratio clamped by s_max"
                ));
            }
            ratio(k_top, k).min(ratio(a_top, a)).min(s_max)
        })
        .collect();
    (factors, diags)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TwoStepMode {
    /// Normalize by `min(scale)` so every factor is at least 1.
    #[default]
    Standard,
    /// Skip the normalization and allow attenuation down to `attenuation_floor`.
    Mobilenet { attenuation_floor: f64 },
}

/// Two-step factors: the one-step ratios weighted by `sucInChMax / sucInMax`.
pub fn two_step_factors(
    kernel_max: &[f64],
    act_max: &[f64],
    successor_in_max: &[f64],
    s_max: f64,
    mode: TwoStepMode,
) -> (Vec<f64>, Vec<String>) {
    let k_top = max_of(kernel_max);
    let a_top = max_of(act_max);
    let s_top = max_of(successor_in_max);
    let mut diags = Vec::new();
    let weights: Vec<f64> = if s_top == 0.0 {
        diags.push("successor weights are all zero; falling back to one-step ratios".to_string());
        vec![1.0; successor_in_max.len()]
    } else {
        successor_in_max.iter().map(|s| s / s_top).collect()
    };
    // `None` marks channels no successor reads.
    let raw: Vec<Option<f64>> = (0..kernel_max.len())
        .map(|i| {
            let (k, a, r) = (kernel_max[i], act_max[i], weights[i]);
            if r == 0.0 {
                diags.push(format!("channel {i}: unread by every successor; factor fixed at 1"));
                return None;
            }
            if k == 0.0 || a == 0.0 {
                diags.push(format!(
                    "channel {i}: dead channel (kernel max {k}, activation max {a}); ratio clamped by s_max"
                ));
            }
            Some((ratio(k_top, k) * r).min(ratio(a_top, a) * r).min(s_max))
        })
        .collect();
    let factors = match mode {
        TwoStepMode::Standard => {
            let lowest = raw.iter().flatten().copied().fold(f64::INFINITY, f64::min);
            raw.iter()
                .map(|f| match f {
                    Some(f) if lowest.is_finite() => f / lowest,
                    _ => 1.0,
                })
                .collect()
        }
        TwoStepMode::Mobilenet { attenuation_floor } => {
            raw.iter().map(|f| f.unwrap_or(1.0).max(attenuation_floor)).collect()
        }
    };
    (factors, diags)
}

/// Channels that may be amplified under ReLU6: calibrated max strictly below 6.
pub fn relu6_guard(act_max: &[f64]) -> Vec<bool> {
    act_max.iter().map(|&m| m < RELU6_CEILING).collect()
}

/// Caps amplification so `c_i * max_i <= 6` on amplifiable channels and
/// `c_i <= 1` elsewhere. Attenuation passes through untouched.
pub fn apply_relu6_guard(factors: &[f64], act_max: &[f64]) -> Vec<f64> {
    factors
        .iter()
        .zip(act_max)
        .zip(relu6_guard(act_max))
        .map(|((&c, &m), amplifiable)| {
            if c <= 1.0 {
                c
            } else if amplifiable {
                if m > 0.0 {
                    c.min(RELU6_CEILING / m)
                } else {
                    c
                }
            } else {
                1.0
            }
        })
        .collect()
}

/// Snapshot of one layer's extrema around its own rescaling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualizationStep {
    pub layer: String,
    pub kernel_max_before: f64,
    pub kernel_max_after: f64,
    pub activation_max_before: f64,
    pub activation_max_after: f64,
}

#[derive(Debug, Clone)]
pub struct Equalization {
    pub graph: Graph,
    /// Calibration with activation statistics updated analytically and weight
    /// statistics recomputed from the rewritten kernels.
    pub calibration: CalibrationRecord,
    /// One vector per layer in topological order; skipped layers get all-ones.
    pub scales: Vec<ScaleVector>,
    pub report: EligibilityReport,
    pub steps: Vec<EqualizationStep>,
    pub diagnostics: Vec<String>,
    /// Layers that attenuated a saturated ReLU6 channel. Their outputs are no
    /// longer a rescaling of the originals, so statistics from them onward
    /// must be re-measured rather than taken from `calibration`.
    pub recalibrate: Vec<String>,
}

impl Equalization {
    pub fn scale(&self, layer: &str) -> Option<&ScaleVector> {
        self.scales.iter().find(|s| s.layer == layer)
    }

    /// JSON audit document with scale vectors and the eligibility report.
    pub fn audit_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Audit<'a> {
            scales: &'a [ScaleVector],
            eligibility: &'a EligibilityReport,
            diagnostics: &'a [String],
        }
        Ok(serde_json::to_string_pretty(&Audit {
            scales: &self.scales,
            eligibility: &self.report,
            diagnostics: &self.diagnostics,
        })?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pass {
    OneStep,
    TwoStep(TwoStepMode),
}

fn check_s_max(s_max: f64) -> Result<()> {
    if !(s_max.is_finite() && s_max >= 1.0) {
        return Err(Error::Config(format!("s_max must be finite and >= 1, got {s_max}")));
    }
    Ok(())
}

fn successor_in_max(graph: &Graph, layer: &str) -> Result<Vec<f64>> {
    let mut out: Option<Vec<f64>> = None;
    for node in graph.successors(layer)? {
        let m = graph.layer(&node.id)?.kernel_in_channel_max();
        out = Some(match out {
            None => m,
            Some(prev) => prev.iter().zip(&m).map(|(a, b)| a.max(*b)).collect(),
        });
    }
    Ok(out.unwrap_or_default())
}

fn run_pass(graph: &Graph, calib: &CalibrationRecord, s_max: f64, pass: Pass) -> Result<Equalization> {
    check_s_max(s_max)?;
    if let Pass::TwoStep(TwoStepMode::Mobilenet { attenuation_floor }) = pass {
        if !(attenuation_floor > 0.0 && attenuation_floor <= 1.0) {
            return Err(Error::Config(format!(
                "attenuation floor must lie in (0, 1], got {attenuation_floor}"
            )));
        }
    }
    if graph.nodes().iter().any(|n| matches!(n.kind, NodeKind::BatchNorm(_))) {
        return Err(Error::UnsupportedTopology {
            node: graph.input_id().to_string(),
            message: "fold batch-norms before equalizing".into(),
        });
    }
    let mut g = graph.clone();
    let mut cal = calib.clone();
    let mut scales = Vec::new();
    let mut report = EligibilityReport::default();
    let mut steps = Vec::new();
    let mut diagnostics = Vec::new();
    let mut recalibrate = Vec::new();

    for id in graph.layer_ids() {
        let channels = g.layer(&id)?.out_channels();
        let status = eligibility(&g, &id, Some(&cal), Relu6Policy::Attested)?;
        report.layers.push(LayerEligibility {
            layer: id.clone(),
            eligibility: status,
        });
        if let Eligibility::Skipped(reason) = status {
            if reason == SkipReason::JunctionConsumer {
                diagnostics.push(format!("`{id}` skipped: junction consumer"));
            }
            scales.push(ScaleVector::ones(&id, channels, s_max));
            continue;
        }

        let layer = g.layer(&id)?;
        let kernel_max = layer.kernel_out_channel_max();
        let act_stats: &TensorStats = &cal.node(&id)?.activation;
        let act_max = act_stats.channel_extrema();
        let (mut factors, notes) = match pass {
            Pass::OneStep => one_step_factors(&kernel_max, &act_max, s_max),
            Pass::TwoStep(mode) => {
                let succ = successor_in_max(&g, &id)?;
                two_step_factors(&kernel_max, &act_max, &succ, s_max, mode)
            }
        };
        if layer.activation == ActivationKind::Relu6 {
            factors = apply_relu6_guard(&factors, &act_max);
            if factors.iter().zip(&act_max).any(|(&c, &m)| c < 1.0 && m >= RELU6_CEILING) {
                diagnostics.push(format!("`{id}` attenuates saturated ReLU6 channels; re-measure its statistics"));
                recalibrate.push(id.clone());
            }
        }
        for n in notes {
            diagnostics.push(format!("`{id}` {n}"));
        }

        let kernel_max_before = max_of(&kernel_max);
        let activation_max_before = act_stats.extremum();
        g = factorize_pair_with(&g, &id, &factors, Relu6Policy::Attested)?;
        let stats = &mut cal.nodes.get_mut(&id).expect("checked by eligibility").activation;
        stats.scale_channels(&factors);
        steps.push(EqualizationStep {
            layer: id.clone(),
            kernel_max_before,
            kernel_max_after: g.layer(&id)?.kernel.abs_max(),
            activation_max_before,
            activation_max_after: stats.extremum(),
        });
        scales.push(ScaleVector {
            layer: id,
            factors,
            s_max,
        });
    }
    cal.refresh_weights(&g);
    for d in &diagnostics {
        warn!("{d}");
    }
    info!(
        "equalized {} of {} layers",
        report.eligible().count(),
        report.layers.len()
    );
    Ok(Equalization {
        graph: g,
        calibration: cal,
        scales,
        report,
        steps,
        diagnostics,
        recalibrate,
    })
}

/// Greedy one-step equalization over the graph in topological order.
pub fn one_step_equalize(graph: &Graph, calib: &CalibrationRecord, s_max: f64) -> Result<Equalization> {
    run_pass(graph, calib, s_max, Pass::OneStep)
}

/// Two-step equalization: first shrink the layer's extrema against the
/// successor's per-input-channel maxima, then equalize.
pub fn two_step_equalize(
    graph: &Graph,
    calib: &CalibrationRecord,
    s_max: f64,
    mode: TwoStepMode,
) -> Result<Equalization> {
    run_pass(graph, calib, s_max, Pass::TwoStep(mode))
}

/// Outcome of [`bias_correct`].
#[derive(Debug, Clone)]
pub struct BiasCorrection {
    pub graph: Graph,
    /// Bias change applied to each layer, per channel, after snapping to the bias grid.
    pub corrections: BTreeMap<String, Vec<f64>>,
    pub samples_used: usize,
    pub diagnostics: Vec<String>,
}

/// Per-channel means of a node's output over a sample set.
pub fn channel_means(graph: &Graph, samples: &[Tensor], node: &str) -> Result<Vec<f64>> {
    let channels = graph.output_shape(node)?[2];
    let taps = Taps::Only([node.to_string()].into_iter().collect());
    let partial: Vec<(Vec<f64>, u64)> = samples
        .par_iter()
        .map(|x| -> Result<_> {
            let exec = graph.execute(x, &taps)?;
            let t = &exec.taps[node];
            let mut sums = vec![0.0; channels];
            for row in t.data().chunks_exact(channels) {
                for (s, v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
            Ok((sums, (t.len() / channels) as u64))
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![CompensatedSum::new(); channels];
    let mut count = 0u64;
    for (sums, n) in &partial {
        for (a, s) in acc.iter_mut().zip(sums) {
            a.add(*s);
        }
        count += n;
    }
    Ok(acc.iter().map(|a| a.value() / count as f64).collect())
}

/// Per-channel `float mean - quant mean` of a node's output.
pub fn mean_gap(float_graph: &Graph, quant_graph: &Graph, samples: &[Tensor], node: &str) -> Result<Vec<f64>> {
    let f = channel_means(float_graph, samples, node)?;
    let q = channel_means(quant_graph, samples, node)?;
    Ok(f.iter().zip(&q).map(|(a, b)| a - b).collect())
}

fn same_structure(a: &Graph, b: &Graph) -> bool {
    a.input_id() == b.input_id()
        && a.input_shape() == b.input_shape()
        && a.outputs() == b.outputs()
        && a.nodes().len() == b.nodes().len()
        && a.nodes().iter().zip(b.nodes()).all(|(x, y)| {
            x.id == y.id
                && x.inputs == y.inputs
                && match (&x.kind, &y.kind) {
                    (NodeKind::Layer(l), NodeKind::Layer(m)) => l.op == m.op && l.kernel.shape() == m.kernel.shape(),
                    (NodeKind::Junction(j), NodeKind::Junction(k)) => j == k,
                    (NodeKind::BatchNorm(_), NodeKind::BatchNorm(_)) => true,
                    _ => false,
                }
        })
}

/// Shifts each quantized layer's bias so its per-channel output mean matches
/// the float network's, layer by layer in topological order so that upstream
/// corrections are seen downstream.
pub fn bias_correct<I>(float_graph: &Graph, quant_graph: &Graph, samples: I, count: usize) -> Result<BiasCorrection>
where
    I: IntoIterator<Item = Tensor>,
{
    if !same_structure(float_graph, quant_graph) {
        return Err(Error::InvalidGraph(
            "bias correction needs structurally identical float and quantized graphs".into(),
        ));
    }
    let batch: Vec<Tensor> = samples.into_iter().take(count).collect();
    let mut diagnostics = Vec::new();
    if batch.len() < count {
        if batch.len() < MIN_BIAS_CORRECTION_SAMPLES {
            return Err(Error::NotEnoughSamples {
                required: MIN_BIAS_CORRECTION_SAMPLES,
                available: batch.len(),
            });
        }
        let msg = format!("bias correction asked for {count} samples, proceeding with {}", batch.len());
        warn!("{msg}");
        diagnostics.push(msg);
    }

    let mut g = quant_graph.clone();
    let mut corrections = BTreeMap::new();
    for id in quant_graph.layer_ids() {
        let gap = mean_gap(float_graph, &g, &batch, &id)?;
        let layer = g.layer_mut(&id)?;
        let grid = layer.quant.as_ref().and_then(|q| q.bias.clone());
        let old = layer.bias.data().to_vec();
        let new: Vec<f64> = old
            .iter()
            .zip(&gap)
            .map(|(b, d)| {
                let shifted = b + d;
                match &grid {
                    Some(spec) => spec.fake_quantize(shifted),
                    None => shifted,
                }
            })
            .collect();
        corrections.insert(id.clone(), new.iter().zip(&old).map(|(n, o)| n - o).collect());
        layer.bias = Tensor::vector(new);
    }
    Ok(BiasCorrection {
        graph: g,
        corrections,
        samples_used: batch.len(),
        diagnostics,
    })
}
