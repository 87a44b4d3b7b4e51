//! Measured and predicted signal-to-quantization-noise ratios.
//!
//! Measurement runs the float graph and three fake-quantized variants
//! (weights only, activations only, both) on the same samples and compares
//! every layer's output. Prediction propagates per-channel noise variances
//! through the graph: each layer adds its own weight noise
//! `E{dW^2} * sum over the receptive field of E{X^2}` and activation noise
//! `scale^2 / 12`, and passes upstream noise on through the squared kernel
//! weights that read each channel. Sample-mean energies are the estimator
//! throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, JunctionKind, LayerNode, LayerOp, NodeKind, Taps};
use crate::quant::{layer_specs, quantize_graph, CalibrationRecord, QuantMode, TensorStats};
use crate::stats::{to_db, CompensatedSum};
use crate::tensor::{output_extent, Tensor};

pub const ESTIMATOR_NOTE: &str =
    "sample-mean energies; predicted noise propagates per-channel variances with padding-aware tap coverage";

/// A signal-to-noise ratio that may be infinite (exact quantization) or
/// undefined (zero signal).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sqnr {
    Finite(f64),
    Infinite,
    Undefined,
}

impl Sqnr {
    pub fn from_energies(signal: f64, noise: f64) -> Self {
        if signal == 0.0 || !signal.is_finite() || !noise.is_finite() {
            Sqnr::Undefined
        } else if noise == 0.0 {
            Sqnr::Infinite
        } else {
            Sqnr::Finite(signal / noise)
        }
    }

    pub fn linear(&self) -> f64 {
        match self {
            Sqnr::Finite(v) => *v,
            Sqnr::Infinite => f64::INFINITY,
            Sqnr::Undefined => f64::NAN,
        }
    }

    /// Value in dB; `+inf` for exact quantization, NaN when undefined.
    pub fn db(&self) -> f64 {
        match self {
            Sqnr::Finite(v) => to_db(*v),
            Sqnr::Infinite => f64::INFINITY,
            Sqnr::Undefined => f64::NAN,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Sqnr::Finite(_))
    }

    fn sort_key(&self) -> f64 {
        match self {
            Sqnr::Undefined => f64::NEG_INFINITY,
            s => s.db(),
        }
    }
}

impl std::fmt::Display for Sqnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sqnr::Finite(_) => write!(f, "{}", self.db()),
            Sqnr::Infinite => f.write_str("inf"),
            Sqnr::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Sqnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Sqnr::Finite(_) => s.serialize_f64(self.db()),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

/// One value per quantization mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct ModeValues<T> {
    pub weights: T,
    pub activations: T,
    pub full: T,
}

impl<T: Copy> ModeValues<T> {
    pub fn get(&self, mode: QuantMode) -> T {
        match mode {
            QuantMode::WeightsOnly => self.weights,
            QuantMode::ActivationsOnly => self.activations,
            QuantMode::Full => self.full,
        }
    }

    fn from_fn(mut f: impl FnMut(QuantMode) -> T) -> Self {
        Self {
            weights: f(QuantMode::WeightsOnly),
            activations: f(QuantMode::ActivationsOnly),
            full: f(QuantMode::Full),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictedSqnr {
    pub weights: Sqnr,
    pub activations: Sqnr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSqnr {
    pub layer: String,
    pub topo_index: usize,
    /// `E{Y^2}` of the float layer output.
    pub signal_energy: f64,
    /// `E{(Y - Yq)^2}` per mode.
    pub noise: ModeValues<f64>,
    pub sqnr: ModeValues<Sqnr>,
    pub predicted: PredictedSqnr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SqnrReport {
    pub samples: usize,
    pub estimator: &'static str,
    pub layers: Vec<LayerSqnr>,
    /// Mean squared deviation of the graph output from the float output.
    pub output_mse: ModeValues<f64>,
    /// `sum(noise_full) / sum(noise_w + noise_a)` over layers. Logged, not asserted.
    pub additivity: f64,
}

impl SqnrReport {
    pub fn layer(&self, id: &str) -> Option<&LayerSqnr> {
        self.layers.iter().find(|l| l.layer == id)
    }

    /// Mean measured SQNR in dB over layers with a finite value.
    pub fn mean_sqnr_db(&self, mode: QuantMode) -> f64 {
        let v: Vec<f64> = self
            .layers
            .iter()
            .map(|l| l.sqnr.get(mode))
            .filter(Sqnr::is_finite)
            .map(|s| s.db())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// CSV rows in topological order. `header` lines are emitted as `# ` comments.
    pub fn to_csv(&self, header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            let _ = writeln!(out, "# {h}");
        }
        out.push_str(
            "layer_id,topo_index,signal_energy,noise_w,noise_a,noise_full,sqnr_w_db,sqnr_a_db,sqnr_full_db,pred_sqnr_w_db,pred_sqnr_a_db\n",
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                l.layer,
                l.topo_index,
                l.signal_energy,
                l.noise.weights,
                l.noise.activations,
                l.noise.full,
                l.sqnr.weights,
                l.sqnr.activations,
                l.sqnr.full,
                l.predicted.weights,
                l.predicted.activations
            );
        }
        out
    }
}

struct SamplePartial {
    signal: Vec<f64>,
    noise: [Vec<f64>; 3],
    elements: Vec<u64>,
    out_signal_len: u64,
    out_noise: [f64; 3],
}

fn sq_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Runs the float graph and the three quantized variants on `samples` and
/// reports per-layer signal and noise energies.
pub fn measure_sqnr(graph: &Graph, calib: &CalibrationRecord, samples: &[Tensor]) -> Result<SqnrReport> {
    if samples.is_empty() {
        return Err(Error::NotEnoughSamples {
            required: 1,
            available: 0,
        });
    }
    let variants: Vec<Graph> = QuantMode::ALL
        .iter()
        .map(|&m| quantize_graph(graph, calib, m))
        .collect::<Result<_>>()?;
    let layers = graph.layer_ids();

    let partials: Vec<SamplePartial> = samples
        .par_iter()
        .map(|x| -> Result<_> {
            let float = graph.execute(x, &Taps::All)?;
            let quant: Vec<_> = variants
                .iter()
                .map(|g| g.execute(x, &Taps::All))
                .collect::<Result<_>>()?;
            let mut p = SamplePartial {
                signal: Vec::with_capacity(layers.len()),
                noise: Default::default(),
                elements: Vec::with_capacity(layers.len()),
                out_signal_len: float.output().len() as u64,
                out_noise: [0.0; 3],
            };
            for id in &layers {
                let y = &float.taps[id];
                p.signal.push(y.sum_squares());
                p.elements.push(y.len() as u64);
                for (m, q) in quant.iter().enumerate() {
                    p.noise[m].push(sq_diff(y, &q.taps[id]));
                }
            }
            for (m, q) in quant.iter().enumerate() {
                p.out_noise[m] = sq_diff(float.output(), q.output());
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;

    let n = layers.len();
    let mut signal = vec![CompensatedSum::new(); n];
    let mut noise: [Vec<CompensatedSum>; 3] = std::array::from_fn(|_| vec![CompensatedSum::new(); n]);
    let mut elements = vec![0u64; n];
    let mut out_noise = [CompensatedSum::new(); 3];
    let mut out_len = 0u64;
    for p in &partials {
        for i in 0..n {
            signal[i].add(p.signal[i]);
            elements[i] += p.elements[i];
            for m in 0..3 {
                noise[m][i].add(p.noise[m][i]);
            }
        }
        for m in 0..3 {
            out_noise[m].add(p.out_noise[m]);
        }
        out_len += p.out_signal_len;
    }

    let predicted: BTreeMap<String, PredictedLayer> =
        predict_sqnr(graph, calib)?.into_iter().map(|p| (p.layer.clone(), p)).collect();
    let mode_index = |m: QuantMode| QuantMode::ALL.iter().position(|&x| x == m).expect("mode listed");
    let mut rows = Vec::with_capacity(n);
    let (mut full_sum, mut split_sum) = (CompensatedSum::new(), CompensatedSum::new());
    for (i, id) in layers.iter().enumerate() {
        let count = elements[i] as f64;
        let s = signal[i].value() / count;
        let noise_i = ModeValues::from_fn(|m| noise[mode_index(m)][i].value() / count);
        full_sum.add(noise_i.full);
        split_sum.add(noise_i.weights + noise_i.activations);
        let pred = &predicted[id];
        rows.push(LayerSqnr {
            layer: id.clone(),
            topo_index: graph.topo_index(id)?,
            signal_energy: s,
            noise: noise_i,
            sqnr: ModeValues::from_fn(|m| Sqnr::from_energies(s, noise_i.get(m))),
            predicted: PredictedSqnr {
                weights: pred.sqnr_weights,
                activations: pred.sqnr_activations,
            },
        });
    }
    let additivity = full_sum.value() / split_sum.value();
    info!("measured SQNR over {} samples; full/(w+a) noise ratio {additivity}", samples.len());
    Ok(SqnrReport {
        samples: samples.len(),
        estimator: ESTIMATOR_NOTE,
        layers: rows,
        output_mse: ModeValues::from_fn(|m| out_noise[mode_index(m)].value() / out_len as f64),
        additivity,
    })
}

/// Predicted per-layer noise under the weights-only and activations-only modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictedLayer {
    pub layer: String,
    pub signal_energy: f64,
    pub noise_weights: f64,
    pub noise_activations: f64,
    pub sqnr_weights: Sqnr,
    pub sqnr_activations: Sqnr,
}

/// Fraction of receptive-field taps that land inside the input, averaged
/// over output positions. Padded taps read zeros and carry neither signal
/// nor noise.
pub fn tap_coverage(input_hw: (usize, usize), layer: &LayerNode) -> f64 {
    let (kh, kw) = layer.kernel_size();
    let axis = |input: usize, k: usize, stride: usize| {
        let (out, pad) = output_extent(input, k, stride, layer.padding);
        let mut valid = 0usize;
        for o in 0..out {
            for t in 0..k {
                let pos = (o * stride + t) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < input {
                    valid += 1;
                }
            }
        }
        valid as f64 / (out * k) as f64
    };
    axis(input_hw.0, kh, layer.stride.0) * axis(input_hw.1, kw, layer.stride.1)
}

/// Fraction of activation outputs that are not already on the quantization
/// grid. Rectified zeros and ReLU6 saturation land exactly on grid points.
fn off_grid_fraction(kind: &ActivationKind, gain: &[f64]) -> Vec<f64> {
    match kind {
        ActivationKind::Relu | ActivationKind::Relu6 => gain.to_vec(),
        _ => vec![1.0; gain.len()],
    }
}

/// `sum_{taps, i} W[.., i, j]^2 * v[i]` for every output channel `j`.
fn propagate(layer: &LayerNode, v: &[f64]) -> Vec<f64> {
    let shape = layer.kernel.shape();
    let (cin, cout) = (shape[2], layer.out_channels());
    let mut out = vec![0.0; cout];
    match layer.op {
        LayerOp::Conv => {
            for (idx, w) in layer.kernel.data().iter().enumerate() {
                let j = idx % cout;
                let i = (idx / cout) % cin;
                out[j] += w * w * v[i];
            }
        }
        LayerOp::DepthwiseConv => {
            for (idx, w) in layer.kernel.data().iter().enumerate() {
                let j = idx % cin;
                out[j] += w * w * v[j];
            }
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn per_channel_energy(stats: &TensorStats) -> Vec<f64> {
    stats
        .channel_sum_squares
        .iter()
        .map(|s| s / stats.channel_count as f64)
        .collect()
}

struct NodeNoise {
    energy: Vec<f64>,
    weights: Vec<f64>,
    activations: Vec<f64>,
}

/// Analytical per-layer SQNR for the weights-only and activations-only modes.
pub fn predict_sqnr(graph: &Graph, calib: &CalibrationRecord) -> Result<Vec<PredictedLayer>> {
    let spatial = |id: &str| -> Result<(usize, usize)> {
        if id == graph.input_id() {
            let [h, w, _] = graph.input_shape();
            Ok((h, w))
        } else {
            let [h, w, _] = graph.output_shape(id)?;
            Ok((h, w))
        }
    };
    let check_energy = |id: &str, s: &TensorStats| {
        if s.channel_count == 0 || s.channel_sum_squares.len() != s.channels() {
            Err(Error::MissingEnergy(id.to_string()))
        } else {
            Ok(())
        }
    };
    check_energy(graph.input_id(), &calib.input)?;
    let c_in = calib.input.channels();
    let mut state: BTreeMap<&str, NodeNoise> = BTreeMap::new();
    state.insert(
        graph.input_id(),
        NodeNoise {
            energy: per_channel_energy(&calib.input),
            weights: vec![0.0; c_in],
            activations: vec![0.0; c_in],
        },
    );
    let mut out = Vec::new();
    for node in graph.nodes() {
        let stats = &calib.node(&node.id)?.activation;
        check_energy(&node.id, stats)?;
        let noise = match &node.kind {
            NodeKind::Layer(l) => {
                let src = &state[node.inputs[0].as_str()];
                let coverage = tap_coverage(spatial(&node.inputs[0])?, l);
                let specs = layer_specs(graph, calib, &node.id)?;
                let dw2 = specs.weight.as_ref().map_or(0.0, |s| s.noise_variance());
                let own_w: Vec<f64> = {
                    let (kh, kw) = l.kernel_size();
                    let taps = (kh * kw) as f64 * coverage;
                    let per_tap = l.fan_in() as f64 / (kh * kw) as f64;
                    l.kernel_out_channel_energy()
                        .iter()
                        .enumerate()
                        .map(|(j, e)| {
                            // rounding toward a grid that contains zero never
                            // errs by more than the value itself
                            let var = dw2.min(e / (taps / coverage * per_tap));
                            match l.op {
                                LayerOp::Conv => taps * var * src.energy.iter().sum::<f64>(),
                                LayerOp::DepthwiseConv => taps * var * src.energy[j],
                            }
                        })
                        .collect()
                };
                let gain = stats
                    .squared_gain
                    .clone()
                    .unwrap_or_else(|| vec![1.0; l.out_channels()]);
                let act_var = specs.activation.as_ref().map_or(0.0, |s| s.noise_variance());
                let act_noise = off_grid_fraction(&l.activation, &gain);
                let pw = propagate(l, &src.weights);
                let pa = propagate(l, &src.activations);
                let energy = per_channel_energy(stats);
                NodeNoise {
                    weights: (0..gain.len()).map(|j| gain[j] * (own_w[j] + coverage * pw[j])).collect(),
                    activations: (0..gain.len())
                        .map(|j| gain[j] * coverage * pa[j] + (act_var * act_noise[j]).min(energy[j]))
                        .collect(),
                    energy,
                }
            }
            NodeKind::Junction(kind) => {
                let parts: Vec<&NodeNoise> = node.inputs.iter().map(|i| &state[i.as_str()]).collect();
                let (weights, activations) = match kind {
                    JunctionKind::Add => {
                        let c = parts[0].weights.len();
                        let sum = |f: fn(&NodeNoise) -> &Vec<f64>| -> Vec<f64> {
                            (0..c).map(|j| parts.iter().map(|p| f(p)[j]).sum()).collect()
                        };
                        (sum(|p| &p.weights), sum(|p| &p.activations))
                    }
                    JunctionKind::Concat => (
                        parts.iter().flat_map(|p| p.weights.clone()).collect(),
                        parts.iter().flat_map(|p| p.activations.clone()).collect(),
                    ),
                };
                NodeNoise {
                    energy: per_channel_energy(stats),
                    weights,
                    activations,
                }
            }
            NodeKind::BatchNorm(_) => {
                return Err(Error::UnsupportedTopology {
                    node: node.id.clone(),
                    message: "fold batch-norms before predicting noise".into(),
                })
            }
        };
        if matches!(node.kind, NodeKind::Layer(_)) {
            let signal = stats.mean_square();
            let (nw, na) = (mean(&noise.weights), mean(&noise.activations));
            out.push(PredictedLayer {
                layer: node.id.clone(),
                signal_energy: signal,
                noise_weights: nw,
                noise_activations: na,
                sqnr_weights: Sqnr::from_energies(signal, nw),
                sqnr_activations: Sqnr::from_energies(signal, na),
            });
        }
        state.insert(&node.id, noise);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundTarget {
    Weights,
    Activations,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalBound {
    pub layer: String,
    pub current: Sqnr,
    pub optimal: Sqnr,
}

impl OptimalBound {
    /// `optimal - current` in dB.
    pub fn gap_db(&self) -> f64 {
        self.optimal.db() - self.current.db()
    }
}

/// `sum(x^2) / sum(dx^2)` for a tensor now and with every channel rescaled so
/// its extremum equals the tensor extremum. The quantization range, and so
/// the noise, is the same in both states.
fn oe_pair(extrema: &[f64], energies: &[f64], noise_total: f64) -> (Sqnr, Sqnr) {
    let top = extrema.iter().copied().fold(0.0, f64::max);
    let current: f64 = energies.iter().sum();
    let optimal: f64 = extrema
        .iter()
        .zip(energies)
        .map(|(&m, &e)| if m > 0.0 { (top / m).powi(2) * e } else { e })
        .sum();
    (
        Sqnr::from_energies(current, noise_total),
        Sqnr::from_energies(optimal, noise_total),
    )
}

/// Per-layer SQNR now and under optimal equalization of either the weights
/// or the activations.
pub fn optimal_equalization_bound(
    graph: &Graph,
    calib: &CalibrationRecord,
    target: BoundTarget,
) -> Result<Vec<OptimalBound>> {
    let mut out = Vec::new();
    for id in graph.layer_ids() {
        let specs = layer_specs(graph, calib, &id)?;
        let node = calib.node(&id)?;
        let (current, optimal) = match target {
            BoundTarget::Weights => {
                let layer = graph.layer(&id)?;
                let spec = specs.weight.ok_or_else(|| Error::MissingCalibration(id.clone()))?;
                let noise = spec.noise_variance() * layer.kernel.len() as f64;
                oe_pair(&layer.kernel_out_channel_max(), &layer.kernel_out_channel_energy(), noise)
            }
            BoundTarget::Activations => {
                let stats = &node.activation;
                let spec = specs.activation.ok_or_else(|| Error::MissingCalibration(id.clone()))?;
                let noise = spec.noise_variance() * (stats.channel_count as f64 * stats.channels() as f64);
                oe_pair(&stats.channel_extrema(), &stats.channel_sum_squares, noise)
            }
        };
        out.push(OptimalBound {
            layer: id,
            current,
            optimal,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunSort {
    /// Every row follows the first run's order under the key mode.
    ByFirstRun,
    /// Every run/mode column is sorted on its own.
    PerRun,
}

fn mode_tag(m: QuantMode) -> &'static str {
    match m {
        QuantMode::WeightsOnly => "w",
        QuantMode::ActivationsOnly => "a",
        QuantMode::Full => "full",
    }
}

/// Layer indices sorted by descending SQNR under `mode`, ties by topo index.
fn descending(report: &SqnrReport, mode: QuantMode) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..report.layers.len()).collect();
    idx.sort_by(|&a, &b| {
        let (la, lb) = (&report.layers[a], &report.layers[b]);
        lb.sqnr
            .get(mode)
            .sort_key()
            .total_cmp(&la.sqnr.get(mode).sort_key())
            .then(la.topo_index.cmp(&lb.topo_index))
    });
    idx
}

/// CSV comparing several named reports, layers sorted by descending SQNR.
pub fn compare_runs(runs: &[(&str, &SqnrReport)], sort: RunSort, key: QuantMode) -> Result<String> {
    let (_, first) = runs
        .first()
        .ok_or_else(|| Error::ReportMismatch("no reports to compare".into()))?;
    let names: BTreeSet<&str> = first.layers.iter().map(|l| l.layer.as_str()).collect();
    for (name, r) in runs {
        let other: BTreeSet<&str> = r.layers.iter().map(|l| l.layer.as_str()).collect();
        if other != names || r.layers.len() != first.layers.len() {
            return Err(Error::ReportMismatch(format!("run `{name}` covers a different layer set")));
        }
    }
    let mut out = String::from("rank");
    match sort {
        RunSort::ByFirstRun => {
            out.push_str(",layer_id");
            for (name, _) in runs {
                for m in QuantMode::ALL {
                    let _ = write!(out, ",{name}_sqnr_{}_db", mode_tag(m));
                }
            }
            out.push('\n');
            for (rank, i) in descending(first, key).into_iter().enumerate() {
                let id = &first.layers[i].layer;
                let _ = write!(out, "{rank},{id}");
                for (_, r) in runs {
                    let l = r.layer(id).expect("layer sets checked");
                    for m in QuantMode::ALL {
                        let _ = write!(out, ",{}", l.sqnr.get(m));
                    }
                }
                out.push('\n');
            }
        }
        RunSort::PerRun => {
            for (name, _) in runs {
                for m in QuantMode::ALL {
                    let t = mode_tag(m);
                    let _ = write!(out, ",{name}_{t}_layer_id,{name}_sqnr_{t}_db");
                }
            }
            out.push('\n');
            let orders: Vec<Vec<Vec<usize>>> = runs
                .iter()
                .map(|(_, r)| QuantMode::ALL.iter().map(|&m| descending(r, m)).collect())
                .collect();
            for rank in 0..first.layers.len() {
                let _ = write!(out, "{rank}");
                for ((_, r), per_mode) in runs.iter().zip(&orders) {
                    for (m, order) in QuantMode::ALL.iter().zip(per_mode) {
                        let l = &r.layers[order[rank]];
                        let _ = write!(out, ",{},{}", l.layer, l.sqnr.get(*m));
                    }
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}
