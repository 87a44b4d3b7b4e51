//! Fake quantization: range calibration and quantize-dequantize simulation.
//!
//! The step size follows `scale = (max - min) / 2^N`. Weights are symmetric
//! signed (`min = -max`, zero point 0), activations affine unsigned with the
//! range stretched to include zero, and biases 16-bit symmetric with
//! `scale = input scale * weight scale`. Values are clamped to `[min, max]`
//! and rounded half-to-even onto the grid `scale * k`.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerNode, LayerQuant, NodeKind, Taps};
use crate::stats::CompensatedSum;
use crate::tensor::{channel_stats, Tensor};

pub const DEFAULT_CALIBRATION_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub min: f64,
    pub max: f64,
    pub bits: u32,
    pub signed: bool,
    pub scale: f64,
    pub zero_point: i64,
    /// Set when the calibrated range collapsed to a point; the tensor is then
    /// treated as the constant `min`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=53).contains(&bits) {
        return Err(Error::InvalidSpec(format!("bit width {bits} outside 1..=53")));
    }
    Ok(())
}

fn levels(bits: u32) -> f64 {
    2f64.powi(bits as i32)
}

impl QuantSpec {
    /// Unsigned affine spec covering `[min(lo, 0), max(hi, 0)]`.
    pub fn affine(lo: f64, hi: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::InvalidSpec(format!("bad range [{lo}, {hi}]")));
        }
        let min = lo.min(0.0);
        let max = hi.max(0.0);
        if max == min {
            return Ok(Self::degenerate(min, bits, false));
        }
        let scale = (max - min) / levels(bits);
        Ok(Self {
            min,
            max,
            bits,
            signed: false,
            scale,
            zero_point: (-min / scale).round_ties_even() as i64,
            degenerate: false,
        })
    }

    /// Signed symmetric spec over `[-abs_max, abs_max]`.
    pub fn symmetric(abs_max: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if !abs_max.is_finite() || abs_max < 0.0 {
            return Err(Error::InvalidSpec(format!("bad magnitude {abs_max}")));
        }
        if abs_max == 0.0 {
            return Ok(Self::degenerate(0.0, bits, true));
        }
        Ok(Self {
            min: -abs_max,
            max: abs_max,
            bits,
            signed: true,
            scale: 2.0 * abs_max / levels(bits),
            zero_point: 0,
            degenerate: false,
        })
    }

    /// Signed symmetric spec with a prescribed step, spanning `2^N` steps.
    pub fn symmetric_with_scale(scale: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidSpec(format!("scale {scale} must be positive")));
        }
        let max = scale * levels(bits) / 2.0;
        Ok(Self {
            min: -max,
            max,
            bits,
            signed: true,
            scale,
            zero_point: 0,
            degenerate: false,
        })
    }

    fn degenerate(value: f64, bits: u32, signed: bool) -> Self {
        Self {
            min: value,
            max: value,
            bits,
            signed,
            scale: 1.0,
            zero_point: 0,
            degenerate: true,
        }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// Integer code for a value (after clamping).
    pub fn quantize_value(&self, x: f64) -> i64 {
        let c = x.clamp(self.min, self.max);
        (c / self.scale).round_ties_even() as i64 + self.zero_point
    }

    pub fn dequantize_value(&self, q: i64) -> f64 {
        self.scale * (q - self.zero_point) as f64
    }

    pub fn fake_quantize(&self, x: f64) -> f64 {
        if self.degenerate {
            return self.min;
        }
        let c = x.clamp(self.min, self.max);
        self.scale * (c / self.scale).round_ties_even()
    }

    /// Variance of uniform rounding noise, `scale^2 / 12`.
    pub fn noise_variance(&self) -> f64 {
        if self.degenerate {
            0.0
        } else {
            self.scale * self.scale / 12.0
        }
    }
}

/// Clamp, round onto the spec's grid, and map back to reals.
pub fn quantize_dequantize(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::InvalidSpec(format!("scale {} must be positive", spec.scale)));
    }
    if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    Ok(x.map(|v| spec.fake_quantize(v)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BitWidths {
    pub weights: u32,
    pub activations: u32,
    pub biases: u32,
}

impl Default for BitWidths {
    fn default() -> Self {
        Self {
            weights: 8,
            activations: 8,
            biases: 16,
        }
    }
}

impl BitWidths {
    /// `bits` for weights and activations, twice that for biases.
    pub fn uniform(bits: u32) -> Self {
        Self {
            weights: bits,
            activations: bits,
            biases: (2 * bits).min(53),
        }
    }

    /// Every width must be one the quantizer supports (1..=53).
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("weight", self.weights), ("activation", self.activations), ("bias", self.biases)] {
            if !(1..=53).contains(&b) {
                return Err(Error::Config(format!("{name} bits must lie in 1..=53, got {b}")));
            }
        }
        Ok(())
    }
}

/// Range and energy statistics for one tensor role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub bits: u32,
    pub min: f64,
    pub max: f64,
    pub channel_min: Vec<f64>,
    pub channel_max: Vec<f64>,
    /// Sum of squares per channel over every observed element.
    pub channel_sum_squares: Vec<f64>,
    /// Elements observed per channel.
    pub channel_count: u64,
    /// Mean squared local gain of the activation per channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub squared_gain: Option<Vec<f64>>,
}

impl TensorStats {
    pub fn channels(&self) -> usize {
        self.channel_max.len()
    }

    /// max(|min|, |max|) per channel.
    pub fn channel_extrema(&self) -> Vec<f64> {
        self.channel_min
            .iter()
            .zip(&self.channel_max)
            .map(|(lo, hi)| lo.abs().max(hi.abs()))
            .collect()
    }

    pub fn extremum(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }

    /// `E{x^2}` over all elements.
    pub fn mean_square(&self) -> f64 {
        let total: f64 = self.channel_sum_squares.iter().sum();
        total / (self.channel_count as f64 * self.channels() as f64)
    }

    pub fn sum_squares(&self) -> f64 {
        self.channel_sum_squares.iter().sum()
    }

    /// Applies an output-channel scaling analytically. Exact for positively
    /// homogeneous activations.
    pub fn scale_channels(&mut self, factors: &[f64]) {
        for (i, &c) in factors.iter().enumerate() {
            let (lo, hi) = (self.channel_min[i] * c, self.channel_max[i] * c);
            self.channel_min[i] = lo.min(hi);
            self.channel_max[i] = lo.max(hi);
            self.channel_sum_squares[i] *= c * c;
        }
        self.min = self.channel_min.iter().copied().fold(f64::INFINITY, f64::min);
        self.max = self.channel_max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }

    /// Statistics of a static tensor along its output channels.
    fn of_weights(layer: &LayerNode, bits: u32) -> Self {
        let c = layer.out_channels();
        let mut channel_min = vec![f64::INFINITY; c];
        let mut channel_max = vec![f64::NEG_INFINITY; c];
        let mut sums = vec![0.0; c];
        for (i, &w) in layer.kernel.data().iter().enumerate() {
            let ch = i % c;
            channel_min[ch] = channel_min[ch].min(w);
            channel_max[ch] = channel_max[ch].max(w);
            sums[ch] += w * w;
        }
        Self::from_channels(bits, channel_min, channel_max, sums, (layer.kernel.len() / c) as u64, None)
    }

    fn of_vector(values: &[f64], bits: u32) -> Self {
        Self::from_channels(
            bits,
            values.to_vec(),
            values.to_vec(),
            values.iter().map(|v| v * v).collect(),
            1,
            None,
        )
    }

    fn from_channels(
        bits: u32,
        channel_min: Vec<f64>,
        channel_max: Vec<f64>,
        channel_sum_squares: Vec<f64>,
        channel_count: u64,
        squared_gain: Option<Vec<f64>>,
    ) -> Self {
        Self {
            bits,
            min: channel_min.iter().copied().fold(f64::INFINITY, f64::min),
            max: channel_max.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            channel_min,
            channel_max,
            channel_sum_squares,
            channel_count,
            squared_gain,
        }
    }
}

/// Calibration of one node. Junctions only carry `activation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCalibration {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<TensorStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<TensorStats>,
    pub activation: TensorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub sample_count: usize,
    pub bits: BitWidths,
    pub input: TensorStats,
    pub nodes: BTreeMap<String, NodeCalibration>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl CalibrationRecord {
    pub fn node(&self, id: &str) -> Result<&NodeCalibration> {
        self.nodes.get(id).ok_or_else(|| Error::MissingCalibration(id.to_string()))
    }

    /// Stats of whatever feeds a consumer: the graph input or a node output.
    pub fn producer_stats(&self, graph: &Graph, producer: &str) -> Result<&TensorStats> {
        if producer == graph.input_id() {
            Ok(&self.input)
        } else {
            Ok(&self.node(producer)?.activation)
        }
    }

    pub fn with_bits(&self, bits: BitWidths) -> Self {
        let mut out = self.clone();
        out.bits = bits;
        out.input.bits = bits.activations;
        for n in out.nodes.values_mut() {
            n.activation.bits = bits.activations;
            if let Some(w) = n.weight.as_mut() {
                w.bits = bits.weights;
            }
            if let Some(b) = n.bias.as_mut() {
                b.bits = bits.biases;
            }
        }
        out
    }

    pub fn activation_spec(&self, id: &str) -> Result<QuantSpec> {
        let s = &self.node(id)?.activation;
        QuantSpec::affine(s.min, s.max, self.bits.activations)
    }

    fn producer_spec(&self, graph: &Graph, producer: &str) -> Result<QuantSpec> {
        let s = self.producer_stats(graph, producer)?;
        QuantSpec::affine(s.min, s.max, self.bits.activations)
    }

    /// Recomputes weight and bias statistics from the graph's current tensors.
    pub fn refresh_weights(&mut self, graph: &Graph) {
        for node in graph.nodes() {
            if let (Some(layer), Some(cal)) = (node.as_layer(), self.nodes.get_mut(&node.id)) {
                cal.weight = Some(TensorStats::of_weights(layer, self.bits.weights));
                cal.bias = Some(TensorStats::of_vector(layer.bias.data(), self.bits.biases));
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Per-sample partial statistics, merged in sample order.
struct Partial {
    min: Vec<f64>,
    max: Vec<f64>,
    sum_squares: Vec<f64>,
    count: u64,
    gain_sum: Vec<f64>,
}

impl Partial {
    fn of(t: &Tensor, gain: Option<&dyn Fn(f64, usize) -> f64>) -> Result<Self> {
        let stats = channel_stats(t)?;
        let c = t.channels();
        let mut gain_sum = vec![0.0; c];
        if let Some(g) = gain {
            for (i, &v) in t.data().iter().enumerate() {
                gain_sum[i % c] += g(v, i % c);
            }
        }
        Ok(Self {
            min: stats.iter().map(|s| s.min).collect(),
            max: stats.iter().map(|s| s.max).collect(),
            sum_squares: stats.iter().map(|s| s.energy).collect(),
            count: (t.len() / c) as u64,
            gain_sum,
        })
    }
}

struct Accumulator {
    min: Vec<f64>,
    max: Vec<f64>,
    sum_squares: Vec<CompensatedSum>,
    count: u64,
    gain_sum: Vec<CompensatedSum>,
}

impl Accumulator {
    fn new(c: usize) -> Self {
        Self {
            min: vec![f64::INFINITY; c],
            max: vec![f64::NEG_INFINITY; c],
            sum_squares: vec![CompensatedSum::new(); c],
            count: 0,
            gain_sum: vec![CompensatedSum::new(); c],
        }
    }

    fn merge(&mut self, p: &Partial) {
        for i in 0..self.min.len() {
            self.min[i] = self.min[i].min(p.min[i]);
            self.max[i] = self.max[i].max(p.max[i]);
            self.sum_squares[i].add(p.sum_squares[i]);
            self.gain_sum[i].add(p.gain_sum[i]);
        }
        self.count += p.count;
    }

    fn finish(self, bits: u32, with_gain: bool) -> TensorStats {
        let count = self.count as f64;
        let gain = with_gain.then(|| self.gain_sum.iter().map(|g| g.value() / count).collect());
        TensorStats::from_channels(
            bits,
            self.min,
            self.max,
            self.sum_squares.iter().map(|s| s.value()).collect(),
            self.count,
            gain,
        )
    }
}

/// Runs `count` samples through the graph and records per-node ranges,
/// per-channel extrema and energies.
///
/// Samples are processed in parallel on the current rayon pool; partial
/// statistics are merged in sample order, so the record does not depend on
/// the thread count.
pub fn calibrate<I>(graph: &Graph, samples: I, count: usize, bits: BitWidths) -> Result<CalibrationRecord>
where
    I: IntoIterator<Item = Tensor>,
{
    if count == 0 {
        return Err(Error::Config("calibration count must be at least 1".into()));
    }
    bits.validate()?;
    let batch: Vec<Tensor> = samples.into_iter().take(count).collect();
    if batch.is_empty() {
        return Err(Error::NotEnoughSamples {
            required: count,
            available: 0,
        });
    }
    if batch.len() < count {
        return Err(Error::NotEnoughSamples {
            required: count,
            available: batch.len(),
        });
    }
    if graph.nodes().iter().any(|n| matches!(n.kind, NodeKind::BatchNorm(_))) {
        return Err(Error::UnsupportedTopology {
            node: graph.input_id().to_string(),
            message: "fold batch-norms before calibrating".into(),
        });
    }

    let per_sample: Vec<(Partial, Vec<Partial>)> = batch
        .par_iter()
        .map(|x| -> Result<_> {
            let exec = graph.execute(x, &Taps::All)?;
            let input = Partial::of(x, None)?;
            let nodes = graph
                .nodes()
                .iter()
                .map(|n| {
                    let t = &exec.taps[&n.id];
                    match n.as_layer() {
                        Some(l) => {
                            let act = l.activation.clone();
                            Partial::of(t, Some(&move |v, ch| act.squared_gain(v, ch)))
                        }
                        None => Partial::of(t, None),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((input, nodes))
        })
        .collect::<Result<Vec<_>>>()?;

    let [_, _, cin] = graph.input_shape();
    let mut input_acc = Accumulator::new(cin);
    let mut node_acc: Vec<Accumulator> = graph
        .nodes()
        .iter()
        .map(|n| Accumulator::new(graph.output_shape(&n.id).expect("node exists")[2]))
        .collect();
    for (input, nodes) in &per_sample {
        input_acc.merge(input);
        for (acc, p) in node_acc.iter_mut().zip(nodes) {
            acc.merge(p);
        }
    }

    let mut diagnostics = Vec::new();
    let mut record_nodes = BTreeMap::new();
    for (node, acc) in graph.nodes().iter().zip(node_acc) {
        let is_layer = node.as_layer().is_some();
        let activation = acc.finish(bits.activations, is_layer);
        if activation.max == activation.min {
            let msg = format!(
                "`{}`: activation range collapsed to {}; quantized as a constant",
                node.id, activation.max
            );
            warn!("{msg}");
            diagnostics.push(msg);
        }
        let (weight, bias) = match node.as_layer() {
            Some(l) => (
                Some(TensorStats::of_weights(l, bits.weights)),
                Some(TensorStats::of_vector(l.bias.data(), bits.biases)),
            ),
            None => (None, None),
        };
        record_nodes.insert(
            node.id.clone(),
            NodeCalibration {
                weight,
                bias,
                activation,
            },
        );
    }

    Ok(CalibrationRecord {
        sample_count: batch.len(),
        bits,
        input: input_acc.finish(bits.activations, false),
        nodes: record_nodes,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    WeightsOnly,
    ActivationsOnly,
    Full,
}

impl QuantMode {
    pub const ALL: [QuantMode; 3] = [QuantMode::WeightsOnly, QuantMode::ActivationsOnly, QuantMode::Full];

    fn weights(self) -> bool {
        matches!(self, QuantMode::WeightsOnly | QuantMode::Full)
    }

    fn activations(self) -> bool {
        matches!(self, QuantMode::ActivationsOnly | QuantMode::Full)
    }
}

/// The quantization specs `quantize_graph` would attach to a layer.
pub fn layer_specs(graph: &Graph, calib: &CalibrationRecord, id: &str) -> Result<LayerQuant> {
    let node = graph.node(id)?;
    let layer = graph.layer(id)?;
    let weight = QuantSpec::symmetric(layer.kernel.abs_max(), calib.bits.weights)?;
    let activation = calib.activation_spec(id)?;
    let input = calib.producer_spec(graph, &node.inputs[0])?;
    let bias = QuantSpec::symmetric_with_scale(input.scale * weight.scale, calib.bits.biases)?;
    Ok(LayerQuant {
        weight: Some(weight),
        bias: Some(bias),
        activation: Some(activation),
    })
}

/// Returns a copy of `graph` whose execution simulates quantization.
///
/// Weights and biases are snapped to their grids in place; post-activation
/// outputs are fake-quantized at run time. Junction outputs and the graph
/// input stay in full precision.
pub fn quantize_graph(graph: &Graph, calib: &CalibrationRecord, mode: QuantMode) -> Result<Graph> {
    let mut out = graph.clone();
    for id in graph.layer_ids() {
        let specs = layer_specs(graph, calib, &id)?;
        let layer = out.layer_mut(&id)?;
        let mut quant = LayerQuant::default();
        if mode.weights() {
            let w = specs.weight.expect("weight spec");
            let b = specs.bias.expect("bias spec");
            layer.kernel = quantize_dequantize(&layer.kernel, &w)?;
            layer.bias = quantize_dequantize(&layer.bias, &b)?;
            quant.weight = Some(w);
            quant.bias = Some(b);
        }
        if mode.activations() {
            quant.activation = specs.activation;
        }
        layer.quant = Some(quant);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::graph::Node;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn two_layer(seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k1 = rand_tensor(&mut rng, vec![3, 3, 2, 4], -1.0, 1.0);
        let b1 = rand_tensor(&mut rng, vec![4], -0.1, 0.1);
        let k2 = rand_tensor(&mut rng, vec![1, 1, 4, 3], -1.0, 1.0);
        let b2 = rand_tensor(&mut rng, vec![3], -0.1, 0.1);
        Graph::new(
            "in",
            [6, 6, 2],
            vec![
                Node::layer("l1", "in", LayerNode::conv(k1, b1, ActivationKind::Relu)),
                Node::layer("l2", "l1", LayerNode::conv(k2, b2, ActivationKind::Linear)),
            ],
            vec!["l2".into()],
        )
        .unwrap()
    }

    fn samples(seed: u64, n: usize, shape: [usize; 3]) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| rand_tensor(&mut rng, vec![1, shape[0], shape[1], shape[2]], 0.0, 1.0))
            .collect()
    }

    #[test]
    fn paper_scale_formula_example() {
        let spec = QuantSpec::affine(0.0, 256.0, 8).unwrap();
        assert_eq!(spec.scale, 1.0);
        let y = quantize_dequantize(&Tensor::vector(vec![3.4]), &spec).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn on_grid_values_are_fixed_points() {
        let spec = QuantSpec::symmetric(1.0, 8).unwrap();
        let on_grid: Vec<f64> = (-128..=128).map(|k| k as f64 * spec.scale).collect();
        let y = quantize_dequantize(&Tensor::vector(on_grid.clone()), &spec).unwrap();
        assert_eq!(y.data(), on_grid.as_slice());
    }

    #[test]
    fn half_ties_round_to_even() {
        let spec = QuantSpec::affine(0.0, 256.0, 8).unwrap();
        assert_eq!(spec.fake_quantize(2.5), 2.0);
        assert_eq!(spec.fake_quantize(3.5), 4.0);
    }

    #[test]
    fn error_bounded_by_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = QuantSpec::affine(-1.3, 2.9, 8).unwrap();
        for _ in 0..100_000 {
            let x = rng.gen_range(-3.0..4.0);
            let err = (spec.fake_quantize(x) - x.clamp(spec.min, spec.max)).abs();
            assert!(err <= spec.scale / 2.0 + 1e-15);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let spec = QuantSpec::symmetric(1.0, 8).unwrap();
        let err = quantize_dequantize(&Tensor::vector(vec![0.0, f64::NAN]), &spec).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn specs_respect_invariants() {
        let a = QuantSpec::affine(0.5, 3.0, 8).unwrap();
        assert_eq!(a.min, 0.0);
        assert!(a.min <= 0.0 && a.max >= 0.0 && a.scale > 0.0);
        let s = QuantSpec::symmetric(2.0, 8).unwrap();
        assert_eq!((s.min, s.zero_point), (-2.0, 0));
        assert_eq!(s.scale, 4.0 / 256.0);
        let b = QuantSpec::symmetric_with_scale(0.001, 16).unwrap();
        assert!((b.range() / 65536.0 - 0.001).abs() < 1e-18);
        assert!(QuantSpec::affine(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn degenerate_range_is_flagged_constant() {
        let spec = QuantSpec::affine(0.0, 0.0, 8).unwrap();
        assert!(spec.degenerate);
        assert_eq!(spec.scale, 1.0);
        assert_eq!(spec.fake_quantize(3.0), 0.0);
    }

    #[test]
    fn zero_inputs_flag_degenerate_activations() {
        let g = Graph::new(
            "in",
            [2, 2, 1],
            vec![Node::layer(
                "a",
                "in",
                LayerNode::conv(Tensor::filled(vec![1, 1, 1, 2], 1.0), Tensor::zeros(vec![2]), ActivationKind::Relu),
            )],
            vec!["a".into()],
        )
        .unwrap();
        let rec = calibrate(&g, vec![Tensor::zeros(vec![1, 2, 2, 1])], 1, BitWidths::default()).unwrap();
        assert_eq!(rec.node("a").unwrap().activation.max, 0.0);
        assert!(rec.activation_spec("a").unwrap().degenerate);
        assert_eq!(rec.diagnostics.len(), 1);
    }

    #[test]
    fn identity_net_records_input_max() {
        let g = Graph::new(
            "in",
            [1, 2, 1],
            vec![Node::layer(
                "a",
                "in",
                LayerNode::conv(Tensor::filled(vec![1, 1, 1, 1], 1.0), Tensor::zeros(vec![1]), ActivationKind::Linear),
            )],
            vec!["a".into()],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 2, 1], vec![5.0, -1.0]).unwrap();
        let rec = calibrate(&g, vec![x], 1, BitWidths::default()).unwrap();
        assert_eq!(rec.node("a").unwrap().activation.max, 5.0);
        assert_eq!(rec.input.max, 5.0);
    }

    #[test]
    fn calibration_matches_store_all_oracle() {
        let g = two_layer(1);
        let xs = samples(2, 64, [6, 6, 2]);
        let rec = calibrate(&g, xs.clone(), 64, BitWidths::default()).unwrap();
        // store every activation, then reduce
        let mut all: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
        for x in &xs {
            let e = g.execute(x, &Taps::All).unwrap();
            for (k, v) in e.taps {
                all.entry(k).or_default().push(v);
            }
        }
        for (id, ts) in all {
            let big = Tensor::concat_batch(&ts).unwrap();
            let st = channel_stats(&big).unwrap();
            let cal = &rec.node(&id).unwrap().activation;
            for (i, s) in st.iter().enumerate() {
                assert_eq!(cal.channel_min[i], s.min);
                assert_eq!(cal.channel_max[i], s.max);
                assert!((cal.channel_sum_squares[i] - s.energy).abs() <= 1e-10 * s.energy.max(1.0));
            }
            assert_eq!(cal.max, big.max_value());
            assert_eq!(cal.min, big.min_value());
        }
    }

    #[test]
    fn calibration_is_thread_count_independent() {
        let g = two_layer(3);
        let xs = samples(4, 16, [6, 6, 2]);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| calibrate(&g, xs.clone(), 16, BitWidths::default()).unwrap());
        let b = four.install(|| calibrate(&g, xs.clone(), 16, BitWidths::default()).unwrap());
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn calibration_errors() {
        let g = two_layer(1);
        assert!(matches!(
            calibrate(&g, Vec::new(), 4, BitWidths::default()),
            Err(Error::NotEnoughSamples { available: 0, .. })
        ));
        assert!(calibrate(&g, samples(1, 3, [6, 6, 2]), 4, BitWidths::default()).is_err());
        assert!(calibrate(&g, samples(1, 3, [6, 6, 2]), 0, BitWidths::default()).is_err());
    }

    #[test]
    fn calibration_json_round_trips() {
        let g = two_layer(1);
        let rec = calibrate(&g, samples(1, 4, [6, 6, 2]), 4, BitWidths::default()).unwrap();
        let text = rec.to_json().unwrap();
        assert_eq!(CalibrationRecord::from_json(&text).unwrap(), rec);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["nodes"]["l1"]["activation"]["channel_max"].is_array());
        assert_eq!(v["nodes"]["l1"]["weight"]["bits"], 8);
        assert_eq!(v["nodes"]["l1"]["bias"]["bits"], 16);
    }

    #[test]
    fn weights_only_on_grid_is_exact() {
        // weights are multiples of 1/128 with max |w| = 1, zero bias
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut k: Vec<f64> = (0..3 * 3 * 2 * 4).map(|_| rng.gen_range(-128i32..=128) as f64 / 128.0).collect();
        k[0] = 1.0;
        let g = Graph::new(
            "in",
            [4, 4, 2],
            vec![Node::layer(
                "a",
                "in",
                LayerNode::conv(Tensor::new(vec![3, 3, 2, 4], k).unwrap(), Tensor::zeros(vec![4]), ActivationKind::Relu),
            )],
            vec!["a".into()],
        )
        .unwrap();
        let xs = samples(1, 4, [4, 4, 2]);
        let rec = calibrate(&g, xs.clone(), 4, BitWidths::default()).unwrap();
        let q = quantize_graph(&g, &rec, QuantMode::WeightsOnly).unwrap();
        for x in &xs {
            assert_eq!(q.run(x).unwrap(), g.run(x).unwrap());
        }
    }

    #[test]
    fn mse_shrinks_as_bits_grow() {
        let g = two_layer(11);
        let xs = samples(12, 8, [6, 6, 2]);
        let rec = calibrate(&g, xs.clone(), 8, BitWidths::default()).unwrap();
        let mse = |bits: u32| {
            let q = quantize_graph(&g, &rec.with_bits(BitWidths::uniform(bits)), QuantMode::Full).unwrap();
            let mut acc = 0.0;
            for x in &xs {
                let (a, b) = (g.run(x).unwrap(), q.run(x).unwrap());
                acc += a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
            }
            acc
        };
        let m: Vec<f64> = [4, 8, 12, 16, 24].iter().map(|&b| mse(b)).collect();
        for w in m.windows(2) {
            assert!(w[1] < w[0], "{m:?}");
        }
    }

    #[test]
    fn original_graph_untouched_and_missing_spec_errors() {
        let g = two_layer(1);
        let rec = calibrate(&g, samples(1, 2, [6, 6, 2]), 2, BitWidths::default()).unwrap();
        let before = g.clone();
        let _ = quantize_graph(&g, &rec, QuantMode::Full).unwrap();
        assert_eq!(g, before);
        let mut partial = rec.clone();
        partial.nodes.remove("l2");
        match quantize_graph(&g, &partial, QuantMode::Full) {
            Err(Error::MissingCalibration(id)) => assert_eq!(id, "l2"),
            other => panic!("{other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantize_dequantize_is_idempotent(
                lo in -10.0f64..0.0, span in 0.01f64..20.0, bits in 2u32..16,
                xs in proptest::collection::vec(-40.0f64..40.0, 1..64),
            ) {
                let spec = QuantSpec::affine(lo, lo + span, bits).unwrap();
                let t = Tensor::vector(xs);
                let once = quantize_dequantize(&t, &spec).unwrap();
                let twice = quantize_dequantize(&once, &spec).unwrap();
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn symmetric_error_within_half_step(
                m in 0.01f64..10.0, bits in 2u32..16,
                xs in proptest::collection::vec(-20.0f64..20.0, 1..64),
            ) {
                let spec = QuantSpec::symmetric(m, bits).unwrap();
                for x in xs {
                    let err = (spec.fake_quantize(x) - x.clamp(-m, m)).abs();
                    prop_assert!(err <= spec.scale / 2.0 * (1.0 + 1e-12));
                }
            }
        }
    }
}
