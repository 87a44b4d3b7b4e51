//! Deterministic synthetic networks with controllable channel imbalance.
//!
//! Weights come from a ChaCha8 stream seeded by the `FixtureSpec`, so the same
//! spec gives a bit-identical graph on every platform. Imbalance is injected
//! by rescaling each eligible layer's output channels so the per-channel
//! activation extrema follow a geometric ladder from `LADDER_TOP` down to
//! `LADDER_TOP / imbalance`. Consumers are left as drawn, so the imbalance
//! changes the network function rather than hiding behind a factorization.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::equalize::{eligibility, Eligibility, Relu6Policy, RELU6_CEILING};
use crate::error::{Error, Result};
use crate::graph::{Graph, JunctionKind, LayerNode, Node, NodeKind, Taps};
use crate::tensor::{channel_stats, Tensor};

/// Samples `0..SHAPING_SAMPLES` of the fixture stream set the imbalance. This
/// is the default calibration window, so the ladder is exact there.
pub const SHAPING_SAMPLES: usize = 64;

/// Largest channel extremum of every shaped layer (ReLU6 fixtures use twice
/// the clip level instead).
pub const LADDER_TOP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    #[default]
    Chain,
    Residual,
    DepthwiseChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub layers: usize,
    pub channels: usize,
    /// Target ratio between the largest and smallest channel extremum.
    pub imbalance: f64,
    pub seed: u64,
    pub topology: Topology,
    /// Activation of every hidden layer. The output layer is linear.
    pub activation: ActivationKind,
    pub input_hw: usize,
    pub input_channels: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            layers: 6,
            channels: 8,
            imbalance: 1.0,
            seed: 0,
            topology: Topology::Chain,
            activation: ActivationKind::Relu,
            input_hw: 8,
            input_channels: 3,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let min_layers = match self.topology {
            Topology::Chain | Topology::DepthwiseChain => 2,
            Topology::Residual => 4,
        };
        if self.layers < min_layers {
            return Err(Error::Config(format!(
                "{:?} fixtures need at least {min_layers} layers, got {}",
                self.topology, self.layers
            )));
        }
        if self.channels == 0 || self.input_channels == 0 || self.input_hw == 0 {
            return Err(Error::Config("fixture dimensions must be positive".into()));
        }
        if !(self.imbalance.is_finite() && self.imbalance >= 1.0) {
            return Err(Error::Config(format!("imbalance must be >= 1, got {}", self.imbalance)));
        }
        if let ActivationKind::Prelu { slopes } = &self.activation {
            if !(slopes.is_empty() || slopes.len() == 1 || slopes.len() == self.channels) {
                return Err(Error::Config("PReLU fixture slopes must be empty, shared, or per channel".into()));
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_hw, self.input_hw, self.input_channels]
    }

    pub fn samples(&self) -> SampleStream {
        SampleStream::new(self.seed, self.input_shape())
    }
}

/// Indexable stream of `[1, h, w, c]` samples with elements uniform in `[0, 1)`.
/// Sample `i` depends only on `(seed, i)`, so disjoint index ranges give
/// independent calibration and held-out sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleStream {
    seed: u64,
    shape: [usize; 3],
}

impl SampleStream {
    pub fn new(seed: u64, shape: [usize; 3]) -> Self {
        Self { seed, shape }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn sample(&self, index: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let [h, w, c] = self.shape;
        let data = (0..h * w * c).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(vec![1, h, w, c], data).expect("shape matches data")
    }

    /// `count` consecutive samples starting at `start`.
    pub fn batch(&self, start: u64, count: usize) -> Vec<Tensor> {
        (0..count as u64).map(|i| self.sample(start + i)).collect()
    }

    pub fn iter_from(self, start: u64) -> impl Iterator<Item = Tensor> {
        (start..).map(move |i| self.sample(i))
    }
}

struct Builder {
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    next: usize,
    hidden: ActivationKind,
}

impl Builder {
    fn activation(&mut self, channels: usize) -> ActivationKind {
        match &self.hidden {
            ActivationKind::Prelu { slopes } if slopes.is_empty() => ActivationKind::Prelu {
                slopes: (0..channels).map(|_| self.rng.gen_range(0.05..0.3)).collect(),
            },
            other => other.clone(),
        }
    }

    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn id(&mut self) -> String {
        self.next += 1;
        format!("layer{}", self.next)
    }

    fn conv(&mut self, input: &str, k: usize, cin: usize, cout: usize, last: bool) -> String {
        let bound = (6.0 / (k * k * cin) as f64).sqrt();
        let kernel = self.uniform(vec![k, k, cin, cout], bound);
        let bias = self.uniform(vec![cout], 0.1);
        let act = if last { ActivationKind::Linear } else { self.activation(cout) };
        let id = self.id();
        self.nodes.push(Node::layer(&id, input, LayerNode::conv(kernel, bias, act)));
        id
    }

    fn depthwise(&mut self, input: &str, c: usize) -> String {
        let bound = (6.0 / 9.0f64).sqrt();
        let kernel = self.uniform(vec![3, 3, c, 1], bound);
        let bias = self.uniform(vec![c], 0.1);
        let act = self.activation(c);
        let id = self.id();
        self.nodes.push(Node::layer(&id, input, LayerNode::depthwise(kernel, bias, act)));
        id
    }
}

fn build_raw(spec: &FixtureSpec) -> Result<Graph> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        nodes: Vec::new(),
        next: 0,
        hidden: spec.activation.clone(),
    };
    let (c, n) = (spec.channels, spec.layers);
    let mut prev = b.conv("input", 3, spec.input_channels, c, false);
    match spec.topology {
        Topology::Chain => {
            for i in 1..n {
                prev = b.conv(&prev, 3, c, c, i + 1 == n);
            }
        }
        Topology::DepthwiseChain => {
            for i in 1..n - 1 {
                prev = if i % 2 == 1 { b.depthwise(&prev, c) } else { b.conv(&prev, 1, c, c, false) };
            }
            prev = b.conv(&prev, 1, c, c, true);
        }
        Topology::Residual => {
            let mut remaining = n - 2;
            let mut block = 0;
            while remaining >= 2 {
                let inner = b.conv(&prev, 3, c, c, false);
                let outer = b.conv(&inner, 3, c, c, false);
                block += 1;
                let sum = format!("add{block}");
                b.nodes.push(Node::junction(&sum, JunctionKind::Add, vec![prev.clone(), outer]));
                prev = sum;
                remaining -= 2;
            }
            if remaining == 1 {
                prev = b.conv(&prev, 3, c, c, false);
            }
            prev = b.conv(&prev, 1, c, c, true);
        }
    }
    Graph::new("input", spec.input_shape(), b.nodes, vec![prev])
}

/// Per-channel `max |y|` of every layer over `samples`.
fn layer_extrema(graph: &Graph, samples: &[Tensor]) -> Result<Vec<(String, Vec<f64>)>> {
    let ids = graph.layer_ids();
    let mut out: Vec<(String, Vec<f64>)> = ids
        .iter()
        .map(|id| Ok((id.clone(), vec![0.0; graph.output_shape(id)?[2]])))
        .collect::<Result<_>>()?;
    for x in samples {
        let exec = graph.execute(x, &Taps::All)?;
        for (id, acc) in &mut out {
            for (a, s) in acc.iter_mut().zip(channel_stats(&exec.taps[id.as_str()])?) {
                *a = a.max(s.extremum());
            }
        }
    }
    Ok(out)
}

/// Builds the fixture network described by `spec`.
pub fn make_fixture(spec: &FixtureSpec) -> Result<Graph> {
    spec.validate()?;
    shape(build_raw(spec)?, spec)
}

fn shape(raw: Graph, spec: &FixtureSpec) -> Result<Graph> {
    // Measure on a homogeneous surrogate so ReLU6 clipping does not hide the ladder.
    let relu6 = spec.activation == ActivationKind::Relu6;
    let mut g = raw.clone();
    if relu6 {
        for id in raw.layer_ids() {
            let l = g.layer_mut(&id)?;
            if l.activation == ActivationKind::Relu6 {
                l.activation = ActivationKind::Relu;
            }
        }
    }
    let stream = SampleStream::new(spec.seed, spec.input_shape());
    let samples = stream.batch(0, SHAPING_SAMPLES);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_f1c7);
    for id in raw.layer_ids() {
        if eligibility(&g, &id, None, Relu6Policy::Attested)? != Eligibility::Eligible {
            continue;
        }
        // Upstream shaping changes this layer's inputs, so measure it now.
        let mut m = layer_extremum(&g, &samples, &id)?;
        if m.contains(&0.0) {
            // Upstream imbalance can push a ReLU channel negative everywhere;
            // flipping its sign brings it back to life.
            let flip: Vec<f64> = m.iter().map(|&v| if v == 0.0 { -1.0 } else { 1.0 }).collect();
            scale_channels(g.layer_mut(&id)?, &flip)?;
            m = layer_extremum(&g, &samples, &id)?;
        }
        if m.iter().all(|&v| v == 0.0) {
            continue;
        }
        // A fixed anchor keeps magnitudes steady through depth.
        let top = if relu6 { 2.0 * RELU6_CEILING } else { LADDER_TOP };
        let n = m.len();
        let mut ladder: Vec<f64> = (0..n)
            .map(|k| {
                let t = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
                top * spec.imbalance.powf(-t)
            })
            .collect();
        ladder.shuffle(&mut rng);
        let factors: Vec<f64> = m
            .iter()
            .zip(&ladder)
            .map(|(&mi, &target)| if mi > 0.0 { target / mi } else { 1.0 })
            .collect();
        // Producer only: consumers see the imbalance instead of undoing it.
        scale_channels(g.layer_mut(&id)?, &factors)?;
    }
    if relu6 {
        for id in raw.layer_ids() {
            if raw.layer(&id)?.activation == ActivationKind::Relu6 {
                g.layer_mut(&id)?.activation = ActivationKind::Relu6;
            }
        }
    }
    Ok(g)
}

fn scale_channels(layer: &mut LayerNode, factors: &[f64]) -> Result<()> {
    layer.scale_output_channels(factors)?;
    for (b, f) in layer.bias.data_mut().iter_mut().zip(factors) {
        *b *= f;
    }
    Ok(())
}

fn layer_extremum(graph: &Graph, samples: &[Tensor], id: &str) -> Result<Vec<f64>> {
    let mut acc = vec![0.0_f64; graph.output_shape(id)?[2]];
    let taps = Taps::Only([id.to_string()].into());
    for x in samples {
        let exec = graph.execute(x, &taps)?;
        for (a, s) in acc.iter_mut().zip(channel_stats(&exec.taps[id])?) {
            *a = a.max(s.extremum());
        }
    }
    Ok(acc)
}

/// Ratio between the largest and smallest nonzero channel extremum of each
/// eligible layer, measured on `samples`.
pub fn channel_spread(graph: &Graph, samples: &[Tensor]) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (id, m) in layer_extrema(graph, samples)? {
        if eligibility(graph, &id, None, Relu6Policy::Attested)? != Eligibility::Eligible {
            continue;
        }
        let hi = m.iter().copied().fold(0.0, f64::max);
        let lo = m.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        out.push((id, if lo.is_finite() { hi / lo } else { f64::INFINITY }));
    }
    Ok(out)
}

/// True if the graph contains any junction node.
pub fn has_junctions(graph: &Graph) -> bool {
    graph.nodes().iter().any(|n| matches!(n.kind, NodeKind::Junction(_)))
}
