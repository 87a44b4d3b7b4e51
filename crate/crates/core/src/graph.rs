//! The network as a topologically sorted DAG.
//!
//! Nodes are conv/depthwise layers (with their activation attached), unfolded
//! batch-norm nodes, and `Add`/`Concat` junctions. A graph is validated on
//! construction and treated as immutable afterwards; passes clone and rewrite.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::quant::QuantSpec;
use crate::tensor::{self, apply_activation, Padding, Tensor};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    Conv,
    DepthwiseConv,
}

/// Fake-quantization annotations attached by `quantize_graph`.
///
/// Kernel and bias values stored on the layer are already snapped to their
/// grids; the activation spec is applied at execution time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LayerQuant {
    pub weight: Option<QuantSpec>,
    pub bias: Option<QuantSpec>,
    pub activation: Option<QuantSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub op: LayerOp,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub activation: ActivationKind,
    pub stride: (usize, usize),
    pub padding: Padding,
    /// Set once a batch-norm has been absorbed into this layer.
    pub folded_bn: bool,
    pub quant: Option<LayerQuant>,
}

impl LayerNode {
    pub fn conv(kernel: Tensor, bias: Tensor, activation: ActivationKind) -> Self {
        Self {
            op: LayerOp::Conv,
            kernel,
            bias,
            activation,
            stride: (1, 1),
            padding: Padding::Same,
            folded_bn: false,
            quant: None,
        }
    }

    pub fn depthwise(kernel: Tensor, bias: Tensor, activation: ActivationKind) -> Self {
        Self {
            op: LayerOp::DepthwiseConv,
            ..Self::conv(kernel, bias, activation)
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn out_channels(&self) -> usize {
        match self.op {
            LayerOp::Conv => self.kernel.shape()[3],
            LayerOp::DepthwiseConv => self.kernel.shape()[2],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    /// Spatial kernel extent `(kh, kw)`.
    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.shape()[0], self.kernel.shape()[1])
    }

    /// Number of inputs feeding one output element: `kh * kw * F_in` for a
    /// conv, `kh * kw` for a depthwise conv.
    pub fn fan_in(&self) -> usize {
        let (kh, kw) = self.kernel_size();
        match self.op {
            LayerOp::Conv => kh * kw * self.in_channels(),
            LayerOp::DepthwiseConv => kh * kw,
        }
    }

    /// Max |w| per output channel.
    pub fn kernel_out_channel_max(&self) -> Vec<f64> {
        let c = self.out_channels();
        let mut out = vec![0.0f64; c];
        for (i, w) in self.kernel.data().iter().enumerate() {
            let ch = i % c;
            out[ch] = out[ch].max(w.abs());
        }
        out
    }

    /// Max |w| per input channel, i.e. over every weight that reads input channel `i`.
    pub fn kernel_in_channel_max(&self) -> Vec<f64> {
        let shape = self.kernel.shape();
        let cin = shape[2];
        let inner = match self.op {
            LayerOp::Conv => shape[3],
            LayerOp::DepthwiseConv => 1,
        };
        let mut out = vec![0.0f64; cin];
        for (i, w) in self.kernel.data().iter().enumerate() {
            let ch = (i / inner) % cin;
            out[ch] = out[ch].max(w.abs());
        }
        out
    }

    /// Sum of squared weights per output channel.
    pub fn kernel_out_channel_energy(&self) -> Vec<f64> {
        let c = self.out_channels();
        let mut out = vec![0.0f64; c];
        for (i, w) in self.kernel.data().iter().enumerate() {
            out[i % c] += w * w;
        }
        out
    }

    /// Multiplies output channel `i` of the kernel by `factors[i]`. The bias
    /// is left alone; callers decide whether it scales with the kernel.
    pub(crate) fn scale_output_channels(&mut self, factors: &[f64]) -> Result<()> {
        let c = self.out_channels();
        if factors.len() != c {
            return Err(Error::ShapeMismatch {
                context: "scale_output_channels".into(),
                dimension: "output channels",
                expected: c,
                actual: factors.len(),
            });
        }
        for (i, w) in self.kernel.data_mut().iter_mut().enumerate() {
            *w *= factors[i % c];
        }
        Ok(())
    }

    /// Divides every weight reading input channel `i` by `factors[i]`.
    pub(crate) fn divide_input_channels(&mut self, factors: &[f64]) -> Result<()> {
        let shape = self.kernel.shape().to_vec();
        let cin = shape[2];
        if factors.len() != cin {
            return Err(Error::ShapeMismatch {
                context: "divide_input_channels".into(),
                dimension: "input channels",
                expected: cin,
                actual: factors.len(),
            });
        }
        let inner = match self.op {
            LayerOp::Conv => shape[3],
            LayerOp::DepthwiseConv => 1,
        };
        for (i, w) in self.kernel.data_mut().iter_mut().enumerate() {
            *w /= factors[(i / inner) % cin];
        }
        Ok(())
    }

    fn validate(&self, id: &str) -> Result<()> {
        match (self.op, self.kernel.shape()) {
            (LayerOp::Conv, [_, _, _, _]) => {}
            (LayerOp::DepthwiseConv, [_, _, _, 1]) => {}
            (_, shape) => {
                return Err(Error::node(id, format!("kernel shape {shape:?} does not match {:?}", self.op)))
            }
        }
        let f_out = self.out_channels();
        if self.bias.rank() != 1 || self.bias.len() != f_out {
            return Err(Error::node(
                id,
                format!("bias length {} does not match {} output channels", self.bias.len(), f_out),
            ));
        }
        if let ActivationKind::Prelu { slopes } = &self.activation {
            if slopes.len() != 1 && slopes.len() != f_out {
                return Err(Error::node(
                    id,
                    format!("{} PReLU slopes for {} channels", slopes.len(), f_out),
                ));
            }
            if slopes.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(Error::node(id, "PReLU slopes must be finite and non-negative"));
            }
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::node(id, "stride must be positive"));
        }
        Ok(())
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let pre = match self.op {
            LayerOp::Conv => tensor::conv2d(input, &self.kernel, &self.bias, self.stride, self.padding)?,
            LayerOp::DepthwiseConv => {
                tensor::depthwise_conv2d(input, &self.kernel, &self.bias, self.stride, self.padding)?
            }
        };
        let post = apply_activation(&pre, &self.activation)?;
        match self.quant.as_ref().and_then(|q| q.activation.as_ref()) {
            Some(spec) => crate::quant::quantize_dequantize(&post, spec),
            None => Ok(post),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub epsilon: f64,
    /// Activation applied after normalization; moves onto the layer when folded.
    pub activation: ActivationKind,
}

impl BatchNorm {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel multiplier `gamma / sqrt(var + eps)`.
    pub fn multipliers(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.variance)
            .map(|(g, v)| g / (v + self.epsilon).sqrt())
            .collect()
    }

    fn validate(&self, id: &str) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.variance.len() != c {
            return Err(Error::node(id, "batch-norm parameter vectors differ in length"));
        }
        if self.variance.iter().any(|v| v + self.epsilon <= 0.0) {
            return Err(Error::node(id, "batch-norm variance + epsilon must be positive"));
        }
        Ok(())
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.multipliers();
        let c = x.channels();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = (*v - self.mean[ch]) * m[ch] + self.beta[ch];
        }
        apply_activation(&out, &self.activation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JunctionKind {
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Layer(LayerNode),
    BatchNorm(BatchNorm),
    Junction(JunctionKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub inputs: Vec<String>,
    pub kind: NodeKind,
}

impl Node {
    pub fn layer(id: impl Into<String>, input: impl Into<String>, layer: LayerNode) -> Self {
        Self {
            id: id.into(),
            inputs: vec![input.into()],
            kind: NodeKind::Layer(layer),
        }
    }

    pub fn batch_norm(id: impl Into<String>, input: impl Into<String>, bn: BatchNorm) -> Self {
        Self {
            id: id.into(),
            inputs: vec![input.into()],
            kind: NodeKind::BatchNorm(bn),
        }
    }

    pub fn junction(id: impl Into<String>, kind: JunctionKind, inputs: Vec<String>) -> Self {
        Self {
            id: id.into(),
            inputs,
            kind: NodeKind::Junction(kind),
        }
    }

    pub fn as_layer(&self) -> Option<&LayerNode> {
        match &self.kind {
            NodeKind::Layer(l) => Some(l),
            _ => None,
        }
    }
}

/// Which node outputs `execute` should hand back.
#[derive(Debug, Clone, Default)]
pub enum Taps {
    #[default]
    None,
    All,
    Only(BTreeSet<String>),
}

impl Taps {
    fn wants(&self, id: &str) -> bool {
        match self {
            Taps::None => false,
            Taps::All => true,
            Taps::Only(set) => set.contains(id),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Execution {
    /// One tensor per graph output, in `Graph::outputs` order.
    pub outputs: Vec<Tensor>,
    /// Post-activation outputs of tapped nodes, keyed by node id.
    pub taps: BTreeMap<String, Tensor>,
}

impl Execution {
    pub fn output(&self) -> &Tensor {
        &self.outputs[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    input_id: String,
    /// `(height, width, channels)` of one input sample.
    input_shape: [usize; 3],
    nodes: Vec<Node>,
    outputs: Vec<String>,
    index: HashMap<String, usize>,
    shapes: Vec<[usize; 3]>,
}

impl Graph {
    /// Builds and validates a graph. Nodes may be given in any order; they are
    /// stably sorted topologically and cycles are rejected.
    pub fn new(
        input_id: impl Into<String>,
        input_shape: [usize; 3],
        nodes: Vec<Node>,
        outputs: Vec<String>,
    ) -> Result<Self> {
        let input_id = input_id.into();
        if nodes.is_empty() {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        if input_shape.contains(&0) {
            return Err(Error::InvalidGraph(format!("input shape {input_shape:?} has a zero extent")));
        }
        let mut seen = BTreeSet::new();
        seen.insert(input_id.clone());
        for n in &nodes {
            if !seen.insert(n.id.clone()) {
                return Err(Error::InvalidGraph(format!("duplicate node id `{}`", n.id)));
            }
        }
        for n in &nodes {
            if n.inputs.is_empty() {
                return Err(Error::node(&n.id, "node has no inputs"));
            }
            for i in &n.inputs {
                if !seen.contains(i) {
                    return Err(Error::UnknownNode(i.clone()));
                }
            }
        }
        let nodes = topo_sort(nodes, &input_id)?;
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        if outputs.is_empty() {
            return Err(Error::InvalidGraph("graph declares no outputs".into()));
        }
        let mut graph = Self {
            input_id,
            input_shape,
            nodes,
            outputs,
            index,
            shapes: Vec::new(),
        };
        for o in &graph.outputs {
            if !graph.index.contains_key(o) {
                return Err(Error::UnknownNode(o.clone()));
            }
        }
        graph.shapes = graph.infer_shapes()?;
        Ok(graph)
    }

    fn infer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.nodes.len());
        let lookup = |id: &str, shapes: &[[usize; 3]]| -> [usize; 3] {
            if id == self.input_id {
                self.input_shape
            } else {
                shapes[self.index[id]]
            }
        };
        for node in &self.nodes {
            let shape = match &node.kind {
                NodeKind::Layer(l) => {
                    l.validate(&node.id)?;
                    if node.inputs.len() != 1 {
                        return Err(Error::node(&node.id, "layers take exactly one input"));
                    }
                    let [h, w, c] = lookup(&node.inputs[0], &shapes);
                    if c != l.in_channels() {
                        return Err(Error::node(
                            &node.id,
                            format!("expects {} input channels but producer `{}` has {}", l.in_channels(), node.inputs[0], c),
                        ));
                    }
                    let (kh, kw) = l.kernel_size();
                    let (oh, _) = tensor::output_extent(h, kh, l.stride.0, l.padding);
                    let (ow, _) = tensor::output_extent(w, kw, l.stride.1, l.padding);
                    if oh == 0 || ow == 0 {
                        return Err(Error::node(&node.id, format!("{kh}x{kw} kernel does not fit {h}x{w} input")));
                    }
                    [oh, ow, l.out_channels()]
                }
                NodeKind::BatchNorm(bn) => {
                    bn.validate(&node.id)?;
                    if node.inputs.len() != 1 {
                        return Err(Error::node(&node.id, "batch-norm takes exactly one input"));
                    }
                    let s = lookup(&node.inputs[0], &shapes);
                    if s[2] != bn.channels() {
                        return Err(Error::node(
                            &node.id,
                            format!("has {} channels but producer has {}", bn.channels(), s[2]),
                        ));
                    }
                    s
                }
                NodeKind::Junction(kind) => {
                    let operand_shapes: Vec<[usize; 3]> = node.inputs.iter().map(|i| lookup(i, &shapes)).collect();
                    let first = operand_shapes[0];
                    match kind {
                        JunctionKind::Add => {
                            if let Some(bad) = operand_shapes.iter().find(|s| **s != first) {
                                return Err(Error::node(
                                    &node.id,
                                    format!("add operands disagree: {first:?} vs {bad:?}"),
                                ));
                            }
                            first
                        }
                        JunctionKind::Concat => {
                            if let Some(bad) = operand_shapes.iter().find(|s| s[..2] != first[..2]) {
                                return Err(Error::node(
                                    &node.id,
                                    format!("concat operands disagree spatially: {first:?} vs {bad:?}"),
                                ));
                            }
                            [first[0], first[1], operand_shapes.iter().map(|s| s[2]).sum()]
                        }
                    }
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn input_id(&self) -> &str {
        &self.input_id
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Nodes in topological order.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn node(&self, id: &str) -> Result<&Node> {
        self.index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn layer(&self, id: &str) -> Result<&LayerNode> {
        self.node(id)?
            .as_layer()
            .ok_or_else(|| Error::node(id, "not a conv or depthwise layer"))
    }

    /// Position in the topological order.
    pub fn topo_index(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// `(height, width, channels)` produced by a node or the graph input.
    pub fn output_shape(&self, id: &str) -> Result<[usize; 3]> {
        if id == self.input_id {
            return Ok(self.input_shape);
        }
        Ok(self.shapes[self.topo_index(id)?])
    }

    /// Layer ids in topological order.
    pub fn layer_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.as_layer().is_some())
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn is_output(&self, id: &str) -> bool {
        self.outputs.iter().any(|o| o == id)
    }

    /// Producer -> consumer pairs, in consumer topological order.
    pub fn edges(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let mut seen = BTreeSet::new();
            for i in &n.inputs {
                if seen.insert(i) {
                    out.push((i.clone(), n.id.clone()));
                }
            }
        }
        out
    }

    /// Nodes consuming `id`, in topological order. `id` may be the graph input.
    pub fn successors(&self, id: &str) -> Result<Vec<&Node>> {
        if id != self.input_id && !self.index.contains_key(id) {
            return Err(Error::UnknownNode(id.to_string()));
        }
        Ok(self.nodes.iter().filter(|n| n.inputs.iter().any(|i| i == id)).collect())
    }

    /// Distinct producer ids of `id`, in operand order.
    pub fn predecessors(&self, id: &str) -> Result<Vec<String>> {
        let node = self.node(id)?;
        let mut out: Vec<String> = Vec::new();
        for i in &node.inputs {
            if !out.contains(i) {
                out.push(i.clone());
            }
        }
        Ok(out)
    }

    pub fn layer_mut(&mut self, id: &str) -> Result<&mut LayerNode> {
        let idx = self.topo_index(id)?;
        match &mut self.nodes[idx].kind {
            NodeKind::Layer(l) => Ok(l),
            _ => Err(Error::node(id, "not a conv or depthwise layer")),
        }
    }

    /// Forward pass. `input` is `(batch, h, w, c)`.
    pub fn execute(&self, input: &Tensor, taps: &Taps) -> Result<Execution> {
        let [h, w, c] = self.input_shape;
        if input.rank() != 4 || input.shape()[1..] != [h, w, c] {
            return Err(Error::node(
                &self.input_id,
                format!("input shape {:?} does not match (batch, {h}, {w}, {c})", input.shape()),
            ));
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut remaining = self.consumer_counts();
        let mut tapped = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            fn fetch<'a>(g: &Graph, input: &'a Tensor, id: &str, values: &'a [Option<Tensor>]) -> &'a Tensor {
                if id == g.input_id {
                    input
                } else {
                    values[g.index[id]].as_ref().expect("producer evaluated before consumer")
                }
            }
            let out = match &node.kind {
                NodeKind::Layer(l) => l
                    .forward(fetch(self, input, &node.inputs[0], &values))
                    .map_err(|e| Error::node(&node.id, e.to_string()))?,
                NodeKind::BatchNorm(bn) => bn
                    .forward(fetch(self, input, &node.inputs[0], &values))
                    .map_err(|e| Error::node(&node.id, e.to_string()))?,
                NodeKind::Junction(kind) => {
                    let operands: Vec<&Tensor> = node.inputs.iter().map(|i| fetch(self, input, i, &values)).collect();
                    junction_forward(*kind, &operands).map_err(|e| Error::node(&node.id, e.to_string()))?
                }
            };
            if taps.wants(&node.id) {
                tapped.insert(node.id.clone(), out.clone());
            }
            values[idx] = Some(out);
            for i in &node.inputs {
                if let Some(&p) = self.index.get(i) {
                    remaining[p] -= 1;
                    if remaining[p] == 0 && !self.is_output(i) {
                        values[p] = None;
                    }
                }
            }
        }
        let outputs = self
            .outputs
            .iter()
            .map(|o| values[self.index[o]].clone().expect("outputs are retained"))
            .collect();
        Ok(Execution { outputs, taps: tapped })
    }

    /// Convenience wrapper returning the first output only.
    pub fn run(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.execute(input, &Taps::None)?.outputs.swap_remove(0))
    }

    fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len()];
        for n in &self.nodes {
            for i in &n.inputs {
                if let Some(&p) = self.index.get(i) {
                    counts[p] += 1;
                }
            }
        }
        counts
    }

    /// Absorbs every batch-norm node into its producing layer.
    pub fn fold_batchnorm(&self) -> Result<Graph> {
        let mut nodes = self.nodes.clone();
        let mut renames: HashMap<String, String> = HashMap::new();
        let mut removed = BTreeSet::new();
        for node in &self.nodes {
            let NodeKind::BatchNorm(bn) = &node.kind else { continue };
            let producer_id = &node.inputs[0];
            let producer_idx = match self.index.get(producer_id) {
                Some(&i) => i,
                None => {
                    return Err(Error::UnsupportedTopology {
                        node: node.id.clone(),
                        message: "batch-norm applied directly to the graph input".into(),
                    })
                }
            };
            let layer = match &nodes[producer_idx].kind {
                NodeKind::Layer(l) => l,
                _ => {
                    return Err(Error::UnsupportedTopology {
                        node: node.id.clone(),
                        message: format!("batch-norm follows `{producer_id}`, which is not a conv layer"),
                    })
                }
            };
            if self.successors(producer_id)?.len() != 1 || self.is_output(producer_id) {
                return Err(Error::UnsupportedTopology {
                    node: node.id.clone(),
                    message: format!("`{producer_id}` feeds other nodes besides the batch-norm"),
                });
            }
            if layer.activation != ActivationKind::Linear {
                return Err(Error::UnsupportedTopology {
                    node: node.id.clone(),
                    message: format!("`{producer_id}` applies an activation before the batch-norm"),
                });
            }
            let m = bn.multipliers();
            let mut folded = layer.clone();
            folded.scale_output_channels(&m)?;
            let bias: Vec<f64> = layer
                .bias
                .data()
                .iter()
                .enumerate()
                .map(|(i, b)| (b - bn.mean[i]) * m[i] + bn.beta[i])
                .collect();
            folded.bias = Tensor::vector(bias);
            folded.activation = bn.activation.clone();
            folded.folded_bn = true;
            nodes[producer_idx].kind = NodeKind::Layer(folded);
            renames.insert(node.id.clone(), producer_id.clone());
            removed.insert(node.id.clone());
        }
        if removed.is_empty() {
            return Ok(self.clone());
        }
        let resolve = |id: &String| -> String {
            let mut cur = id.clone();
            while let Some(next) = renames.get(&cur) {
                cur = next.clone();
            }
            cur
        };
        let nodes: Vec<Node> = nodes
            .into_iter()
            .filter(|n| !removed.contains(&n.id))
            .map(|mut n| {
                n.inputs = n.inputs.iter().map(resolve).collect();
                n
            })
            .collect();
        let outputs = self.outputs.iter().map(resolve).collect();
        Graph::new(self.input_id.clone(), self.input_shape, nodes, outputs)
    }
}

fn junction_forward(kind: JunctionKind, operands: &[&Tensor]) -> Result<Tensor> {
    let first = operands[0];
    match kind {
        JunctionKind::Add => {
            let mut out = first.clone();
            for op in &operands[1..] {
                if op.shape() != first.shape() {
                    return Err(Error::InvalidTensor(format!(
                        "add operands {:?} and {:?}",
                        first.shape(),
                        op.shape()
                    )));
                }
                for (o, v) in out.data_mut().iter_mut().zip(op.data()) {
                    *o += v;
                }
            }
            Ok(out)
        }
        JunctionKind::Concat => {
            let prefix = &first.shape()[..3];
            let total: usize = operands.iter().map(|t| t.channels()).sum();
            let pixels = first.len() / first.channels();
            let mut data = Vec::with_capacity(pixels * total);
            for p in 0..pixels {
                for op in operands {
                    if &op.shape()[..3] != prefix {
                        return Err(Error::InvalidTensor("concat operands disagree spatially".into()));
                    }
                    let c = op.channels();
                    data.extend_from_slice(&op.data()[p * c..(p + 1) * c]);
                }
            }
            let mut shape = prefix.to_vec();
            shape.push(total);
            Tensor::new(shape, data)
        }
    }
}

/// Kahn's algorithm, preferring the caller's order among ready nodes.
fn topo_sort(nodes: Vec<Node>, input_id: &str) -> Result<Vec<Node>> {
    let position: HashMap<String, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
    let mut indegree: Vec<usize> = nodes
        .iter()
        .map(|n| {
            n.inputs
                .iter()
                .filter(|i| i.as_str() != input_id)
                .collect::<BTreeSet<_>>()
                .len()
        })
        .collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (ci, n) in nodes.iter().enumerate() {
        let distinct: BTreeSet<&String> = n.inputs.iter().filter(|i| i.as_str() != input_id).collect();
        for i in distinct {
            consumers[position[i]].push(ci);
        }
    }
    let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(&next) = ready.iter().next() {
        ready.remove(&next);
        order.push(next);
        for &c in &consumers[next] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|i| !order.contains(i)).unwrap();
        return Err(Error::Cyclic(nodes[stuck].id.clone()));
    }
    let mut slots: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
}
