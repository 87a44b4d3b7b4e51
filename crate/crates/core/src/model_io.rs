//! Model persistence: a JSON manifest plus a raw little-endian weights blob.
//!
//! The manifest lists nodes in topological order, and a tensor table mapping
//! names to `(shape, dtype, byte offset, element count)` inside the blob. A
//! SHA-256 of the blob guards against mismatched pairs. Equalization and
//! quantization annotations live in a separate sidecar JSON so the model
//! files stay the same shape whatever has been done to the network.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::ActivationKind;
use crate::equalize::{EligibilityReport, ScaleVector};
use crate::error::{Error, Result};
use crate::graph::{BatchNorm, Graph, JunctionKind, LayerNode, LayerOp, LayerQuant, Node, NodeKind, DEFAULT_BN_EPSILON};
use crate::tensor::{Padding, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default)]
    pub source: String,
    pub input_shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: String,
    /// `conv`, `depthwise_conv`, `batch_norm`, `add` or `concat`.
    pub op: String,
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub folded_bn: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl NodeEntry {
    fn bare(id: &str, op: &str, inputs: Vec<String>) -> Self {
        Self {
            id: id.to_string(),
            op: op.to_string(),
            inputs,
            kernel: None,
            bias: None,
            activation: None,
            stride: None,
            padding: None,
            folded_bn: false,
            gamma: None,
            beta: None,
            mean: None,
            variance: None,
            epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub metadata: Metadata,
    pub input: String,
    pub outputs: Vec<String>,
    pub nodes: Vec<NodeEntry>,
    pub tensors: BTreeMap<String, TensorEntry>,
    /// Lower-case hex SHA-256 of the weights blob.
    pub weights_sha256: String,
}

/// Equalization and quantization annotations stored next to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Sidecar {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scales: Vec<ScaleVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eligibility: Option<EligibilityReport>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub quant: BTreeMap<String, LayerQuant>,
}

impl Sidecar {
    /// Collects the quantization annotations present on `graph`.
    pub fn from_graph(graph: &Graph) -> Self {
        let quant = graph
            .nodes()
            .iter()
            .filter_map(|n| Some((n.id.clone(), n.as_layer()?.quant.clone()?)))
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            quant,
            ..Self::default()
        }
    }

    /// Re-attaches quantization annotations to `graph`.
    pub fn apply(&self, graph: &Graph) -> Result<Graph> {
        let mut out = graph.clone();
        for (id, q) in &self.quant {
            out.layer_mut(id)?.quant = Some(q.clone());
        }
        Ok(out)
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty() && self.eligibility.is_none() && self.quant.is_empty()
    }
}

/// Conventional file names for a model stored under `dir/stem`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPaths {
    pub manifest: PathBuf,
    pub weights: PathBuf,
    pub sidecar: PathBuf,
}

impl ModelPaths {
    pub fn new(dir: impl AsRef<Path>, stem: &str) -> Self {
        let dir = dir.as_ref();
        Self {
            manifest: dir.join(format!("{stem}.json")),
            weights: dir.join(format!("{stem}.bin")),
            sidecar: dir.join(format!("{stem}.sidecar.json")),
        }
    }

    /// Derives the blob and sidecar paths from a manifest path.
    pub fn from_manifest(manifest: impl AsRef<Path>) -> Self {
        let manifest = manifest.as_ref().to_path_buf();
        Self {
            weights: manifest.with_extension("bin"),
            sidecar: manifest.with_extension("sidecar.json"),
            manifest,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct BlobWriter {
    dtype: Dtype,
    bytes: Vec<u8>,
    tensors: BTreeMap<String, TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f64]) -> String {
        let offset = self.bytes.len() as u64;
        for &v in data {
            match self.dtype {
                Dtype::F64 => self.bytes.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => self.bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        self.tensors.insert(
            name.clone(),
            TensorEntry {
                shape,
                dtype: self.dtype,
                offset,
                length: data.len() as u64,
            },
        );
        name
    }

    fn tensor(&mut self, name: String, t: &Tensor) -> String {
        self.push(name, t.shape().to_vec(), t.data())
    }
}

/// Serializes `graph` into a manifest and blob.
pub fn encode_model(graph: &Graph, dtype: Dtype, source: &str) -> Result<(ModelManifest, Vec<u8>)> {
    if graph.nodes().is_empty() {
        return Err(Error::InvalidGraph("refusing to save an empty graph".into()));
    }
    let mut blob = BlobWriter {
        dtype,
        bytes: Vec::new(),
        tensors: BTreeMap::new(),
    };
    let mut nodes = Vec::with_capacity(graph.nodes().len());
    for node in graph.nodes() {
        let id = &node.id;
        let entry = match &node.kind {
            NodeKind::Layer(l) => {
                let op = match l.op {
                    LayerOp::Conv => "conv",
                    LayerOp::DepthwiseConv => "depthwise_conv",
                };
                NodeEntry {
                    kernel: Some(blob.tensor(format!("{id}/kernel"), &l.kernel)),
                    bias: Some(blob.tensor(format!("{id}/bias"), &l.bias)),
                    activation: Some(l.activation.clone()),
                    stride: Some([l.stride.0, l.stride.1]),
                    padding: Some(l.padding),
                    folded_bn: l.folded_bn,
                    ..NodeEntry::bare(id, op, node.inputs.clone())
                }
            }
            NodeKind::BatchNorm(bn) => {
                let c = bn.channels();
                NodeEntry {
                    gamma: Some(blob.push(format!("{id}/gamma"), vec![c], &bn.gamma)),
                    beta: Some(blob.push(format!("{id}/beta"), vec![c], &bn.beta)),
                    mean: Some(blob.push(format!("{id}/mean"), vec![c], &bn.mean)),
                    variance: Some(blob.push(format!("{id}/variance"), vec![c], &bn.variance)),
                    epsilon: Some(bn.epsilon),
                    activation: Some(bn.activation.clone()),
                    ..NodeEntry::bare(id, "batch_norm", node.inputs.clone())
                }
            }
            NodeKind::Junction(JunctionKind::Add) => NodeEntry::bare(id, "add", node.inputs.clone()),
            NodeKind::Junction(JunctionKind::Concat) => NodeEntry::bare(id, "concat", node.inputs.clone()),
        };
        nodes.push(entry);
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        metadata: Metadata {
            source: source.to_string(),
            input_shape: graph.input_shape(),
        },
        input: graph.input_id().to_string(),
        outputs: graph.outputs().to_vec(),
        nodes,
        tensors: blob.tensors,
        weights_sha256: sha256_hex(&blob.bytes),
    };
    Ok((manifest, blob.bytes))
}

/// Writes the manifest and blob, plus the sidecar when it carries anything.
pub fn save_model(graph: &Graph, paths: &ModelPaths, dtype: Dtype, source: &str, sidecar: Option<&Sidecar>) -> Result<()> {
    let (manifest, blob) = encode_model(graph, dtype, source)?;
    write(&paths.weights, &blob)?;
    write(&paths.manifest, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    let mut side = sidecar.cloned().unwrap_or_else(|| Sidecar::from_graph(graph));
    if side.quant.is_empty() {
        side.quant = Sidecar::from_graph(graph).quant;
    }
    side.format_version = FORMAT_VERSION;
    if !side.is_empty() {
        write(&paths.sidecar, serde_json::to_string_pretty(&side)?.as_bytes())?;
    } else if paths.sidecar.exists() {
        fs::remove_file(&paths.sidecar).map_err(|e| Error::io(&paths.sidecar, e))?;
    }
    Ok(())
}

fn check_table(manifest: &ModelManifest, blob_len: usize) -> Result<()> {
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for (name, t) in &manifest.tensors {
        let count: usize = t.shape.iter().product();
        if count as u64 != t.length {
            return Err(Error::Format(format!(
                "tensor `{name}`: shape {:?} holds {count} elements but length is {}",
                t.shape, t.length
            )));
        }
        let end = t
            .length
            .checked_mul(t.dtype.size() as u64)
            .and_then(|b| b.checked_add(t.offset))
            .ok_or_else(|| Error::Format(format!("tensor `{name}`: extent overflows")))?;
        if end > blob_len as u64 {
            return Err(Error::Format(format!(
                "tensor `{name}` ends at byte {end}, past the {blob_len}-byte blob"
            )));
        }
        spans.push((t.offset, end, name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    Ok(())
}

struct BlobReader<'a> {
    manifest: &'a ModelManifest,
    bytes: &'a [u8],
}

impl BlobReader<'_> {
    fn values(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let t = self
            .manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let start = t.offset as usize;
        let size = t.dtype.size();
        let raw = &self.bytes[start..start + t.length as usize * size];
        let data = raw
            .chunks_exact(size)
            .map(|c| match t.dtype {
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8-byte chunk")),
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64,
            })
            .collect();
        Ok((t.shape.clone(), data))
    }

    fn tensor(&self, node: &str, field: &str, name: &Option<String>) -> Result<Tensor> {
        let name = name
            .as_ref()
            .ok_or_else(|| Error::Format(format!("node `{node}` lacks its `{field}` tensor")))?;
        let (shape, data) = self.values(name)?;
        Tensor::new(shape, data)
    }

    fn vector(&self, node: &str, field: &str, name: &Option<String>) -> Result<Vec<f64>> {
        Ok(self.tensor(node, field, name)?.into_data())
    }
}

/// Rebuilds a graph from a parsed manifest and its blob, without folding.
pub fn decode_model(manifest: &ModelManifest, blob: &[u8]) -> Result<Graph> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    check_table(manifest, blob.len())?;
    let r = BlobReader { manifest, bytes: blob };
    let mut nodes = Vec::with_capacity(manifest.nodes.len());
    for e in &manifest.nodes {
        let single_input = || -> Result<String> {
            match e.inputs.as_slice() {
                [one] => Ok(one.clone()),
                _ => Err(Error::Format(format!("node `{}` takes exactly one input", e.id))),
            }
        };
        let node = match e.op.as_str() {
            "conv" | "depthwise_conv" => {
                let kernel = r.tensor(&e.id, "kernel", &e.kernel)?;
                let bias = r.tensor(&e.id, "bias", &e.bias)?;
                let act = e.activation.clone().unwrap_or_default();
                let mut layer = if e.op == "conv" {
                    LayerNode::conv(kernel, bias, act)
                } else {
                    LayerNode::depthwise(kernel, bias, act)
                };
                if let Some([sh, sw]) = e.stride {
                    layer = layer.with_stride((sh, sw));
                }
                if let Some(p) = e.padding {
                    layer = layer.with_padding(p);
                }
                layer.folded_bn = e.folded_bn;
                Node::layer(&e.id, single_input()?, layer)
            }
            "batch_norm" => {
                let bn = BatchNorm {
                    gamma: r.vector(&e.id, "gamma", &e.gamma)?,
                    beta: r.vector(&e.id, "beta", &e.beta)?,
                    mean: r.vector(&e.id, "mean", &e.mean)?,
                    variance: r.vector(&e.id, "variance", &e.variance)?,
                    epsilon: e.epsilon.unwrap_or(DEFAULT_BN_EPSILON),
                    activation: e.activation.clone().unwrap_or_default(),
                };
                Node::batch_norm(&e.id, single_input()?, bn)
            }
            "add" => Node::junction(&e.id, JunctionKind::Add, e.inputs.clone()),
            "concat" => Node::junction(&e.id, JunctionKind::Concat, e.inputs.clone()),
            other => return Err(Error::Format(format!("node `{}` has unknown op `{other}`", e.id))),
        };
        nodes.push(node);
    }
    Graph::new(
        manifest.input.clone(),
        manifest.metadata.input_shape,
        nodes,
        manifest.outputs.clone(),
    )
}

pub fn read_manifest(path: &Path) -> Result<ModelManifest> {
    let text = read(path)?;
    serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads a model, verifying the blob checksum. Batch-norms are folded into
/// their producers unless `fold` is false.
pub fn load_model(manifest_path: &Path, weights_path: &Path, fold: bool) -> Result<Graph> {
    let manifest = read_manifest(manifest_path)?;
    let blob = read(weights_path)?;
    let actual = sha256_hex(&blob);
    if actual != manifest.weights_sha256 {
        return Err(Error::Checksum {
            path: weights_path.to_path_buf(),
            expected: manifest.weights_sha256.clone(),
            actual,
        });
    }
    let graph = decode_model(&manifest, &blob)?;
    if fold {
        graph.fold_batchnorm()
    } else {
        Ok(graph)
    }
}

pub fn load_sidecar(path: &Path) -> Result<Option<Sidecar>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = read(path)?;
    Ok(Some(
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
    ))
}

pub fn save_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    write(path, serde_json::to_string_pretty(sidecar)?.as_bytes())
}

/// Loads a model and re-attaches any quantization annotations from its sidecar.
pub fn load_annotated(paths: &ModelPaths, fold: bool) -> Result<(Graph, Option<Sidecar>)> {
    let graph = load_model(&paths.manifest, &paths.weights, fold)?;
    match load_sidecar(&paths.sidecar)? {
        Some(side) => Ok((side.apply(&graph)?, Some(side))),
        None => Ok((graph, None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Taps;

    fn two_layer() -> Graph {
        let k1 = Tensor::new(vec![1, 1, 1, 2], vec![1.0, -2.0]).unwrap();
        let k2 = Tensor::new(vec![1, 1, 2, 1], vec![0.5, 0.25]).unwrap();
        Graph::new(
            "x",
            [1, 2, 1],
            vec![
                Node::layer("a", "x", LayerNode::conv(k1, Tensor::vector(vec![0.5, 1.0]), ActivationKind::Relu)),
                Node::layer("b", "a", LayerNode::conv(k2, Tensor::vector(vec![-1.0]), ActivationKind::Linear)),
            ],
            vec!["b".into()],
        )
        .unwrap()
    }

    #[test]
    fn hand_written_two_layer_forward() {
        let (m, blob) = encode_model(&two_layer(), Dtype::F64, "hand").unwrap();
        let g = decode_model(&m, &blob).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 1], vec![1.0, -1.0]).unwrap();
        // pixel 0: a = relu([1.5, -1.0]) = [1.5, 0]; b = 0.75 - 1 = -0.25
        // pixel 1: a = relu([-0.5, 3.0]) = [0, 3]; b = 0.75 - 1 = -0.25
        assert_eq!(g.run(&x).unwrap().data(), &[-0.25, -0.25]);
    }

    #[test]
    fn f64_round_trip_is_bit_identical() {
        let g = two_layer();
        let (m, blob) = encode_model(&g, Dtype::F64, "t").unwrap();
        let back = decode_model(&m, &blob).unwrap();
        assert_eq!(back, g);
        let (m2, blob2) = encode_model(&back, Dtype::F64, "t").unwrap();
        assert_eq!(m, m2);
        assert_eq!(blob, blob2);
    }

    #[test]
    fn missing_tensor_is_named() {
        let (mut m, blob) = encode_model(&two_layer(), Dtype::F64, "t").unwrap();
        m.tensors.remove("b/kernel");
        match decode_model(&m, &blob) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "b/kernel"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        let (m, blob) = encode_model(&two_layer(), Dtype::F64, "t").unwrap();
        let mut bad = m.clone();
        bad.nodes[0].op = "pool".into();
        assert!(matches!(decode_model(&bad, &blob), Err(Error::Format(_))));
        let mut overlap = m.clone();
        overlap.tensors.get_mut("a/bias").unwrap().offset = 0;
        assert!(matches!(decode_model(&overlap, &blob), Err(Error::Format(_))));
        let mut cyclic = m.clone();
        cyclic.nodes[0].inputs = vec!["b".into()];
        assert!(decode_model(&cyclic, &blob).is_err());
        let mut version = m;
        version.format_version = 99;
        assert!(matches!(decode_model(&version, &blob), Err(Error::Format(_))));
    }

    #[test]
    fn checksum_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let paths = ModelPaths::new(dir.path(), "net");
        let g = two_layer();
        save_model(&g, &paths, Dtype::F64, "t", None).unwrap();
        assert!(!paths.sidecar.exists());
        assert_eq!(load_model(&paths.manifest, &paths.weights, true).unwrap(), g);
        let mut blob = fs::read(&paths.weights).unwrap();
        blob[3] ^= 1;
        fs::write(&paths.weights, blob).unwrap();
        assert!(matches!(
            load_model(&paths.manifest, &paths.weights, true),
            Err(Error::Checksum { .. })
        ));
        assert!(matches!(
            load_model(&dir.path().join("nope.json"), &paths.weights, true),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn f32_storage_within_tolerance() {
        let g = two_layer();
        let (m, blob) = encode_model(&g, Dtype::F32, "t").unwrap();
        assert_eq!(blob.len(), 4 * (2 + 2 + 2 + 1));
        let back = decode_model(&m, &blob).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 1], vec![0.3, 0.7]).unwrap();
        let (a, b) = (g.run(&x).unwrap(), back.run(&x).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-4 * p.abs().max(1.0));
        }
    }

    #[test]
    fn batch_norm_folds_on_load() {
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let g = Graph::new(
            "x",
            [1, 1, 1],
            vec![
                Node::layer("c", "x", LayerNode::conv(k, Tensor::vector(vec![0.0]), ActivationKind::Linear)),
                Node::batch_norm(
                    "bn",
                    "c",
                    BatchNorm {
                        gamma: vec![3.0],
                        beta: vec![1.0],
                        mean: vec![0.5],
                        variance: vec![4.0],
                        epsilon: 0.0,
                        activation: ActivationKind::Relu,
                    },
                ),
            ],
            vec!["bn".into()],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = ModelPaths::new(dir.path(), "bn");
        save_model(&g, &paths, Dtype::F64, "t", None).unwrap();
        let raw = load_model(&paths.manifest, &paths.weights, false).unwrap();
        assert_eq!(raw.nodes().len(), 2);
        let folded = load_model(&paths.manifest, &paths.weights, true).unwrap();
        assert_eq!(folded.nodes().len(), 1);
        let l = folded.layer("c").unwrap();
        assert_eq!(l.kernel.data(), &[3.0]);
        assert_eq!(l.bias.data(), &[0.25]);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(
            g.execute(&x, &Taps::None).unwrap().output().data(),
            folded.run(&x).unwrap().data()
        );
    }

    #[test]
    fn empty_graph_is_rejected() {
        let g = Graph::new("x", [1, 1, 1], vec![], vec![]);
        if let Ok(g) = g {
            assert!(matches!(encode_model(&g, Dtype::F64, "t"), Err(Error::InvalidGraph(_))));
        }
    }
}
