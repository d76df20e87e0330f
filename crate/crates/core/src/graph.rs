//! Static computation-graph IR, shape inference, batch-norm folding and the
//! `.ebm` model file.
//!
//! A graph is a DAG of [`Node`]s over a closed set of [`OpKind`]s. Topology
//! never depends on input data; only input extents marked symbolic (the batch
//! axis `"N"`, or spatial axes of fully-convolutional models) vary at run time.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::QuantParams;
use crate::tensor::{DType, Tensor, TensorError};

const EBM_MAGIC: &[u8; 4] = b"EBM1";
const EBM_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph failed validation: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("shape conflict at node {node}: {reason}")]
    ShapeConflict { node: String, reason: String },
    #[error("cycle detected involving nodes {0:?}")]
    CycleDetected(Vec<String>),
    #[error("unknown input {0}")]
    UnknownInput(String),
    #[error("bad magic in model file")]
    BadMagic,
    #[error("model file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unknown op kind {0:?}")]
    UnknownOpKind(String),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv,
    Linear,
    ReLU,
    LeakyReLU,
    Sigmoid,
    BatchNorm,
    MaxPool,
    UpsampleNearest,
    Concat,
    Add,
    Quantize,
    Dequantize,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Conv,
        OpKind::Linear,
        OpKind::ReLU,
        OpKind::LeakyReLU,
        OpKind::Sigmoid,
        OpKind::BatchNorm,
        OpKind::MaxPool,
        OpKind::UpsampleNearest,
        OpKind::Concat,
        OpKind::Add,
        OpKind::Quantize,
        OpKind::Dequantize,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            OpKind::Conv => "Conv",
            OpKind::Linear => "Linear",
            OpKind::ReLU => "ReLU",
            OpKind::LeakyReLU => "LeakyReLU",
            OpKind::Sigmoid => "Sigmoid",
            OpKind::BatchNorm => "BatchNorm",
            OpKind::MaxPool => "MaxPool",
            OpKind::UpsampleNearest => "UpsampleNearest",
            OpKind::Concat => "Concat",
            OpKind::Add => "Add",
            OpKind::Quantize => "Quantize",
            OpKind::Dequantize => "Dequantize",
        }
    }

    /// Elementwise ops that keep the channel layout untouched.
    pub fn is_channelwise(self) -> bool {
        matches!(
            self,
            OpKind::ReLU
                | OpKind::LeakyReLU
                | OpKind::Sigmoid
                | OpKind::BatchNorm
                | OpKind::MaxPool
                | OpKind::UpsampleNearest
                | OpKind::Quantize
                | OpKind::Dequantize
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for OpKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| GraphError::UnknownOpKind(s.to_string()))
    }
}

/// Attribute values: integer lists or a single float.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Attr {
    Ints(Vec<i64>),
    Float(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<String>,
    pub attrs: BTreeMap<String, Attr>,
    pub weights: BTreeMap<String, Tensor>,
}

impl Node {
    pub fn new(id: impl Into<String>, kind: OpKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            attrs: BTreeMap::new(),
            weights: BTreeMap::new(),
        }
    }

    /// Convolution node; spatial rank is taken from the weight shape.
    pub fn conv(id: impl Into<String>, input: &str, w: Tensor, b: Option<Tensor>, stride: usize, pad: usize) -> Self {
        let d = w.rank().saturating_sub(2);
        let kernel: Vec<i64> = w.shape()[2..].iter().map(|&k| k as i64).collect();
        let mut node = Self::new(id, OpKind::Conv, &[input])
            .with_attr("kernel", Attr::Ints(kernel))
            .with_attr("stride", Attr::Ints(vec![stride as i64; d]))
            .with_attr("pad", Attr::Ints(vec![pad as i64; d]))
            .with_weight("w", w);
        if let Some(b) = b {
            node = node.with_weight("b", b);
        }
        node
    }

    pub fn linear(id: impl Into<String>, input: &str, w: Tensor, b: Option<Tensor>) -> Self {
        let mut node = Self::new(id, OpKind::Linear, &[input]).with_weight("w", w);
        if let Some(b) = b {
            node = node.with_weight("b", b);
        }
        node
    }

    pub fn with_attr(mut self, name: &str, value: Attr) -> Self {
        self.attrs.insert(name.to_string(), value);
        self
    }

    pub fn with_weight(mut self, name: &str, t: Tensor) -> Self {
        self.weights.insert(name.to_string(), t);
        self
    }

    pub fn ints(&self, name: &str) -> Option<&[i64]> {
        match self.attrs.get(name) {
            Some(Attr::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn float(&self, name: &str) -> Option<f64> {
        match self.attrs.get(name) {
            Some(Attr::Float(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    /// Per-axis integer attribute, broadcasting a single value to `d` axes.
    pub fn spatial(&self, name: &str, d: usize, default: usize) -> std::result::Result<Vec<usize>, String> {
        match self.ints(name) {
            None => Ok(vec![default; d]),
            Some(v) if v.iter().any(|&x| x < 0) => Err(format!("{name} has negative entries")),
            Some([x]) => Ok(vec![*x as usize; d]),
            Some(v) if v.len() == d => Ok(v.iter().map(|&x| x as usize).collect()),
            Some(v) => Err(format!("{name} has {} entries, expected {d}", v.len())),
        }
    }

    /// Spatial rank of a conv node as declared by its `kernel` attribute.
    pub fn conv_dims(&self) -> Option<usize> {
        self.ints("kernel").map(|k| k.len())
    }

    pub fn is_quantized(&self) -> bool {
        self.weight("w").is_some_and(|w| w.dtype() == DType::I8)
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }
}

/// One extent of a graph input; symbolic extents are bound at run time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dim {
    Fixed(usize),
    Symbolic(String),
}

impl Dim {
    pub fn batch() -> Self {
        Dim::Symbolic("N".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    pub shape: Vec<Dim>,
}

impl GraphInput {
    pub fn new(name: impl Into<String>, shape: Vec<Dim>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn accepts(&self, shape: &[usize]) -> bool {
        shape.len() == self.shape.len()
            && self.shape.iter().zip(shape).all(|(d, &e)| match d {
                Dim::Fixed(f) => *f == e,
                Dim::Symbolic(_) => e >= 1,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub inputs: Vec<GraphInput>,
    pub outputs: Vec<String>,
    /// Per-tensor quantization parameters keyed by site id.
    pub quant: BTreeMap<String, QuantParams>,
}

/// Result of [`Graph::fold_batchnorm`]: the rewritten graph plus the ids of
/// BatchNorm nodes that could not be folded and were left in place.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub graph: Graph,
    pub unfoldable: Vec<String>,
}

pub fn weight_site(node_id: &str) -> String {
    format!("{node_id}.w")
}

pub fn activation_site(node_id: &str) -> String {
    format!("{node_id}.x")
}

impl Graph {
    pub fn new(inputs: Vec<GraphInput>, nodes: Vec<Node>, outputs: Vec<&str>) -> Self {
        Self {
            nodes,
            inputs,
            outputs: outputs.into_iter().map(String::from).collect(),
            quant: BTreeMap::new(),
        }
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn is_input(&self, name: &str) -> bool {
        self.inputs.iter().any(|i| i.name == name)
    }

    /// Consumers of every value, in declaration order.
    pub fn consumers(&self) -> HashMap<&str, Vec<&str>> {
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for n in &self.nodes {
            for i in &n.inputs {
                out.entry(i.as_str()).or_default().push(n.id.as_str());
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(Node::param_count).sum()
    }

    /// Total bytes of all weight tensors, i.e. the size of the model blob.
    pub fn weight_bytes(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.weights.values())
            .map(Tensor::byte_len)
            .sum()
    }

    /// Checks structural invariants; an empty list means the graph is valid.
    pub fn validate_static(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut seen: HashSet<&str> = HashSet::new();
        for i in &self.inputs {
            if !seen.insert(i.name.as_str()) {
                errs.push(format!("duplicate input name {}", i.name));
            }
            if i.shape.is_empty() {
                errs.push(format!("input {} has empty shape", i.name));
            }
            for d in &i.shape {
                if *d == Dim::Fixed(0) {
                    errs.push(format!("input {} has a zero extent", i.name));
                }
            }
        }
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                errs.push(format!("duplicate id {}", n.id));
            }
        }
        for n in &self.nodes {
            for inp in &n.inputs {
                if !seen.contains(inp.as_str()) {
                    errs.push(format!("unknown input {inp}"));
                }
            }
            validate_node(self, n, &mut errs);
        }
        for o in &self.outputs {
            if !seen.contains(o.as_str()) {
                errs.push(format!("unknown output {o}"));
            }
        }
        if self.outputs.is_empty() {
            errs.push("graph declares no outputs".into());
        }
        if errs.is_empty() {
            if let Err(GraphError::CycleDetected(ids)) = self.topo_order() {
                errs.push(format!("cycle detected among {ids:?}"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validate_static();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(GraphError::Invalid(errs))
        }
    }

    /// Node ids ordered so that every node follows its inputs. Among ready
    /// nodes the one declared first wins.
    pub fn topo_order(&self) -> Result<Vec<String>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let mut pending = vec![0usize; self.nodes.len()];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                if let Some(&j) = index.get(inp.as_str()) {
                    pending[i] += 1;
                    dependents[j].push(i);
                } else if !self.is_input(inp) {
                    return Err(GraphError::UnknownInput(inp.clone()));
                }
            }
        }
        let mut ready: BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| pending[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(self.nodes[i].id.clone());
            for &j in &dependents[i] {
                pending[j] -= 1;
                if pending[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = (0..self.nodes.len())
                .filter(|&i| pending[i] > 0)
                .map(|i| self.nodes[i].id.clone())
                .collect();
            return Err(GraphError::CycleDetected(stuck));
        }
        Ok(order)
    }

    /// Infers the shape of every graph input and node output.
    pub fn infer_shapes(&self, input_shapes: &BTreeMap<String, Vec<usize>>) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for gi in &self.inputs {
            let s = input_shapes.get(&gi.name).ok_or_else(|| GraphError::ShapeConflict {
                node: gi.name.clone(),
                reason: "no shape supplied for graph input".into(),
            })?;
            if !gi.accepts(s) {
                return Err(GraphError::ShapeConflict {
                    node: gi.name.clone(),
                    reason: format!("shape {s:?} does not match declared {:?}", gi.shape),
                });
            }
            shapes.insert(gi.name.clone(), s.clone());
        }
        for id in self.topo_order()? {
            let node = self.node(&id).expect("topo order yields known ids");
            let ins: Vec<&[usize]> = node
                .inputs
                .iter()
                .map(|i| shapes.get(i).map(Vec::as_slice).ok_or_else(|| GraphError::UnknownInput(i.clone())))
                .collect::<Result<_>>()?;
            let out = node_output_shape(node, &ins).map_err(|reason| GraphError::ShapeConflict {
                node: id.clone(),
                reason,
            })?;
            shapes.insert(id, out);
        }
        Ok(shapes)
    }

    /// Shapes for a single input graph, convenience over [`Graph::infer_shapes`].
    pub fn infer_shapes_single(&self, shape: &[usize]) -> Result<BTreeMap<String, Vec<usize>>> {
        let name = self
            .inputs
            .first()
            .map(|i| i.name.clone())
            .ok_or_else(|| GraphError::Invalid(vec!["graph has no inputs".into()]))?;
        self.infer_shapes(&BTreeMap::from([(name, shape.to_vec())]))
    }

    /// Folds every BatchNorm that directly follows a float Conv (consumed by
    /// nothing else) into that conv's weights and bias.
    pub fn fold_batchnorm(&self) -> FoldOutcome {
        let mut graph = self.clone();
        let mut unfoldable = Vec::new();
        let bn_ids: Vec<String> = self
            .nodes
            .iter()
            .filter(|n| n.kind == OpKind::BatchNorm)
            .map(|n| n.id.clone())
            .collect();
        for bn_id in bn_ids {
            match try_fold(&graph, &bn_id) {
                Some(g) => graph = g,
                None => unfoldable.push(bn_id),
            }
        }
        FoldOutcome { graph, unfoldable }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let mut weights = Vec::with_capacity(n.weights.len());
            for (name, t) in &n.weights {
                let offset = blob.len() as u64;
                t.write_payload(&mut blob);
                weights.push(WeightEntry {
                    name: name.clone(),
                    dtype: t.dtype(),
                    shape: t.shape().to_vec(),
                    offset,
                    length: blob.len() as u64 - offset,
                });
            }
            nodes.push(NodeHeader {
                id: n.id.clone(),
                kind: n.kind.tag().to_string(),
                inputs: n.inputs.clone(),
                attrs: n.attrs.clone(),
                weights,
            });
        }
        let header = Header {
            version: EBM_VERSION,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            nodes,
            quant: self.quant.clone(),
        };
        let header_json = serde_json::to_vec(&header).map_err(|e| GraphError::Malformed(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + header_json.len() + blob.len());
        out.extend_from_slice(EBM_MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&blob);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Graph> {
        if bytes.len() < 4 || &bytes[..4] != EBM_MAGIC {
            return Err(GraphError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(GraphError::ChecksumMismatch {
                stored: 0,
                computed: crc32fast::hash(bytes),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(GraphError::ChecksumMismatch { stored, computed });
        }
        let header_len = u32::from_le_bytes([body[4], body[5], body[6], body[7]]) as usize;
        if 8 + header_len > body.len() {
            return Err(GraphError::Malformed("header length exceeds file".into()));
        }
        let header: Header = serde_json::from_slice(&body[8..8 + header_len])
            .map_err(|e| GraphError::Malformed(format!("header json: {e}")))?;
        if header.version != EBM_VERSION {
            return Err(GraphError::Malformed(format!("unsupported version {}", header.version)));
        }
        let blob = &body[8 + header_len..];
        let mut nodes = Vec::with_capacity(header.nodes.len());
        for nh in header.nodes {
            let kind: OpKind = nh.kind.parse()?;
            let mut weights = BTreeMap::new();
            for w in nh.weights {
                let start = w.offset as usize;
                let end = start
                    .checked_add(w.length as usize)
                    .filter(|&e| e <= blob.len())
                    .ok_or_else(|| GraphError::Malformed(format!("weight {}.{} outside blob", nh.id, w.name)))?;
                let t = Tensor::from_payload(w.dtype, w.shape, &blob[start..end])?;
                weights.insert(w.name, t);
            }
            nodes.push(Node {
                id: nh.id,
                kind,
                inputs: nh.inputs,
                attrs: nh.attrs,
                weights,
            });
        }
        Ok(Graph {
            nodes,
            inputs: header.inputs,
            outputs: header.outputs,
            quant: header.quant,
        })
    }

    pub fn save_model(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load_model(path: impl AsRef<Path>) -> Result<Graph> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    inputs: Vec<GraphInput>,
    outputs: Vec<String>,
    nodes: Vec<NodeHeader>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    quant: BTreeMap<String, QuantParams>,
}

#[derive(Serialize, Deserialize)]
struct NodeHeader {
    id: String,
    kind: String,
    inputs: Vec<String>,
    attrs: BTreeMap<String, Attr>,
    weights: Vec<WeightEntry>,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn expect_arity(n: &Node, min: usize, max: usize, errs: &mut Vec<String>) {
    let k = n.inputs.len();
    if k < min || k > max {
        errs.push(format!("node {} ({}) takes {min}..={max} inputs, got {k}", n.id, n.kind));
    }
}

fn validate_node(g: &Graph, n: &Node, errs: &mut Vec<String>) {
    let id = &n.id;
    match n.kind {
        OpKind::Conv => {
            expect_arity(n, 1, 1, errs);
            let Some(w) = n.weight("w") else {
                errs.push(format!("conv {id} has no weight"));
                return;
            };
            let Some(d) = n.conv_dims() else {
                errs.push(format!("conv {id} has no kernel attribute"));
                return;
            };
            if !(1..=3).contains(&d) {
                errs.push(format!("conv {id} declares {d} spatial dims, supported 1..=3"));
            }
            if w.rank() != d + 2 {
                errs.push(format!("conv {id}: weight rank mismatch ({} for {d}-D conv)", w.rank()));
            } else if n.ints("kernel").unwrap().iter().zip(&w.shape()[2..]).any(|(&k, &e)| k as usize != e) {
                errs.push(format!("conv {id}: kernel attribute disagrees with weight shape"));
            }
            match (n.spatial("stride", d, 1), n.spatial("pad", d, 0)) {
                (Ok(s), Ok(_)) if s.contains(&0) => errs.push(format!("conv {id}: stride must be >= 1")),
                (Err(e), _) | (_, Err(e)) => errs.push(format!("conv {id}: {e}")),
                _ => {}
            }
            check_bias(g, n, w, errs);
        }
        OpKind::Linear => {
            expect_arity(n, 1, 1, errs);
            let Some(w) = n.weight("w") else {
                errs.push(format!("linear {id} has no weight"));
                return;
            };
            if w.rank() != 2 {
                errs.push(format!("linear {id}: weight rank mismatch ({} != 2)", w.rank()));
            }
            check_bias(g, n, w, errs);
        }
        OpKind::BatchNorm => {
            expect_arity(n, 1, 1, errs);
            let mut channels = None;
            for name in ["gamma", "beta", "mean", "var"] {
                match n.weight(name) {
                    None => errs.push(format!("batchnorm {id} missing {name}")),
                    Some(t) if t.rank() != 1 || t.dtype() != DType::F32 => {
                        errs.push(format!("batchnorm {id}: {name} must be an F32 vector"))
                    }
                    Some(t) => {
                        if *channels.get_or_insert(t.len()) != t.len() {
                            errs.push(format!("batchnorm {id}: {name} length differs"));
                        }
                    }
                }
            }
            if !n.float("eps").is_some_and(|e| e > 0.0) {
                errs.push(format!("batchnorm {id}: eps must be > 0"));
            }
        }
        OpKind::ReLU | OpKind::Sigmoid => expect_arity(n, 1, 1, errs),
        OpKind::LeakyReLU => {
            expect_arity(n, 1, 1, errs);
            if n.float("slope").is_none() {
                errs.push(format!("leaky relu {id} has no slope"));
            }
        }
        OpKind::MaxPool => {
            expect_arity(n, 1, 1, errs);
            match n.ints("window") {
                None => errs.push(format!("maxpool {id} has no window")),
                Some(w) if w.iter().any(|&x| x < 1) => errs.push(format!("maxpool {id}: window must be >= 1")),
                Some(w) => {
                    if n.ints("stride").is_some_and(|s| s.iter().any(|&x| x < 1)) {
                        errs.push(format!("maxpool {id}: stride must be >= 1"));
                    }
                    let pad = n.ints("pad").unwrap_or(&[0]);
                    let wmin = *w.iter().min().unwrap();
                    if pad.iter().any(|&p| p < 0 || p >= wmin) {
                        errs.push(format!("maxpool {id}: pad must be in [0, window)"));
                    }
                }
            }
        }
        OpKind::UpsampleNearest => {
            expect_arity(n, 1, 1, errs);
            match n.ints("factor") {
                Some(f) if !f.is_empty() && f.iter().all(|&x| x >= 1) => {}
                _ => errs.push(format!("upsample {id}: factor must be a list of integers >= 1")),
            }
        }
        OpKind::Concat => {
            expect_arity(n, 1, usize::MAX, errs);
            if n.ints("axis") != Some(&[1]) {
                errs.push(format!("concat {id}: only axis 1 is supported"));
            }
        }
        OpKind::Add => expect_arity(n, 2, 2, errs),
        OpKind::Quantize | OpKind::Dequantize => {
            expect_arity(n, 1, 1, errs);
            if !g.quant.contains_key(id) {
                errs.push(format!("{} node {id} has no quant params", n.kind));
            }
        }
    }
    if matches!(n.kind, OpKind::Conv | OpKind::Linear) && n.is_quantized() {
        if !g.quant.contains_key(&weight_site(id)) {
            errs.push(format!("quantized node {id} has no weight quant params"));
        }
        let from_quantize = n
            .inputs
            .first()
            .and_then(|i| g.node(i))
            .is_some_and(|p| p.kind == OpKind::Quantize);
        if !from_quantize {
            errs.push(format!("quantized node {id} must consume a Quantize node"));
        }
    } else {
        for (name, t) in &n.weights {
            if t.dtype() != DType::F32 {
                errs.push(format!("node {id}: weight {name} must be F32 in a float node"));
            }
        }
    }
}

fn check_bias(g: &Graph, n: &Node, w: &Tensor, errs: &mut Vec<String>) {
    let _ = g;
    if let Some(b) = n.weight("b") {
        if b.shape() != [w.shape()[0]] {
            errs.push(format!("node {}: bias shape {:?} != [{}]", n.id, b.shape(), w.shape()[0]));
        }
        let want = if w.dtype() == DType::I8 { DType::I32 } else { DType::F32 };
        if b.dtype() != want {
            errs.push(format!("node {}: bias dtype {} should be {want}", n.id, b.dtype()));
        }
    }
}

/// Output extent of a sliding window along one axis.
pub fn window_out(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) fn node_output_shape(node: &Node, ins: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
    let first = ins.first().ok_or("node has no inputs")?;
    match node.kind {
        OpKind::Conv => {
            let w = node.weight("w").ok_or("missing weight")?;
            let d = w.rank() - 2;
            if first.len() != d + 2 {
                return Err(format!("input rank {} for a {d}-D conv", first.len()));
            }
            if first[1] != w.shape()[1] {
                return Err(format!("input has {} channels, weight expects {}", first[1], w.shape()[1]));
            }
            let stride = node.spatial("stride", d, 1)?;
            let pad = node.spatial("pad", d, 0)?;
            let mut out = vec![first[0], w.shape()[0]];
            for ax in 0..d {
                out.push(
                    window_out(first[2 + ax], w.shape()[2 + ax], stride[ax], pad[ax])
                        .ok_or_else(|| format!("spatial extent {} too small for kernel", first[2 + ax]))?,
                );
            }
            Ok(out)
        }
        OpKind::Linear => {
            let w = node.weight("w").ok_or("missing weight")?;
            let last = *first.last().unwrap();
            if last != w.shape()[1] {
                return Err(format!("last axis {last} != linear in-features {}", w.shape()[1]));
            }
            let mut out = first.to_vec();
            *out.last_mut().unwrap() = w.shape()[0];
            Ok(out)
        }
        OpKind::ReLU | OpKind::LeakyReLU | OpKind::Sigmoid | OpKind::Quantize | OpKind::Dequantize => Ok(first.to_vec()),
        OpKind::BatchNorm => {
            let c = node.weight("gamma").ok_or("missing gamma")?.len();
            if first.len() < 2 || first[1] != c {
                return Err(format!("input channels {:?} != batchnorm channels {c}", first.get(1)));
            }
            Ok(first.to_vec())
        }
        OpKind::MaxPool => {
            if first.len() < 3 {
                return Err("maxpool needs spatial axes".into());
            }
            let d = first.len() - 2;
            let window = node.spatial("window", d, 1)?;
            let stride = match node.ints("stride") {
                Some(_) => node.spatial("stride", d, 1)?,
                None => window.clone(),
            };
            let pad = node.spatial("pad", d, 0)?;
            let mut out = first[..2].to_vec();
            for ax in 0..d {
                out.push(
                    window_out(first[2 + ax], window[ax], stride[ax], pad[ax])
                        .ok_or_else(|| format!("spatial extent {} too small for pool window", first[2 + ax]))?,
                );
            }
            Ok(out)
        }
        OpKind::UpsampleNearest => {
            if first.len() < 3 {
                return Err("upsample needs spatial axes".into());
            }
            let d = first.len() - 2;
            let factor = node.spatial("factor", d, 1)?;
            let mut out = first[..2].to_vec();
            out.extend(first[2..].iter().zip(&factor).map(|(&e, &f)| e * f));
            Ok(out)
        }
        OpKind::Concat => {
            let mut out = first.to_vec();
            if out.len() < 2 {
                return Err("concat needs a channel axis".into());
            }
            for s in &ins[1..] {
                if s.len() != out.len() || s[0] != out[0] || s[2..] != out[2..] {
                    return Err(format!("concat operands {first:?} and {s:?} disagree off the channel axis"));
                }
                out[1] += s[1];
            }
            Ok(out)
        }
        OpKind::Add => {
            if ins.len() != 2 || ins[0] != ins[1] {
                return Err(format!("add operands have different shapes {ins:?}"));
            }
            Ok(first.to_vec())
        }
    }
}

fn try_fold(g: &Graph, bn_id: &str) -> Option<Graph> {
    let bn = g.node(bn_id)?;
    let conv_id = bn.inputs.first()?;
    let conv = g.node(conv_id)?;
    if conv.kind != OpKind::Conv || conv.is_quantized() || g.outputs.contains(conv_id) {
        return None;
    }
    let consumers = g.consumers();
    if consumers.get(conv_id.as_str()).map(Vec::len) != Some(1) {
        return None;
    }
    let w = conv.weight("w")?;
    let out_ch = w.shape()[0];
    let gamma = bn.weight("gamma")?.as_f32().ok()?;
    let beta = bn.weight("beta")?.as_f32().ok()?;
    let mean = bn.weight("mean")?.as_f32().ok()?;
    let var = bn.weight("var")?.as_f32().ok()?;
    let eps = bn.float("eps")?;
    if gamma.len() != out_ch {
        return None;
    }
    let per_filter = w.len() / out_ch;
    let wv = w.as_f32().ok()?;
    let bias: Vec<f32> = match conv.weight("b") {
        Some(b) => b.as_f32().ok()?.to_vec(),
        None => vec![0.0; out_ch],
    };
    let mut new_w = Vec::with_capacity(wv.len());
    let mut new_b = Vec::with_capacity(out_ch);
    for o in 0..out_ch {
        let s = gamma[o] as f64 / (var[o] as f64 + eps).sqrt();
        new_w.extend(wv[o * per_filter..(o + 1) * per_filter].iter().map(|&x| (x as f64 * s) as f32));
        new_b.push(((bias[o] as f64 - mean[o] as f64) * s + beta[o] as f64) as f32);
    }
    let mut out = g.clone();
    let conv_mut = out.node_mut(conv_id)?;
    conv_mut
        .weights
        .insert("w".into(), Tensor::from_f32(w.shape().to_vec(), new_w).ok()?);
    conv_mut.weights.insert("b".into(), Tensor::from_f32(vec![out_ch], new_b).ok()?);
    let conv_id = conv_id.clone();
    out.nodes.retain(|n| n.id != bn_id);
    for n in &mut out.nodes {
        for i in &mut n.inputs {
            if i == bn_id {
                *i = conv_id.clone();
            }
        }
    }
    for o in &mut out.outputs {
        if o == bn_id {
            *o = conv_id.clone();
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(name: &str, shape: &[usize]) -> GraphInput {
        let mut dims = vec![Dim::batch()];
        dims.extend(shape[1..].iter().map(|&e| Dim::Fixed(e)));
        GraphInput::new(name, dims)
    }

    fn ones(shape: &[usize]) -> Tensor {
        Tensor::full_f32(shape, 1.0).unwrap()
    }

    fn chain() -> Graph {
        Graph::new(
            vec![input("x", &[1, 1, 5, 5])],
            vec![
                Node::conv("c1", "x", ones(&[2, 1, 3, 3]), Some(ones(&[2])), 1, 0),
                Node::new("r1", OpKind::ReLU, &["c1"]),
            ],
            vec!["r1"],
        )
    }

    #[test]
    fn validate_examples() {
        assert!(chain().validate_static().is_empty());

        let mut g = chain();
        g.nodes[1].inputs = vec!["x9".into()];
        let errs = g.validate_static();
        assert!(errs.iter().any(|e| e == "unknown input x9"), "{errs:?}");

        let mut g = chain();
        g.nodes[0].weights.insert("w".into(), ones(&[2, 1, 3]));
        let errs = g.validate_static();
        assert!(errs.iter().any(|e| e.contains("weight rank mismatch")), "{errs:?}");

        let mut g = chain();
        g.nodes.push(Node::new("cat", OpKind::Concat, &["r1", "c1"]).with_attr("axis", Attr::Ints(vec![2])));
        assert!(g.validate_static().iter().any(|e| e.contains("only axis 1")));
    }

    #[test]
    fn validate_detects_cycle() {
        let g = Graph::new(
            vec![input("x", &[1, 1, 4])],
            vec![
                Node::new("a", OpKind::Add, &["x", "b"]),
                Node::new("b", OpKind::ReLU, &["a"]),
            ],
            vec!["b"],
        );
        assert!(g.validate_static().iter().any(|e| e.contains("cycle")));
    }

    #[test]
    fn infer_shape_examples() {
        let g = chain();
        let s = g.infer_shapes_single(&[1, 1, 5, 5]).unwrap();
        assert_eq!(s["c1"], vec![1, 2, 3, 3]);
        // batch is symbolic
        let s = g.infer_shapes_single(&[4, 1, 5, 5]).unwrap();
        assert_eq!(s["r1"], vec![4, 2, 3, 3]);

        let strided = Graph::new(
            vec![input("x", &[1, 1, 8])],
            vec![Node::conv("c", "x", ones(&[1, 1, 3]), None, 2, 1)],
            vec!["c"],
        );
        assert_eq!(strided.infer_shapes_single(&[1, 1, 8]).unwrap()["c"], vec![1, 1, 4]);

        let add = Graph::new(
            vec![input("a", &[1, 4, 8, 8]), input("b", &[1, 3, 8, 8])],
            vec![Node::new("s", OpKind::Add, &["a", "b"])],
            vec!["s"],
        );
        let shapes = BTreeMap::from([("a".to_string(), vec![1, 4, 8, 8]), ("b".to_string(), vec![1, 3, 8, 8])]);
        match add.infer_shapes(&shapes) {
            Err(GraphError::ShapeConflict { node, .. }) => assert_eq!(node, "s"),
            other => panic!("expected ShapeConflict, got {other:?}"),
        }
    }

    #[test]
    fn pool_upsample_concat_shapes() {
        let g = Graph::new(
            vec![input("x", &[1, 2, 8, 6])],
            vec![
                Node::new("p", OpKind::MaxPool, &["x"]).with_attr("window", Attr::Ints(vec![2])),
                Node::new("u", OpKind::UpsampleNearest, &["p"]).with_attr("factor", Attr::Ints(vec![2])),
                Node::new("c", OpKind::Concat, &["x", "u"]).with_attr("axis", Attr::Ints(vec![1])),
            ],
            vec!["c"],
        );
        let s = g.infer_shapes_single(&[1, 2, 8, 6]).unwrap();
        assert_eq!(s["p"], vec![1, 2, 4, 3]);
        assert_eq!(s["u"], vec![1, 2, 8, 6]);
        assert_eq!(s["c"], vec![1, 4, 8, 6]);
    }

    #[test]
    fn topo_order_examples() {
        let x = || input("x", &[1, 1, 4]);
        let g = Graph::new(
            vec![x()],
            vec![
                Node::new("c", OpKind::ReLU, &["b"]),
                Node::new("a", OpKind::ReLU, &["x"]),
                Node::new("b", OpKind::ReLU, &["a"]),
            ],
            vec!["c"],
        );
        assert_eq!(g.topo_order().unwrap(), vec!["a", "b", "c"]);

        let diamond = Graph::new(
            vec![x()],
            vec![
                Node::new("a", OpKind::ReLU, &["x"]),
                Node::new("b", OpKind::ReLU, &["a"]),
                Node::new("c", OpKind::Sigmoid, &["a"]),
                Node::new("d", OpKind::Add, &["b", "c"]),
            ],
            vec!["d"],
        );
        assert_eq!(diamond.topo_order().unwrap(), vec!["a", "b", "c", "d"]);

        let cyc = Graph::new(
            vec![x()],
            vec![Node::new("a", OpKind::ReLU, &["b"]), Node::new("b", OpKind::ReLU, &["a"])],
            vec!["b"],
        );
        assert!(matches!(cyc.topo_order(), Err(GraphError::CycleDetected(_))));
    }

    fn bn_graph(w: f32, b: f32, gamma: f32, beta: f32, mean: f32, eps: f64) -> Graph {
        let var = 1.0 - eps as f32;
        let v = |x: f32| Tensor::from_f32(vec![1], vec![x]).unwrap();
        Graph::new(
            vec![input("x", &[1, 1, 3])],
            vec![
                Node::conv("c", "x", Tensor::from_f32(vec![1, 1, 1], vec![w]).unwrap(), Some(v(b)), 1, 0),
                Node::new("bn", OpKind::BatchNorm, &["c"])
                    .with_weight("gamma", v(gamma))
                    .with_weight("beta", v(beta))
                    .with_weight("mean", v(mean))
                    .with_weight("var", v(var))
                    .with_attr("eps", Attr::Float(eps)),
                Node::new("r", OpKind::ReLU, &["bn"]),
            ],
            vec!["r"],
        )
    }

    fn folded_wb(g: &Graph) -> (f32, f32) {
        let out = g.fold_batchnorm();
        assert!(out.unfoldable.is_empty());
        assert!(out.graph.nodes.iter().all(|n| n.kind != OpKind::BatchNorm));
        assert_eq!(out.graph.node("r").unwrap().inputs, vec!["c"]);
        let c = out.graph.node("c").unwrap();
        (
            c.weight("w").unwrap().as_f32().unwrap()[0],
            c.weight("b").unwrap().as_f32().unwrap()[0],
        )
    }

    #[test]
    fn fold_batchnorm_examples() {
        let eps = 1e-5;
        assert_eq!(folded_wb(&bn_graph(0.7, 0.25, 1.0, 0.0, 0.0, eps)), (0.7, 0.25));
        assert_eq!(folded_wb(&bn_graph(1.0, 0.0, 2.0, 0.0, 0.0, eps)), (2.0, 0.0));
        assert_eq!(folded_wb(&bn_graph(1.0, 0.0, 1.0, 3.0, 5.0, eps)).1, -2.0);
    }

    #[test]
    fn fold_leaves_shared_conv() {
        let mut g = bn_graph(1.0, 0.0, 1.0, 0.0, 0.0, 1e-5);
        g.nodes.push(Node::new("side", OpKind::ReLU, &["c"]));
        g.outputs.push("side".into());
        let out = g.fold_batchnorm();
        assert_eq!(out.unfoldable, vec!["bn"]);
        assert_eq!(out.graph, g);
    }

    #[test]
    fn model_round_trip_and_errors() {
        let mut g = bn_graph(0.3, -0.1, 1.5, 0.2, 0.1, 1e-3);
        g.quant.insert("x".into(), QuantParams::new(0.02).unwrap());
        let bytes = g.to_bytes().unwrap();
        let back = Graph::from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Graph::from_bytes(truncated), Err(GraphError::ChecksumMismatch { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(Graph::from_bytes(&bad), Err(GraphError::BadMagic)));

        // rewrite an op tag and fix the checksum
        let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let header = String::from_utf8(bytes[8..8 + header_len].to_vec()).unwrap();
        let header = header.replace("\"kind\":\"ReLU\"", "\"kind\":\"FancyLayer\"");
        let mut forged = Vec::new();
        forged.extend_from_slice(b"EBM1");
        forged.extend_from_slice(&(header.len() as u32).to_le_bytes());
        forged.extend_from_slice(header.as_bytes());
        forged.extend_from_slice(&bytes[8 + header_len..bytes.len() - 4]);
        let crc = crc32fast::hash(&forged);
        forged.extend_from_slice(&crc.to_le_bytes());
        match Graph::from_bytes(&forged) {
            Err(GraphError::UnknownOpKind(tag)) => assert_eq!(tag, "FancyLayer"),
            other => panic!("expected UnknownOpKind, got {other:?}"),
        }
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ebm");
        let g = chain();
        g.save_model(&path).unwrap();
        assert_eq!(Graph::load_model(&path).unwrap(), g);
    }
}
