//! Fine-tuning engine: reverse-mode gradients for the supported op set,
//! SGD with momentum, and a finite-difference gradient check.
//!
//! Training runs in f64 on a copy of the Conv/Linear weights and biases; the
//! result is written back into an fp32 graph. BatchNorm is treated as a frozen
//! per-channel affine map.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, Node, OpKind};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{DType, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("graph cannot be trained: {0}")]
    UnsupportedForTraining(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Bce {
        #[serde(default)]
        from_logits: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            epochs: 1000,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::BadConfig(format!("lr {} must be non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable tensor: (node id, weight name).
pub type ParamKey = (String, String);
pub type Params = BTreeMap<ParamKey, Vec<f64>>;

#[derive(Debug, Clone)]
struct Arr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Arr {
    fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.shape().to_vec(),
            data: t.as_f32()?.iter().map(|&v| v as f64).collect(),
        })
    }

    fn add_assign(&mut self, other: &Arr) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn shape_err(msg: impl Into<String>) -> TrainError {
    TrainError::ShapeMismatch(msg.into())
}

/// Copies the trainable Conv/Linear tensors out of an fp32 graph.
pub fn extract_params(g: &Graph) -> Result<Params> {
    let mut params = Params::new();
    for n in &g.nodes {
        match n.kind {
            OpKind::Quantize | OpKind::Dequantize => {
                return Err(TrainError::UnsupportedForTraining(format!("{} is a {} node", n.id, n.kind)));
            }
            OpKind::Conv | OpKind::Linear => {
                for name in ["w", "b"] {
                    if let Some(t) = n.weight(name) {
                        if t.dtype() != DType::F32 {
                            return Err(TrainError::UnsupportedForTraining(format!("{}.{name} is {}", n.id, t.dtype())));
                        }
                        params.insert((n.id.clone(), name.into()), t.as_f32()?.iter().map(|&v| v as f64).collect());
                    }
                }
            }
            _ => {}
        }
    }
    Ok(params)
}

/// Writes trained parameters back into a copy of `g`.
pub fn apply_params(g: &Graph, params: &Params) -> Result<Graph> {
    let mut out = g.clone();
    for ((id, name), v) in params {
        let node = out.node_mut(id).ok_or_else(|| shape_err(format!("unknown node {id}")))?;
        let t = node.weights.get_mut(name).ok_or_else(|| shape_err(format!("{id} has no {name}")))?;
        let shape = t.shape().to_vec();
        *t = Tensor::from_f32(shape, v.iter().map(|&x| x as f32).collect())?;
    }
    Ok(out)
}

/// Compiled view of a graph for repeated forward/backward passes.
struct Net<'g> {
    g: &'g Graph,
    order: Vec<&'g Node>,
    input: String,
    output: String,
}

#[derive(Default)]
struct Trace {
    values: HashMap<String, Arr>,
    argmax: HashMap<String, Vec<usize>>,
    /// ReLU signs and pooling argmaxes; differs when an activation pattern flips.
    pattern: Vec<u64>,
}

fn get_param<'p>(params: &'p Params, id: &str, name: &str) -> Option<&'p [f64]> {
    params.get(&(id.to_string(), name.to_string())).map(Vec::as_slice)
}

fn conv_geom(node: &Node, x: &Arr) -> Result<ConvGeom> {
    let w = node.weight("w").ok_or_else(|| shape_err(format!("conv {} has no weight", node.id)))?;
    let d = w.rank().saturating_sub(2);
    let stride = node.spatial("stride", d, 1).map_err(shape_err)?;
    let pad = node.spatial("pad", d, 0).map_err(shape_err)?;
    ConvGeom::new(&x.shape, w.shape(), &stride, &pad).map_err(shape_err)
}

fn pool_geom(node: &Node, x: &Arr) -> Result<PoolGeom> {
    let d = x.shape.len().saturating_sub(2);
    let window = node.spatial("window", d, 1).map_err(shape_err)?;
    let stride = match node.ints("stride") {
        Some(_) => node.spatial("stride", d, 1).map_err(shape_err)?,
        None => window.clone(),
    };
    let pad = node.spatial("pad", d, 0).map_err(shape_err)?;
    PoolGeom::new(&x.shape, &window, &stride, &pad).map_err(shape_err)
}

fn bn_affine(node: &Node) -> Result<(Vec<f64>, Vec<f64>)> {
    let get = |n: &str| -> Result<Vec<f64>> {
        Ok(node
            .weight(n)
            .ok_or_else(|| shape_err(format!("batchnorm {} lacks {n}", node.id)))?
            .as_f32()?
            .iter()
            .map(|&v| v as f64)
            .collect())
    };
    let (gamma, beta, mean, var) = (get("gamma")?, get("beta")?, get("mean")?, get("var")?);
    let eps = node.float("eps").unwrap_or(1e-5);
    let scale: Vec<f64> = gamma.iter().zip(&var).map(|(g, v)| g / (v + eps).sqrt()).collect();
    let shift = beta.iter().zip(&mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
    Ok((scale, shift))
}

fn slope(node: &Node) -> Result<f64> {
    node.float("slope")
        .ok_or_else(|| shape_err(format!("LeakyReLU {} needs a slope", node.id)))
}

impl<'g> Net<'g> {
    fn new(g: &'g Graph) -> Result<Self> {
        g.validate()?;
        let order = g
            .topo_order()?
            .into_iter()
            .map(|id| g.node(&id).expect("topo ids exist"))
            .collect::<Vec<_>>();
        if let Some(n) = order.iter().find(|n| matches!(n.kind, OpKind::Quantize | OpKind::Dequantize)) {
            return Err(TrainError::UnsupportedForTraining(format!("{} is a {} node", n.id, n.kind)));
        }
        if g.inputs.len() != 1 || g.outputs.len() != 1 {
            return Err(TrainError::UnsupportedForTraining("training needs exactly one input and one output".into()));
        }
        Ok(Self {
            g,
            order,
            input: g.inputs[0].name.clone(),
            output: g.outputs[0].clone(),
        })
    }

    fn forward(&self, params: &Params, x: Arr, record: bool) -> Result<Trace> {
        if !self.g.inputs[0].accepts(&x.shape) {
            return Err(shape_err(format!("input shape {:?} not accepted", x.shape)));
        }
        let mut tr = Trace::default();
        tr.values.insert(self.input.clone(), x);
        for node in &self.order {
            let ins: Vec<&Arr> = node.inputs.iter().map(|i| &tr.values[i]).collect();
            let x = ins[0];
            let y = match node.kind {
                OpKind::Conv => {
                    let geom = conv_geom(node, x)?;
                    let w = get_param(params, &node.id, "w").expect("conv weight extracted");
                    let b = get_param(params, &node.id, "b");
                    Arr {
                        shape: geom.out_shape(),
                        data: kernels::conv_forward(&geom, &x.data, w, b),
                    }
                }
                OpKind::Linear => {
                    let wt = node.weight("w").expect("validated");
                    let (out_f, in_f) = (wt.shape()[0], wt.shape()[1]);
                    if x.shape.len() != 2 || x.shape[1] != in_f {
                        return Err(shape_err(format!("linear {} input {:?}", node.id, x.shape)));
                    }
                    let w = get_param(params, &node.id, "w").expect("linear weight extracted");
                    let b = get_param(params, &node.id, "b");
                    let n = x.shape[0];
                    let mut y = Arr::zeros(&[n, out_f]);
                    for s in 0..n {
                        let xs = &x.data[s * in_f..(s + 1) * in_f];
                        for o in 0..out_f {
                            let dot: f64 = w[o * in_f..(o + 1) * in_f].iter().zip(xs).map(|(a, b)| a * b).sum();
                            y.data[s * out_f + o] = dot + b.map_or(0.0, |b| b[o]);
                        }
                    }
                    y
                }
                OpKind::ReLU | OpKind::LeakyReLU => {
                    let a = if node.kind == OpKind::ReLU { 0.0 } else { slope(node)? };
                    if record {
                        tr.pattern.extend(x.data.iter().map(|&v| (v > 0.0) as u64));
                    }
                    Arr {
                        shape: x.shape.clone(),
                        data: x.data.iter().map(|&v| if v > 0.0 { v } else { a * v }).collect(),
                    }
                }
                OpKind::Sigmoid => Arr {
                    shape: x.shape.clone(),
                    data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
                },
                OpKind::BatchNorm => {
                    let (scale, shift) = bn_affine(node)?;
                    let c = scale.len();
                    let plane: usize = x.shape[2..].iter().product();
                    let mut y = x.clone();
                    for (i, chunk) in y.data.chunks_mut(plane).enumerate() {
                        for v in chunk {
                            *v = *v * scale[i % c] + shift[i % c];
                        }
                    }
                    y
                }
                OpKind::MaxPool => {
                    let geom = pool_geom(node, x)?;
                    let (out, arg) = kernels::maxpool_forward(&geom, &x.data);
                    if record {
                        tr.pattern.extend(arg.iter().map(|&a| a as u64));
                    }
                    tr.argmax.insert(node.id.clone(), arg);
                    let d = x.shape.len() - 2;
                    let mut shape = x.shape[..2].to_vec();
                    shape.extend_from_slice(&geom.out_sp[3 - d..]);
                    Arr { shape, data: out }
                }
                OpKind::UpsampleNearest => {
                    let d = x.shape.len() - 2;
                    let factor = node.spatial("factor", d, 1).map_err(shape_err)?;
                    let planes = x.shape[0] * x.shape[1];
                    let data = kernels::upsample_forward(
                        planes,
                        kernels::lift3(&x.shape[2..], 1),
                        kernels::lift3(&factor, 1),
                        &x.data,
                    );
                    let mut shape = x.shape[..2].to_vec();
                    shape.extend(x.shape[2..].iter().zip(&factor).map(|(&e, &f)| e * f));
                    Arr { shape, data }
                }
                OpKind::Concat => {
                    let n = x.shape[0];
                    let plane: usize = x.shape[2..].iter().product();
                    let channels: usize = ins.iter().map(|a| a.shape[1]).sum();
                    let mut data = Vec::with_capacity(n * channels * plane);
                    for s in 0..n {
                        for a in &ins {
                            let c = a.shape[1];
                            data.extend_from_slice(&a.data[s * c * plane..(s + 1) * c * plane]);
                        }
                    }
                    let mut shape = x.shape.clone();
                    shape[1] = channels;
                    Arr { shape, data }
                }
                OpKind::Add => {
                    if ins[0].shape != ins[1].shape {
                        return Err(shape_err(format!("add {:?} + {:?}", ins[0].shape, ins[1].shape)));
                    }
                    let mut y = ins[0].clone();
                    y.add_assign(ins[1]);
                    y
                }
                OpKind::Quantize | OpKind::Dequantize => unreachable!("rejected in Net::new"),
            };
            tr.values.insert(node.id.clone(), y);
        }
        Ok(tr)
    }

    fn backward(&self, params: &Params, tr: &Trace, dout: Arr) -> Result<Params> {
        let mut grads = Params::new();
        let mut dvals: HashMap<String, Arr> = HashMap::new();
        dvals.insert(self.output.clone(), dout);
        let push = |dvals: &mut HashMap<String, Arr>, id: &str, d: Arr| match dvals.get_mut(id) {
            Some(acc) => acc.add_assign(&d),
            None => {
                dvals.insert(id.to_string(), d);
            }
        };
        for node in self.order.iter().rev() {
            let Some(dy) = dvals.remove(&node.id) else {
                continue;
            };
            let x = &tr.values[&node.inputs[0]];
            match node.kind {
                OpKind::Conv => {
                    let geom = conv_geom(node, x)?;
                    let w = get_param(params, &node.id, "w").expect("conv weight extracted");
                    let n = x.shape[0];
                    let (in_s, out_s) = (geom.in_ch * geom.in_len(), geom.out_ch * geom.out_len());
                    let mut dx = Arr::zeros(&x.shape);
                    let mut dw = vec![0.0; w.len()];
                    let mut db = vec![0.0; geom.out_ch];
                    let single = ConvGeom { batch: 1, ..geom.clone() };
                    for s in 0..n {
                        let (dxs, dws, dbs) = kernels::conv_backward_sample(
                            &single,
                            &x.data[s * in_s..(s + 1) * in_s],
                            w,
                            &dy.data[s * out_s..(s + 1) * out_s],
                        );
                        dx.data[s * in_s..(s + 1) * in_s].copy_from_slice(&dxs);
                        dw.iter_mut().zip(&dws).for_each(|(a, b)| *a += b);
                        db.iter_mut().zip(&dbs).for_each(|(a, b)| *a += b);
                    }
                    grads.insert((node.id.clone(), "w".into()), dw);
                    if get_param(params, &node.id, "b").is_some() {
                        grads.insert((node.id.clone(), "b".into()), db);
                    }
                    push(&mut dvals, &node.inputs[0], dx);
                }
                OpKind::Linear => {
                    let w = get_param(params, &node.id, "w").expect("linear weight extracted");
                    let (n, in_f) = (x.shape[0], x.shape[1]);
                    let out_f = dy.shape[1];
                    let mut dx = Arr::zeros(&x.shape);
                    let mut dw = vec![0.0; w.len()];
                    let mut db = vec![0.0; out_f];
                    for s in 0..n {
                        for o in 0..out_f {
                            let g = dy.data[s * out_f + o];
                            db[o] += g;
                            for i in 0..in_f {
                                dw[o * in_f + i] += g * x.data[s * in_f + i];
                                dx.data[s * in_f + i] += g * w[o * in_f + i];
                            }
                        }
                    }
                    grads.insert((node.id.clone(), "w".into()), dw);
                    if get_param(params, &node.id, "b").is_some() {
                        grads.insert((node.id.clone(), "b".into()), db);
                    }
                    push(&mut dvals, &node.inputs[0], dx);
                }
                OpKind::ReLU | OpKind::LeakyReLU => {
                    let a = if node.kind == OpKind::ReLU { 0.0 } else { slope(node)? };
                    let data = x.data.iter().zip(&dy.data).map(|(&v, &g)| if v > 0.0 { g } else { a * g }).collect();
                    push(&mut dvals, &node.inputs[0], Arr { shape: x.shape.clone(), data });
                }
                OpKind::Sigmoid => {
                    let y = &tr.values[&node.id];
                    let data = y.data.iter().zip(&dy.data).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                    push(&mut dvals, &node.inputs[0], Arr { shape: x.shape.clone(), data });
                }
                OpKind::BatchNorm => {
                    let (scale, _) = bn_affine(node)?;
                    let c = scale.len();
                    let plane: usize = x.shape[2..].iter().product();
                    let mut dx = dy;
                    for (i, chunk) in dx.data.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= scale[i % c]);
                    }
                    push(&mut dvals, &node.inputs[0], dx);
                }
                OpKind::MaxPool => {
                    let mut dx = Arr::zeros(&x.shape);
                    for (&a, &g) in tr.argmax[&node.id].iter().zip(&dy.data) {
                        dx.data[a] += g;
                    }
                    push(&mut dvals, &node.inputs[0], dx);
                }
                OpKind::UpsampleNearest => {
                    let d = x.shape.len() - 2;
                    let factor = node.spatial("factor", d, 1).map_err(shape_err)?;
                    let data = kernels::upsample_backward(
                        x.shape[0] * x.shape[1],
                        kernels::lift3(&x.shape[2..], 1),
                        kernels::lift3(&factor, 1),
                        &dy.data,
                    );
                    push(&mut dvals, &node.inputs[0], Arr { shape: x.shape.clone(), data });
                }
                OpKind::Concat => {
                    let n = dy.shape[0];
                    let total = dy.shape[1];
                    let plane: usize = dy.shape[2..].iter().product();
                    let mut offset = 0;
                    for input in &node.inputs {
                        let xs = &tr.values[input];
                        let c = xs.shape[1];
                        let mut d = Arr::zeros(&xs.shape);
                        for s in 0..n {
                            let src = &dy.data[(s * total + offset) * plane..(s * total + offset + c) * plane];
                            d.data[s * c * plane..(s + 1) * c * plane].copy_from_slice(src);
                        }
                        offset += c;
                        push(&mut dvals, input, d);
                    }
                }
                OpKind::Add => {
                    push(&mut dvals, &node.inputs[1], dy.clone());
                    push(&mut dvals, &node.inputs[0], dy);
                }
                OpKind::Quantize | OpKind::Dequantize => unreachable!("rejected in Net::new"),
            }
        }
        // parameters of nodes that do not reach the output get zero gradients
        for (k, v) in params {
            grads.entry(k.clone()).or_insert_with(|| vec![0.0; v.len()]);
        }
        Ok(grads)
    }
}

const BCE_CLAMP: f64 = 1e-7;

/// Summed loss over the elements of `y`, each term divided by `denom`, and its
/// gradient with respect to `y`.
fn loss_terms(kind: LossKind, y: &Arr, t: &[f64], denom: f64) -> (f64, Arr) {
    let mut dy = Arr::zeros(&y.shape);
    let mut total = 0.0;
    for ((&v, &tv), d) in y.data.iter().zip(t).zip(dy.data.iter_mut()) {
        match kind {
            LossKind::Mse => {
                total += (v - tv) * (v - tv);
                *d = 2.0 * (v - tv) / denom;
            }
            LossKind::Bce { from_logits: true } => {
                total += v.max(0.0) - v * tv + (-v.abs()).exp().ln_1p();
                *d = (1.0 / (1.0 + (-v).exp()) - tv) / denom;
            }
            LossKind::Bce { from_logits: false } => {
                let p = v.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                total -= tv * p.ln() + (1.0 - tv) * (1.0 - p).ln();
                *d = if p == v { (p - tv) / (p * (1.0 - p)) / denom } else { 0.0 };
            }
        }
    }
    (total / denom, dy)
}

fn target_values(kind: LossKind, y: &Arr, target: &Tensor) -> Result<Vec<f64>> {
    if target.shape() != y.shape.as_slice() {
        return Err(shape_err(format!("target {:?} vs output {:?}", target.shape(), y.shape)));
    }
    let t: Vec<f64> = target.as_f32()?.iter().map(|&v| v as f64).collect();
    if matches!(kind, LossKind::Bce { .. }) && t.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(shape_err("BCE targets must lie in [0, 1]"));
    }
    Ok(t)
}

fn sample_grad(net: &Net, params: &Params, x: &Tensor, target: &Tensor, loss: LossKind, denom: f64) -> Result<(f64, Params)> {
    let tr = net.forward(params, Arr::from_tensor(x)?, false)?;
    let y = &tr.values[&net.output];
    let t = target_values(loss, y, target)?;
    let (l, dy) = loss_terms(loss, y, &t, denom);
    Ok((l, net.backward(params, &tr, dy)?))
}

fn sample_loss(net: &Net, params: &Params, x: &Tensor, target: &Tensor, loss: LossKind) -> Result<(f64, Vec<u64>)> {
    let tr = net.forward(params, Arr::from_tensor(x)?, true)?;
    let y = &tr.values[&net.output];
    let t = target_values(loss, y, target)?;
    Ok((loss_terms(loss, y, &t, y.data.len() as f64).0, tr.pattern))
}

/// Mean loss over all output elements and its gradient for every Conv/Linear
/// weight and bias.
pub fn forward_backward(g: &Graph, x: &Tensor, target: &Tensor, loss: LossKind) -> Result<(f64, Params)> {
    let net = Net::new(g)?;
    let params = extract_params(g)?;
    sample_grad(&net, &params, x, target, loss, target.len() as f64)
}

/// `v <- momentum * v + grad; w <- w - lr * v`.
pub fn sgd_step(params: &mut Params, grads: &Params, cfg: &SgdConfig, velocity: &mut Params) -> Result<()> {
    for (key, w) in params.iter_mut() {
        let g = grads.get(key).ok_or_else(|| shape_err(format!("no gradient for {}.{}", key.0, key.1)))?;
        if g.len() != w.len() {
            return Err(shape_err(format!("gradient of {}.{} has {} elements, weight {}", key.0, key.1, g.len(), w.len())));
        }
        let v = velocity.entry(key.clone()).or_insert_with(|| vec![0.0; w.len()]);
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi;
            *wi -= cfg.lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub graph: Graph,
    /// Mean training loss per epoch, measured before each batch's update.
    pub losses: Vec<f64>,
}

/// Mini-batch SGD over `(input, target)` pairs, reshuffled every epoch from
/// `cfg.seed`. Per-sample gradients run in parallel and are summed in order.
pub fn finetune(g: &Graph, data: &[(Tensor, Tensor)], loss: LossKind, cfg: &SgdConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let net = Net::new(g)?;
    let mut params = extract_params(g)?;
    let mut velocity = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total: f64 = data.iter().map(|(_, t)| t.len() as f64).sum();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let denom: f64 = batch.iter().map(|&i| data[i].1.len() as f64).sum();
            let parts = batch
                .par_iter()
                .map(|&i| sample_grad(&net, &params, &data[i].0, &data[i].1, loss, denom))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Params::new();
            let mut batch_loss = 0.0;
            for (l, gr) in parts {
                batch_loss += l;
                for (k, v) in gr {
                    match grads.get_mut(&k) {
                        Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(k, v);
                        }
                    }
                }
            }
            epoch_loss += batch_loss * denom / total;
            sgd_step(&mut params, &grads, cfg, &mut velocity)?;
        }
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        losses.push(epoch_loss);
    }
    Ok(FinetuneOutcome {
        graph: apply_params(g, &params)?,
        losses,
    })
}

/// `epoch,loss` CSV of a training curve.
pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements skipped because a perturbation flipped an activation pattern.
    pub excluded: usize,
}

const GRAD_CHECK_ELEMENTS: usize = 200;

/// Compares analytic gradients with central differences on at most 200
/// randomly chosen weight elements. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(g: &Graph, x: &Tensor, target: &Tensor, loss: LossKind, eps: f64, seed: u64) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(TrainError::BadConfig(format!("epsilon {eps} must be positive")));
    }
    let net = Net::new(g)?;
    let mut params = extract_params(g)?;
    let (_, grads) = sample_grad(&net, &params, x, target, loss, target.len() as f64)?;
    let (_, base_pattern) = sample_loss(&net, &params, x, target, loss)?;

    let elements: Vec<(ParamKey, usize)> = params
        .iter()
        .flat_map(|(k, v)| (0..v.len()).map(move |i| (k.clone(), i)))
        .collect();
    let picked: Vec<usize> = if elements.len() > GRAD_CHECK_ELEMENTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, elements.len(), GRAD_CHECK_ELEMENTS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..elements.len()).collect()
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        excluded: 0,
    };
    for i in picked {
        let (key, j) = &elements[i];
        let orig = params[key][*j];
        params.get_mut(key).expect("present")[*j] = orig + eps;
        let (lp, pat_p) = sample_loss(&net, &params, x, target, loss)?;
        params.get_mut(key).expect("present")[*j] = orig - eps;
        let (lm, pat_m) = sample_loss(&net, &params, x, target, loss)?;
        params.get_mut(key).expect("present")[*j] = orig;
        if pat_p != base_pattern || pat_m != base_pattern {
            report.excluded += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic = grads[key][*j];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_err = report.max_rel_err.max((analytic - numeric).abs() / denom);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Attr, Dim, GraphInput};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::create(shape, v).unwrap()
    }

    fn linear_graph(w: f32, b: Option<f32>) -> Graph {
        Graph::new(
            vec![GraphInput::new("x", vec![Dim::batch(), Dim::Fixed(1)])],
            vec![Node::linear("fc", "x", t(&[1, 1], &[w]), b.map(|b| t(&[1], &[b])))],
            vec!["fc"],
        )
    }

    fn key(id: &str, name: &str) -> ParamKey {
        (id.into(), name.into())
    }

    #[test]
    fn linear_gradient_example() {
        let g = linear_graph(1.0, None);
        let (l, gr) = forward_backward(&g, &t(&[1, 1], &[2.0]), &t(&[1, 1], &[0.0]), LossKind::Mse).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(gr[&key("fc", "w")], vec![8.0]);
    }

    #[test]
    fn zero_input_gives_zero_weight_gradient() {
        let w = t(&[2, 1, 3], &[0.3, -0.2, 0.5, 0.1, 0.4, -0.6]);
        let g = Graph::new(
            vec![GraphInput::new("x", vec![Dim::batch(), Dim::Fixed(1), Dim::Fixed(5)])],
            vec![Node::conv("c", "x", w, Some(t(&[2], &[0.5, -0.5])), 1, 1)],
            vec!["c"],
        );
        let x = Tensor::zeros(&[1, 1, 5], DType::F32).unwrap();
        let target = t(&[1, 2, 5], &[1.0; 10]);
        let (_, gr) = forward_backward(&g, &x, &target, LossKind::Mse).unwrap();
        assert!(gr[&key("c", "w")].iter().all(|&v| v == 0.0));
        assert!(gr[&key("c", "b")].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn quantized_graphs_are_rejected() {
        let mut g = linear_graph(1.0, None);
        g.nodes.insert(0, Node::new("q", OpKind::Quantize, &["x"]));
        g.nodes.push(Node::new("dq", OpKind::Dequantize, &["fc"]));
        assert!(matches!(extract_params(&g), Err(TrainError::UnsupportedForTraining(_))));
    }

    #[test]
    fn sgd_examples() {
        let cfg = |lr, momentum| SgdConfig {
            lr,
            momentum,
            ..SgdConfig::default()
        };
        let mut w = Params::from([(key("a", "w"), vec![0.0])]);
        let mut v = Params::new();
        sgd_step(&mut w, &Params::from([(key("a", "w"), vec![1.0])]), &cfg(0.1, 0.0), &mut v).unwrap();
        assert!((w[&key("a", "w")][0] + 0.1).abs() < 1e-15);

        let mut w = Params::from([(key("a", "w"), vec![0.7])]);
        sgd_step(&mut w, &Params::from([(key("a", "w"), vec![0.0])]), &cfg(0.1, 0.9), &mut Params::new()).unwrap();
        assert_eq!(w[&key("a", "w")], vec![0.7]);

        let mut w = Params::from([(key("a", "w"), vec![0.0])]);
        let mut v = Params::new();
        let g1 = Params::from([(key("a", "w"), vec![1.0])]);
        sgd_step(&mut w, &g1, &cfg(1.0, 0.9), &mut v).unwrap();
        sgd_step(&mut w, &g1, &cfg(1.0, 0.9), &mut v).unwrap();
        assert!((w[&key("a", "w")][0] + 2.9).abs() < 1e-12);

        let bad = Params::from([(key("a", "w"), vec![1.0, 2.0])]);
        assert!(matches!(sgd_step(&mut w, &bad, &cfg(1.0, 0.0), &mut v), Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn finetune_examples() {
        let g = linear_graph(0.0, None);
        let data = vec![(t(&[1, 1], &[1.0]), t(&[1, 1], &[2.0]))];
        let frozen = finetune(
            &g,
            &data,
            LossKind::Mse,
            &SgdConfig {
                lr: 0.0,
                epochs: 3,
                ..SgdConfig::default()
            },
        )
        .unwrap();
        assert_eq!(frozen.graph, g);

        let cfg = SgdConfig {
            lr: 0.05,
            momentum: 0.0,
            epochs: 300,
            batch_size: 1,
            seed: 3,
        };
        let fit = finetune(&g, &data, LossKind::Mse, &cfg).unwrap();
        let w = fit.graph.node("fc").unwrap().weight("w").unwrap().as_f32().unwrap()[0];
        assert!((w - 2.0).abs() < 1e-3, "w = {w}");
        assert!(fit.losses.windows(2).all(|p| p[1] <= p[0]));
        assert_eq!(fit.losses.len(), 300);
    }

    #[test]
    fn finetune_is_deterministic() {
        let g = linear_graph(0.3, Some(0.1));
        let data: Vec<_> = (0..7)
            .map(|i| {
                let x = i as f32 * 0.3 - 1.0;
                (t(&[1, 1], &[x]), t(&[1, 1], &[1.5 * x - 0.2]))
            })
            .collect();
        let cfg = SgdConfig {
            lr: 0.05,
            epochs: 20,
            batch_size: 3,
            seed: 11,
            ..SgdConfig::default()
        };
        let a = finetune(&g, &data, LossKind::Mse, &cfg).unwrap();
        let b = finetune(&g, &data, LossKind::Mse, &cfg).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn grad_check_linear_and_kink() {
        let g = linear_graph(0.7, Some(-0.3));
        let r = grad_check(&g, &t(&[2, 1], &[1.5, -0.5]), &t(&[2, 1], &[0.2, 0.9]), LossKind::Mse, 1e-3, 0).unwrap();
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_err <= 1e-6, "{r:?}");

        // pre-activation exactly zero at the ReLU
        let mut g = linear_graph(1.0, Some(-2.0));
        g.nodes.push(Node::new("r", OpKind::ReLU, &["fc"]));
        g.outputs = vec!["r".into()];
        let r = grad_check(&g, &t(&[1, 1], &[2.0]), &t(&[1, 1], &[1.0]), LossKind::Mse, 1e-3, 0).unwrap();
        assert_eq!((r.checked, r.excluded), (0, 2));
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
        let n = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * scale).collect();
        Tensor::from_f32(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn grad_check_small_unet_with_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bn = Node::new("bn", OpKind::BatchNorm, &["c1"])
            .with_weight("gamma", t(&[3], &[1.2, 0.8, 1.0]))
            .with_weight("beta", t(&[3], &[0.1, -0.1, 0.0]))
            .with_weight("mean", t(&[3], &[0.05, 0.0, -0.02]))
            .with_weight("var", t(&[3], &[1.1, 0.9, 1.0]))
            .with_attr("eps", Attr::Float(1e-5));
        let g = Graph::new(
            vec![GraphInput::new("x", vec![Dim::batch(), Dim::Fixed(1), Dim::Fixed(6), Dim::Fixed(6)])],
            vec![
                Node::conv("c1", "x", randn(&mut rng, &[3, 1, 3, 3], 0.5), Some(randn(&mut rng, &[3], 0.1)), 1, 1),
                bn,
                Node::new("a1", OpKind::LeakyReLU, &["bn"]).with_attr("slope", Attr::Float(0.1)),
                Node::new("p", OpKind::MaxPool, &["a1"]).with_attr("window", Attr::Ints(vec![2])),
                Node::conv("c2", "p", randn(&mut rng, &[3, 3, 3, 3], 0.4), Some(randn(&mut rng, &[3], 0.1)), 1, 1),
                Node::new("a2", OpKind::ReLU, &["c2"]),
                Node::new("u", OpKind::UpsampleNearest, &["a2"]).with_attr("factor", Attr::Ints(vec![2])),
                Node::new("cat", OpKind::Concat, &["a1", "u"]).with_attr("axis", Attr::Ints(vec![1])),
                Node::conv("c3", "cat", randn(&mut rng, &[3, 6, 3, 3], 0.3), Some(randn(&mut rng, &[3], 0.1)), 1, 1),
                Node::new("add", OpKind::Add, &["c3", "a1"]),
                Node::conv("c4", "add", randn(&mut rng, &[1, 3, 1, 1], 0.5), None, 1, 0),
                Node::new("s", OpKind::Sigmoid, &["c4"]),
            ],
            vec!["s"],
        );
        let x = randn(&mut rng, &[2, 1, 6, 6], 1.0);
        let target = Tensor::from_f32(
            vec![2, 1, 6, 6],
            (0..72).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        for loss in [LossKind::Mse, LossKind::Bce { from_logits: false }] {
            let r = grad_check(&g, &x, &target, loss, 1e-3, 9).unwrap();
            assert!(r.checked > 100, "{r:?}");
            assert!(r.max_rel_err <= 1e-3, "{loss:?}: {r:?}");
        }
    }

    #[test]
    fn bce_from_logits_matches_sigmoid_bce() {
        let g = linear_graph(0.8, Some(0.1));
        let mut gs = g.clone();
        gs.nodes.push(Node::new("s", OpKind::Sigmoid, &["fc"]));
        gs.outputs = vec!["s".into()];
        let x = t(&[3, 1], &[0.5, -1.0, 2.0]);
        let y = t(&[3, 1], &[1.0, 0.0, 1.0]);
        let (la, ga) = forward_backward(&g, &x, &y, LossKind::Bce { from_logits: true }).unwrap();
        let (lb, gb) = forward_backward(&gs, &x, &y, LossKind::Bce { from_logits: false }).unwrap();
        assert!((la - lb).abs() < 1e-9);
        for k in ga.keys() {
            for (a, b) in ga[k].iter().zip(&gb[k]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loss_curve_format() {
        assert_eq!(loss_curve_csv(&[0.5, 0.25]), "epoch,loss\n1,0.5\n2,0.25\n");
    }
}
