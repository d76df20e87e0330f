//! Reference fp32 kernels, int8 kernels with exact int32 accumulation,
//! whole-graph execution and sliding-window tiled inference.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{weight_site, Attr, Graph, GraphError, Node, OpKind};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::quantizer::{self, QuantParams};
use crate::tensor::{accumulate_patch, DType, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("int32 accumulator overflow: sum {value} does not fit in 32 bits")]
    AccumulatorOverflow { value: i64 },
    #[error("missing graph input {0}")]
    MissingInput(String),
    #[error("missing quantization parameters for site {0}")]
    MissingParams(String),
    #[error("overlap {0} must lie in [0, 1)")]
    BadOverlap(f64),
    #[error("graph does not preserve tile extents: input {input:?}, output {output:?}")]
    NonPreservingGraph { input: Vec<usize>, output: Vec<usize> },
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ExecError> = std::result::Result<T, E>;

fn shape_err(e: String) -> ExecError {
    ExecError::ShapeMismatch(e)
}

/// Convolution via im2col + GEMM. This is the path [`run`] uses; it agrees with
/// [`conv_nd_f32_direct`] to within float reassociation error.
pub fn conv_nd_f32(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: &[usize], pad: &[usize]) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad).map_err(shape_err)?;
    let bias = b.map(|b| check_bias(b, g.out_ch)).transpose()?;
    let out = kernels::conv_forward(&g, x.as_f32()?, w.as_f32()?, bias);
    Ok(Tensor::from_f32(g.out_shape(), out)?)
}

fn check_bias(b: &Tensor, out_ch: usize) -> Result<&[f32]> {
    if b.shape() != [out_ch] {
        return Err(shape_err(format!("bias shape {:?} for {out_ch} filters", b.shape())));
    }
    Ok(b.as_f32()?)
}

/// Direct cross-correlation with zero padding; the reference convolution.
pub fn conv_nd_f32_direct(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: &[usize], pad: &[usize]) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad).map_err(shape_err)?;
    let bias = b.map(|b| check_bias(b, g.out_ch)).transpose()?;
    let xv = x.as_f32()?;
    let wv = w.as_f32()?;
    let [d, h, wd] = g.in_sp;
    let [od, oh, ow] = g.out_sp;
    let mut out = vec![0.0f32; g.batch * g.out_ch * g.out_len()];
    let mut oi = 0;
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[o]);
                        for c in 0..g.in_ch {
                            for a in 0..g.k[0] {
                                let z = (oz * g.stride[0] + a) as isize - g.pad[0] as isize;
                                if z < 0 || z as usize >= d {
                                    continue;
                                }
                                for bb in 0..g.k[1] {
                                    let y = (oy * g.stride[1] + bb) as isize - g.pad[1] as isize;
                                    if y < 0 || y as usize >= h {
                                        continue;
                                    }
                                    for e in 0..g.k[2] {
                                        let xx = (ox * g.stride[2] + e) as isize - g.pad[2] as isize;
                                        if xx < 0 || xx as usize >= wd {
                                            continue;
                                        }
                                        let xi = (((n * g.in_ch + c) * d + z as usize) * h + y as usize) * wd + xx as usize;
                                        let wi = (((o * g.in_ch + c) * g.k[0] + a) * g.k[1] + bb) * g.k[2] + e;
                                        acc += xv[xi] * wv[wi];
                                    }
                                }
                            }
                        }
                        out[oi] = acc;
                        oi += 1;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_f32(g.out_shape(), out)?)
}

/// Exact integer product of `rows` (`[m, k]`) with `cols` (`[k, n]`), plus an
/// optional per-row bias, as `[m, n]`.
fn int_matmul(rows: &[i8], cols: &[i8], k: usize, bias: Option<&[i32]>) -> Result<Vec<i32>> {
    let m = rows.len() / k.max(1);
    let n = cols.len() / k.max(1);
    let max_bias = bias.map_or(0i64, |b| b.iter().map(|&v| (v as i64).abs()).max().unwrap_or(0));
    let bound = k as i64 * 127 * 127 + max_bias;
    let mut out = vec![0i32; m * n];
    if bound <= i32::MAX as i64 {
        // no partial or final sum can leave the i32 range
        int_matmul_i32(rows, cols, k, bias, &mut out);
    } else {
        let mut acc = vec![0i64; n];
        for o in 0..m {
            acc.fill(bias.map_or(0, |b| b[o]) as i64);
            for r in 0..k {
                let wv = rows[o * k + r] as i64;
                for (a, &c) in acc.iter_mut().zip(&cols[r * n..(r + 1) * n]) {
                    *a += wv * c as i64;
                }
            }
            for (dst, &a) in out[o * n..(o + 1) * n].iter_mut().zip(&acc) {
                *dst = i32::try_from(a).map_err(|_| ExecError::AccumulatorOverflow { value: a })?;
            }
        }
    }
    Ok(out)
}

#[inline(always)]
fn int_matmul_i32_body(rows: &[i8], cols: &[i8], k: usize, bias: Option<&[i32]>, out: &mut [i32]) {
    let n = cols.len() / k.max(1);
    for (o, acc) in out.chunks_exact_mut(n.max(1)).enumerate() {
        acc.fill(bias.map_or(0, |b| b[o]));
        for r in 0..k {
            let wv = rows[o * k + r] as i16;
            if wv == 0 {
                continue;
            }
            for (a, &c) in acc.iter_mut().zip(&cols[r * n..(r + 1) * n]) {
                *a = a.wrapping_add(i32::from(wv * c as i16));
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn int_matmul_i32_avx2(rows: &[i8], cols: &[i8], k: usize, bias: Option<&[i32]>, out: &mut [i32]) {
    int_matmul_i32_body(rows, cols, k, bias, out)
}

/// Dispatches to an AVX2 build of the same loop when the CPU supports it.
fn int_matmul_i32(rows: &[i8], cols: &[i8], k: usize, bias: Option<&[i32]>, out: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at run time.
        return unsafe { int_matmul_i32_avx2(rows, cols, k, bias, out) };
    }
    int_matmul_i32_body(rows, cols, k, bias, out)
}

/// Int8 convolution. Accumulates `xq * wq` exactly in 32-bit integers, adds the
/// int32 bias (quantized at scale `sx * sw`) and rescales by `sx * sw`.
#[allow(clippy::too_many_arguments)]
pub fn conv_nd_i8(
    xq: &Tensor,
    wq: &Tensor,
    bias: Option<&Tensor>,
    stride: &[usize],
    pad: &[usize],
    sx: f32,
    sw: f32,
) -> Result<Tensor> {
    let acc = conv_nd_i8_acc(xq, wq, bias, stride, pad)?;
    let scale = sx as f64 * sw as f64;
    let out = acc.as_i32()?.iter().map(|&a| (a as f64 * scale) as f32).collect();
    Ok(Tensor::from_f32(acc.shape().to_vec(), out)?)
}

/// The int32 accumulator of [`conv_nd_i8`] before rescaling.
pub fn conv_nd_i8_acc(xq: &Tensor, wq: &Tensor, bias: Option<&Tensor>, stride: &[usize], pad: &[usize]) -> Result<Tensor> {
    let g = ConvGeom::new(xq.shape(), wq.shape(), stride, pad).map_err(shape_err)?;
    let x = xq.as_i8()?;
    let w = wq.as_i8()?;
    let b = match bias {
        Some(b) if b.shape() != [g.out_ch] => {
            return Err(shape_err(format!("bias shape {:?} for {} filters", b.shape(), g.out_ch)))
        }
        Some(b) => Some(b.as_i32()?),
        None => None,
    };
    let kl = g.patch_len();
    let p = g.out_len();
    let in_sample = g.in_ch * g.in_len();
    let mut out = vec![0i32; g.batch * g.out_ch * p];
    for n in 0..g.batch {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        let blocks: Vec<(usize, usize)> = (0..p).step_by(1024).map(|p0| (p0, 1024.min(p - p0))).collect();
        let parts: Vec<Result<(usize, usize, Vec<i32>)>> = blocks
            .into_par_iter()
            .map(|(p0, count)| {
                let mut cols = vec![0i8; count * kl];
                g.im2col_rows(xs, 0i8, p0, count, &mut cols);
                Ok((p0, count, int_matmul(w, &cols, kl, b)?))
            })
            .collect();
        let os = &mut out[n * g.out_ch * p..(n + 1) * g.out_ch * p];
        for part in parts {
            let (p0, count, res) = part?;
            for o in 0..g.out_ch {
                os[o * p + p0..o * p + p0 + count].copy_from_slice(&res[o * count..(o + 1) * count]);
            }
        }
    }
    Ok(Tensor::from_i32(g.out_shape(), out)?)
}

/// `x · Wᵀ + b` over the last axis.
pub fn linear_f32(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (rows, k, m, out_shape) = linear_dims(x, w)?;
    let bias = b.map(|b| check_bias(b, m)).transpose()?;
    let mut out = vec![0.0f32; rows * m];
    kernels::Real::gemm(
        rows,
        k,
        m,
        x.as_f32()?,
        (k as isize, 1),
        w.as_f32()?,
        (1, k as isize),
        0.0f32,
        &mut out,
        (m as isize, 1),
    );
    if let Some(bias) = bias {
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(bias).for_each(|(y, b)| *y += b);
        }
    }
    Ok(Tensor::from_f32(out_shape, out)?)
}

fn linear_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    if w.rank() != 2 {
        return Err(shape_err(format!("linear weight rank {}", w.rank())));
    }
    let (m, k) = (w.shape()[0], w.shape()[1]);
    let last = *x.shape().last().unwrap();
    if last != k {
        return Err(shape_err(format!("input last axis {last} != in-features {k}")));
    }
    let rows = x.len() / k;
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = m;
    Ok((rows, k, m, out_shape))
}

/// Int8 linear layer with exact int32 accumulation, rescaled by `sx * sw`.
pub fn linear_i8(xq: &Tensor, wq: &Tensor, bias: Option<&Tensor>, sx: f32, sw: f32) -> Result<Tensor> {
    let (rows, k, m, out_shape) = linear_dims(xq, wq)?;
    let b = bias.map(|b| b.as_i32()).transpose()?;
    let x = xq.as_i8()?;
    let xt: Vec<i8> = (0..k * rows).map(|i| x[(i % rows) * k + i / rows]).collect();
    let acc = int_matmul(wq.as_i8()?, &xt, k, b)?;
    let scale = sx as f64 * sw as f64;
    // acc is [m, rows]; transpose into [rows, m]
    let mut out = vec![0.0f32; rows * m];
    for o in 0..m {
        for r in 0..rows {
            out[r * m + o] = (acc[o * rows + r] as f64 * scale) as f32;
        }
    }
    Ok(Tensor::from_f32(out_shape, out)?)
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batch_norm_f32(x: &Tensor, node: &Node) -> Result<Tensor> {
    let get = |n: &str| -> Result<&[f32]> {
        Ok(node
            .weight(n)
            .ok_or_else(|| shape_err(format!("batchnorm {} lacks {n}", node.id)))?
            .as_f32()?)
    };
    let (gamma, beta, mean, var) = (get("gamma")?, get("beta")?, get("mean")?, get("var")?);
    let eps = node.float("eps").unwrap_or(1e-5);
    let c = gamma.len();
    if x.rank() < 2 || x.shape()[1] != c {
        return Err(shape_err(format!("batchnorm over {c} channels, input {:?}", x.shape())));
    }
    let plane: usize = x.shape()[2..].iter().product();
    let mut out = x.as_f32()?.to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let ch = i % c;
        let s = gamma[ch] as f64 / (var[ch] as f64 + eps).sqrt();
        for v in chunk {
            *v = ((*v as f64 - mean[ch] as f64) * s + beta[ch] as f64) as f32;
        }
    }
    Ok(Tensor::from_f32(x.shape().to_vec(), out)?)
}

fn ints_attr(attrs: &BTreeMap<String, Attr>, name: &str) -> Option<Vec<usize>> {
    match attrs.get(name) {
        Some(Attr::Ints(v)) => Some(v.iter().map(|&x| x.max(0) as usize).collect()),
        _ => None,
    }
}

fn per_axis(v: Option<Vec<usize>>, d: usize, default: Vec<usize>) -> Result<Vec<usize>> {
    match v {
        None => Ok(default),
        Some(v) if v.len() == 1 => Ok(vec![v[0]; d]),
        Some(v) if v.len() == d => Ok(v),
        Some(v) => Err(shape_err(format!("attribute has {} entries for {d} axes", v.len()))),
    }
}

/// Kernels for the parameter-free ops plus Linear (inputs `[x, w, b?]`).
pub fn apply_simple(kind: OpKind, inputs: &[&Tensor], attrs: &BTreeMap<String, Attr>) -> Result<Tensor> {
    let x = *inputs
        .first()
        .ok_or_else(|| shape_err(format!("{kind} called without inputs")))?;
    let map = |f: &dyn Fn(f32) -> f32| -> Result<Tensor> {
        Ok(Tensor::from_f32(x.shape().to_vec(), x.as_f32()?.iter().map(|&v| f(v)).collect())?)
    };
    match kind {
        OpKind::ReLU => map(&|v| v.max(0.0)),
        OpKind::LeakyReLU => {
            let slope = match attrs.get("slope") {
                Some(Attr::Float(s)) => *s as f32,
                _ => return Err(shape_err("LeakyReLU needs a slope".into())),
            };
            map(&|v| if v > 0.0 { v } else { v * slope })
        }
        OpKind::Sigmoid => map(&|v| 1.0 / (1.0 + (-v).exp())),
        OpKind::MaxPool => {
            let d = x.rank().saturating_sub(2);
            let window = per_axis(ints_attr(attrs, "window"), d, vec![1; d])?;
            let stride = per_axis(ints_attr(attrs, "stride"), d, window.clone())?;
            let pad = per_axis(ints_attr(attrs, "pad"), d, vec![0; d])?;
            let g = PoolGeom::new(x.shape(), &window, &stride, &pad).map_err(shape_err)?;
            let (out, _) = kernels::maxpool_forward(&g, x.as_f32()?);
            let mut shape = x.shape()[..2].to_vec();
            shape.extend_from_slice(&g.out_sp[3 - d..]);
            Ok(Tensor::from_f32(shape, out)?)
        }
        OpKind::UpsampleNearest => {
            let d = x.rank().saturating_sub(2);
            if !(1..=3).contains(&d) {
                return Err(shape_err("upsample needs 1-3 spatial axes".into()));
            }
            let factor = per_axis(ints_attr(attrs, "factor"), d, vec![1; d])?;
            let planes = x.shape()[0] * x.shape()[1];
            let out = kernels::upsample_forward(
                planes,
                kernels::lift3(&x.shape()[2..], 1),
                kernels::lift3(&factor, 1),
                x.as_f32()?,
            );
            let mut shape = x.shape()[..2].to_vec();
            shape.extend(x.shape()[2..].iter().zip(&factor).map(|(&e, &f)| e * f));
            Ok(Tensor::from_f32(shape, out)?)
        }
        OpKind::Concat => concat_channels(inputs),
        OpKind::Add => {
            let y = inputs.get(1).ok_or_else(|| shape_err("Add needs two inputs".into()))?;
            if x.shape() != y.shape() {
                return Err(shape_err(format!("add {:?} + {:?}", x.shape(), y.shape())));
            }
            let out = x.as_f32()?.iter().zip(y.as_f32()?).map(|(a, b)| a + b).collect();
            Ok(Tensor::from_f32(x.shape().to_vec(), out)?)
        }
        OpKind::Linear => {
            let w = inputs.get(1).ok_or_else(|| shape_err("Linear needs a weight input".into()))?;
            linear_f32(x, w, inputs.get(2).copied())
        }
        OpKind::Conv | OpKind::BatchNorm | OpKind::Quantize | OpKind::Dequantize => {
            Err(ExecError::Unsupported(format!("{kind} is not a simple op")))
        }
    }
}

fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs[0];
    if first.rank() < 2 {
        return Err(shape_err("concat needs a channel axis".into()));
    }
    let batch = first.shape()[0];
    let plane: usize = first.shape()[2..].iter().product();
    let mut channels = 0;
    for t in inputs {
        if t.rank() != first.rank() || t.shape()[0] != batch || t.shape()[2..] != first.shape()[2..] {
            return Err(shape_err(format!("concat {:?} with {:?}", first.shape(), t.shape())));
        }
        channels += t.shape()[1];
    }
    let mut out = Vec::with_capacity(batch * channels * plane);
    for n in 0..batch {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.as_f32()?[n * c * plane..(n + 1) * c * plane]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = channels;
    Ok(Tensor::from_f32(shape, out)?)
}

fn params<'g>(g: &'g Graph, site: &str) -> Result<&'g QuantParams> {
    g.quant.get(site).ok_or_else(|| ExecError::MissingParams(site.to_string()))
}

fn eval_node(g: &Graph, node: &Node, ins: &[&Tensor]) -> Result<Tensor> {
    match node.kind {
        OpKind::Conv => {
            let w = node.weight("w").ok_or_else(|| shape_err(format!("conv {} has no weight", node.id)))?;
            let d = w.rank() - 2;
            let stride = node.spatial("stride", d, 1).map_err(shape_err)?;
            let pad = node.spatial("pad", d, 0).map_err(shape_err)?;
            if node.is_quantized() {
                let sx = params(g, &node.inputs[0])?.scale;
                let sw = params(g, &weight_site(&node.id))?.scale;
                conv_nd_i8(ins[0], w, node.weight("b"), &stride, &pad, sx, sw)
            } else {
                conv_nd_f32(ins[0], w, node.weight("b"), &stride, &pad)
            }
        }
        OpKind::Linear => {
            let w = node.weight("w").ok_or_else(|| shape_err(format!("linear {} has no weight", node.id)))?;
            if node.is_quantized() {
                let sx = params(g, &node.inputs[0])?.scale;
                let sw = params(g, &weight_site(&node.id))?.scale;
                linear_i8(ins[0], w, node.weight("b"), sx, sw)
            } else {
                linear_f32(ins[0], w, node.weight("b"))
            }
        }
        OpKind::BatchNorm => batch_norm_f32(ins[0], node),
        OpKind::Quantize => Ok(quantizer::quantize_tensor(ins[0], params(g, &node.id)?)?),
        OpKind::Dequantize => Ok(quantizer::dequantize_tensor(ins[0], params(g, &node.id)?)?),
        kind => apply_simple(kind, ins, &node.attrs),
    }
}

/// Executes the graph. Returns the declared outputs by id.
pub fn run(g: &Graph, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    run_observed(g, inputs, &mut |_, _| {})
}

/// Like [`run`], additionally reporting every graph input and node output to
/// `observe` as it is produced.
pub fn run_observed(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
    observe: &mut dyn FnMut(&str, &Tensor),
) -> Result<BTreeMap<String, Tensor>> {
    g.validate()?;
    let order = g.topo_order()?;
    let mut remaining: HashMap<&str, usize> = HashMap::new();
    for n in &g.nodes {
        for i in &n.inputs {
            *remaining.entry(i.as_str()).or_default() += 1;
        }
    }
    let mut values: HashMap<String, Tensor> = HashMap::new();
    for gi in &g.inputs {
        let t = inputs.get(&gi.name).ok_or_else(|| ExecError::MissingInput(gi.name.clone()))?;
        if !gi.accepts(t.shape()) {
            return Err(shape_err(format!(
                "input {} has shape {:?}, declared {:?}",
                gi.name,
                t.shape(),
                gi.shape
            )));
        }
        observe(&gi.name, t);
        values.insert(gi.name.clone(), t.clone());
    }
    for id in &order {
        let node = g.node(id).expect("ids come from topo_order");
        let out = {
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| values.get(i).ok_or_else(|| ExecError::MissingInput(i.clone())))
                .collect::<Result<_>>()?;
            eval_node(g, node, &ins)?
        };
        observe(id, &out);
        for i in &node.inputs {
            let left = remaining.get_mut(i.as_str()).expect("counted above");
            *left -= 1;
            if *left == 0 && !g.outputs.contains(i) {
                values.remove(i);
            }
        }
        values.insert(id.clone(), out);
    }
    g.outputs
        .iter()
        .map(|o| {
            values
                .get(o)
                .cloned()
                .map(|t| (o.clone(), t))
                .ok_or_else(|| ExecError::MissingInput(o.clone()))
        })
        .collect()
}

/// Runs a single-input graph and returns its first declared output.
pub fn run_single(g: &Graph, x: &Tensor) -> Result<Tensor> {
    let name = g
        .inputs
        .first()
        .ok_or_else(|| ExecError::Unsupported("graph has no inputs".into()))?
        .name
        .clone();
    let mut out = run(g, &BTreeMap::from([(name, x.clone())]))?;
    let first = g.outputs.first().expect("validated graph has outputs");
    Ok(out.remove(first).expect("run returns every output"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Blend {
    #[default]
    Mean,
}

/// Tile origins over the spatial axes of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePlan {
    pub starts: Vec<Vec<usize>>,
    pub window: Vec<usize>,
    pub blend: Blend,
}

fn axis_starts(size: usize, window: usize, overlap: f64) -> Vec<usize> {
    let stride = ((window as f64 * (1.0 - overlap) + 1e-9).floor() as usize).max(1);
    let last = size - window;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s < last).collect();
    starts.push(last);
    starts
}

/// Plans overlapping windows over `image_shape` (spatial extents). Windows are
/// clamped to the image; the last tile on every axis is flush with the border.
pub fn plan_tiles(image_shape: &[usize], window: &[usize], overlap: f64) -> Result<TilePlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(ExecError::BadOverlap(overlap));
    }
    if image_shape.len() != window.len() || window.contains(&0) || image_shape.contains(&0) {
        return Err(shape_err(format!("window {window:?} for image {image_shape:?}")));
    }
    let window: Vec<usize> = window.iter().zip(image_shape).map(|(&w, &s)| w.min(s)).collect();
    let per_axis: Vec<Vec<usize>> = image_shape
        .iter()
        .zip(&window)
        .map(|(&s, &w)| axis_starts(s, w, overlap))
        .collect();
    let mut starts = vec![Vec::new()];
    for axis in &per_axis {
        starts = starts
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&s| {
                    let mut v = prefix.clone();
                    v.push(s);
                    v
                })
            })
            .collect();
    }
    Ok(TilePlan {
        starts,
        window,
        blend: Blend::Mean,
    })
}

/// Sliding-window inference with uniform mean blending of overlaps. `window`
/// covers the spatial axes of `image` (`[N, C, spatial...]`).
pub fn run_tiled(g: &Graph, image: &Tensor, window: &[usize], overlap: f64) -> Result<Tensor> {
    if image.rank() < 3 {
        return Err(shape_err(format!("tiled inference needs spatial axes, got {:?}", image.shape())));
    }
    let (lead, spatial) = image.shape().split_at(2);
    let plan = plan_tiles(spatial, window, overlap)?;
    let mut tile_shape = lead.to_vec();
    tile_shape.extend_from_slice(&plan.window);
    let shapes = g.infer_shapes_single(&tile_shape)?;
    let out_id = g.outputs.first().ok_or_else(|| ExecError::Unsupported("graph has no outputs".into()))?;
    let out_tile = &shapes[out_id];
    if out_tile.len() != tile_shape.len() || out_tile[2..] != plan.window[..] || out_tile[0] != lead[0] {
        return Err(ExecError::NonPreservingGraph {
            input: tile_shape,
            output: out_tile.clone(),
        });
    }
    let mut canvas_shape = out_tile[..2].to_vec();
    canvas_shape.extend_from_slice(spatial);
    let mut canvas = Tensor::zeros(&canvas_shape, DType::F32)?;
    let mut counts = Tensor::zeros(&canvas_shape, DType::F32)?;
    let chunk = rayon::current_num_threads().max(1) * 2;
    for starts in plan.starts.chunks(chunk) {
        let outs: Vec<Result<Tensor>> = starts
            .par_iter()
            .map(|s| {
                let mut full_start = vec![0, 0];
                full_start.extend_from_slice(s);
                let patch = image.extract_patch(&full_start, &tile_shape)?;
                run_single(g, &patch)
            })
            .collect();
        // fixed accumulation order keeps results independent of scheduling
        for (s, out) in starts.iter().zip(outs) {
            let mut full_start = vec![0, 0];
            full_start.extend_from_slice(s);
            accumulate_patch(&mut canvas, &mut counts, &out?, &full_start)?;
        }
    }
    let cnt = counts.as_f32()?.to_vec();
    for (v, c) in canvas.as_f32_mut()?.iter_mut().zip(&cnt) {
        debug_assert!(*c >= 1.0);
        *v /= c;
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Dim, GraphInput};

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::create(shape, v).unwrap()
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::full_f32(&[1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::full_f32(&[1, 1, 3, 3], 1.0).unwrap();
        let y = conv_nd_f32(&x, &w, None, &[1, 1], &[0, 0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.as_f32().unwrap(), &[9.0]);

        let x = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let ident = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(conv_nd_f32(&x, &ident, None, &[1, 1], &[0, 0]).unwrap(), x);

        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let w = t(&[1, 1, 3], &[1.0, 0.0, -1.0]);
        assert_eq!(conv_nd_f32(&x, &w, None, &[1], &[0]).unwrap().as_f32().unwrap(), &[-2.0]);
        assert_eq!(conv_nd_f32_direct(&x, &w, None, &[1], &[0]).unwrap().as_f32().unwrap(), &[-2.0]);

        let bad = t(&[1, 2, 3], &[0.0; 6]);
        assert!(matches!(
            conv_nd_f32(&x, &bad, None, &[1], &[0]),
            Err(ExecError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn conv_i8_examples() {
        let xq = Tensor::create(&[1, 1, 2], &[3i8, 4]).unwrap();
        let wq = Tensor::create(&[1, 1, 2], &[1i8, 2]).unwrap();
        let acc = conv_nd_i8_acc(&xq, &wq, None, &[1], &[0]).unwrap();
        assert_eq!(acc.as_i32().unwrap(), &[11]);
        let y = conv_nd_i8(&xq, &wq, None, &[1], &[0], 0.5, 0.1).unwrap();
        assert!((y.as_f32().unwrap()[0] - 0.55).abs() < 1e-6);

        let zero_w = Tensor::create(&[2, 1, 2], &[0i8; 4]).unwrap();
        let y = conv_nd_i8(&xq, &zero_w, None, &[1], &[0], 0.5, 0.1).unwrap();
        assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.0));

        let bias = Tensor::create(&[1], &[-11i32]).unwrap();
        let acc = conv_nd_i8_acc(&xq, &wq, Some(&bias), &[1], &[0]).unwrap();
        assert_eq!(acc.as_i32().unwrap(), &[0]);
    }

    #[test]
    fn conv_i8_overflow_is_detected() {
        // 140_000 * 127^2 > 2^31 - 1
        let n = 140_000;
        let xq = Tensor::create(&[1, 1, n], &vec![127i8; n]).unwrap();
        let wq = Tensor::create(&[1, 1, n], &vec![127i8; n]).unwrap();
        assert!(matches!(
            conv_nd_i8(&xq, &wq, None, &[1], &[0], 1.0, 1.0),
            Err(ExecError::AccumulatorOverflow { value }) if value == 140_000 * 127 * 127
        ));
        // just below the bound the slow path still returns the exact sum
        let n = 133_144;
        let xq = Tensor::create(&[1, 1, n], &vec![127i8; n]).unwrap();
        let wq = Tensor::create(&[1, 1, n], &vec![127i8; n]).unwrap();
        let acc = conv_nd_i8_acc(&xq, &wq, None, &[1], &[0]).unwrap();
        assert_eq!(acc.as_i32().unwrap()[0] as i64, 133_144 * 16129);
    }

    #[test]
    fn simple_ops() {
        let none = BTreeMap::new();
        let y = apply_simple(OpKind::ReLU, &[&t(&[2], &[-1.0, 2.0])], &none).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[0.0, 2.0]);

        let pool = BTreeMap::from([
            ("window".to_string(), Attr::Ints(vec![2])),
            ("stride".to_string(), Attr::Ints(vec![2])),
        ]);
        let y = apply_simple(OpKind::MaxPool, &[&t(&[1, 1, 4], &[1.0, 3.0, 2.0, 4.0])], &pool).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[3.0, 4.0]);

        let up = BTreeMap::from([("factor".to_string(), Attr::Ints(vec![2]))]);
        let y = apply_simple(OpKind::UpsampleNearest, &[&t(&[1, 1, 2], &[1.0, 2.0])], &up).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[1.0, 1.0, 2.0, 2.0]);

        let leaky = BTreeMap::from([("slope".to_string(), Attr::Float(0.1))]);
        let y = apply_simple(OpKind::LeakyReLU, &[&t(&[2], &[-2.0, 3.0])], &leaky).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[-0.2, 3.0]);

        let y = apply_simple(OpKind::Sigmoid, &[&t(&[1], &[0.0])], &none).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[0.5]);

        let a = t(&[1, 1, 2], &[1.0, 2.0]);
        let b = t(&[1, 2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let y = apply_simple(OpKind::Concat, &[&a, &b], &none).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2]);
        assert_eq!(y.as_f32().unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(matches!(
            apply_simple(OpKind::Add, &[&a, &b], &none),
            Err(ExecError::ShapeMismatch(_))
        ));

        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 2], &[1.0, -1.0]);
        let bias = t(&[1], &[0.5]);
        let y = apply_simple(OpKind::Linear, &[&x, &w, &bias], &none).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.as_f32().unwrap(), &[-0.5, -0.5]);
    }

    #[test]
    fn maxpool_padding_is_negative_infinity() {
        let attrs = BTreeMap::from([
            ("window".to_string(), Attr::Ints(vec![2])),
            ("stride".to_string(), Attr::Ints(vec![2])),
            ("pad".to_string(), Attr::Ints(vec![1])),
        ]);
        let y = apply_simple(OpKind::MaxPool, &[&t(&[1, 1, 3], &[-5.0, -1.0, -3.0])], &attrs).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[-5.0, -1.0]);
    }

    fn input(shape: Vec<Dim>) -> Vec<GraphInput> {
        vec![GraphInput::new("x", shape)]
    }

    #[test]
    fn run_examples() {
        let g = Graph::new(
            input(vec![Dim::Fixed(2)]),
            vec![Node::new("r", OpKind::ReLU, &["x"])],
            vec!["r"],
        );
        let y = run_single(&g, &t(&[2], &[-1.0, 1.0])).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[0.0, 1.0]);
        assert!(matches!(run(&g, &BTreeMap::new()), Err(ExecError::MissingInput(_))));

        let ident = t(&[1, 1, 1, 1], &[1.0]);
        let g = Graph::new(
            input(vec![Dim::batch(), Dim::Fixed(1), Dim::Fixed(2), Dim::Fixed(2)]),
            vec![
                Node::conv("c", "x", ident, None, 1, 0),
                Node::new("s", OpKind::Add, &["c", "x"]),
            ],
            vec!["s"],
        );
        let x = t(&[1, 1, 2, 2], &[1.0, -2.0, 3.5, 0.25]);
        let y = run_single(&g, &x).unwrap();
        assert_eq!(y.as_f32().unwrap(), &[2.0, -4.0, 7.0, 0.5]);
    }

    #[test]
    fn plan_tiles_examples() {
        assert_eq!(plan_tiles(&[4], &[4], 0.0).unwrap().starts, vec![vec![0]]);
        assert_eq!(plan_tiles(&[8], &[4], 0.5).unwrap().starts, vec![vec![0], vec![2], vec![4]]);
        assert_eq!(plan_tiles(&[7], &[4], 0.0).unwrap().starts, vec![vec![0], vec![3]]);
        let p = plan_tiles(&[3, 10], &[8, 4], 0.0).unwrap();
        assert_eq!(p.window, vec![3, 4]);
        assert_eq!(p.starts, vec![vec![0, 0], vec![0, 4], vec![0, 6]]);
        assert!(matches!(plan_tiles(&[4], &[2], 1.0), Err(ExecError::BadOverlap(_))));
        assert!(matches!(plan_tiles(&[4], &[2], -0.1), Err(ExecError::BadOverlap(_))));
    }

    #[test]
    fn run_tiled_rejects_shrinking_graph() {
        let g = Graph::new(
            input(vec![Dim::batch(), Dim::Fixed(1), Dim::Symbolic("W".into())]),
            vec![Node::conv("c", "x", t(&[1, 1, 3], &[1.0, 1.0, 1.0]), None, 1, 0)],
            vec!["c"],
        );
        let img = Tensor::full_f32(&[1, 1, 10], 1.0).unwrap();
        assert!(matches!(
            run_tiled(&g, &img, &[4], 0.25),
            Err(ExecError::NonPreservingGraph { .. })
        ));
    }
}
