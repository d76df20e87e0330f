//! Post-training int8 quantization: calibration observers, symmetric
//! per-tensor parameters and graph conversion.
//!
//! Every scale is `max_abs / 127` with the zero point pinned at 0 and codes in
//! `[-127, 127]`. Activations are observed at the inputs of Conv/Linear nodes;
//! weights are always observed exactly (min/max) at conversion time.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{self, ExecError};
use crate::graph::{activation_site, weight_site, Graph, GraphError, Node, OpKind};
use crate::tensor::{DType, Tensor, TensorError, I8_QMAX, I8_QMIN};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("cannot observe an empty tensor")]
    EmptyTensor,
    #[error("observed range is zero; falling back to scale {}", .fallback.scale)]
    DegenerateRange { fallback: QuantParams },
    #[error("observer finalized before seeing any batch")]
    NoBatches,
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f32),
    #[error("invalid observer configuration: {0}")]
    BadObserver(String),
    #[error("missing quantization parameters for site {0}")]
    MissingParams(String),
    #[error("quantized bias of node {node} does not fit in int32")]
    BiasOverflow { node: String },
    #[error("calibration needs at least one sample")]
    NoSamples,
    #[error("site id {0} collides with an existing node")]
    IdCollision(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = QuantError> = std::result::Result<T, E>;

/// Symmetric per-tensor int8 parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub bits: u8,
}

impl QuantParams {
    pub const QMIN: i32 = I8_QMIN;
    pub const QMAX: i32 = I8_QMAX;

    pub fn new(scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::InvalidScale(scale));
        }
        Ok(Self {
            scale,
            zero_point: 0,
            bits: 8,
        })
    }

    /// Parameters for a tensor whose largest magnitude is `max_abs`.
    pub fn from_max_abs(max_abs: f64) -> Result<Self> {
        if max_abs <= 0.0 || !max_abs.is_finite() {
            return Err(QuantError::DegenerateRange {
                fallback: Self::new(1.0)?,
            });
        }
        Self::new((max_abs / Self::QMAX as f64) as f32)
    }

    pub fn quantize_value(&self, x: f32) -> i8 {
        if x.is_nan() {
            return 0;
        }
        (x as f64 / self.scale as f64)
            .round_ties_even()
            .clamp(Self::QMIN as f64, Self::QMAX as f64) as i8
    }

    /// Exact dequantized value (the product is representable in f64).
    pub fn dequantize_value(&self, q: i8) -> f64 {
        q as f64 * self.scale as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ObserverKind {
    MinMax,
    EmaMinMax { momentum: f64 },
    Quantile { quantile: f64 },
    EmaQuantile { quantile: f64, momentum: f64 },
}

impl Default for ObserverKind {
    fn default() -> Self {
        ObserverKind::EmaQuantile {
            quantile: 0.9999,
            momentum: 0.9,
        }
    }
}

impl ObserverKind {
    pub fn validate(&self) -> Result<()> {
        let check_q = |q: f64| {
            if q > 0.0 && q <= 1.0 {
                Ok(())
            } else {
                Err(QuantError::BadObserver(format!("quantile {q} outside (0, 1]")))
            }
        };
        let check_m = |m: f64| {
            if (0.0..1.0).contains(&m) {
                Ok(())
            } else {
                Err(QuantError::BadObserver(format!("momentum {m} outside [0, 1)")))
            }
        };
        match *self {
            ObserverKind::MinMax => Ok(()),
            ObserverKind::EmaMinMax { momentum } => check_m(momentum),
            ObserverKind::Quantile { quantile } => check_q(quantile),
            ObserverKind::EmaQuantile { quantile, momentum } => check_q(quantile).and(check_m(momentum)),
        }
    }
}

/// Running calibration statistic for one tensor site.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub kind: ObserverKind,
    pub running_max_abs: f64,
    pub batches_seen: usize,
}

/// `q`-quantile of `|values|`, interpolating linearly between order statistics.
pub fn abs_quantile(values: &[f32], q: f64) -> f64 {
    let mut abs: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    let n = abs.len();
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, lo_val, upper) = abs.select_nth_unstable_by(lo, f32::total_cmp);
    let lo_val = *lo_val as f64;
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    lo_val + frac * (hi_val - lo_val)
}

impl ObserverState {
    pub fn new(kind: ObserverKind) -> Self {
        Self {
            kind,
            running_max_abs: 0.0,
            batches_seen: 0,
        }
    }

    /// Folds one batch into the running statistic.
    pub fn observe(&mut self, t: &Tensor) -> Result<()> {
        let v = t.as_f32()?;
        if v.is_empty() {
            return Err(QuantError::EmptyTensor);
        }
        let max_abs = || v.iter().fold(0.0f32, |m, x| m.max(x.abs())) as f64;
        let (m, momentum) = match self.kind {
            ObserverKind::MinMax => (max_abs(), None),
            ObserverKind::EmaMinMax { momentum } => (max_abs(), Some(momentum)),
            ObserverKind::Quantile { quantile } => (abs_quantile(v, quantile), None),
            ObserverKind::EmaQuantile { quantile, momentum } => (abs_quantile(v, quantile), Some(momentum)),
        };
        self.running_max_abs = match (momentum, self.batches_seen) {
            (_, 0) => m,
            (None, _) => self.running_max_abs.max(m),
            (Some(beta), _) => beta * self.running_max_abs + (1.0 - beta) * m,
        };
        self.batches_seen += 1;
        Ok(())
    }

    /// `scale = running_max_abs / 127`. A zero range yields
    /// [`QuantError::DegenerateRange`] carrying the scale-1.0 fallback.
    pub fn finalize(&self) -> Result<QuantParams> {
        if self.batches_seen == 0 {
            return Err(QuantError::NoBatches);
        }
        QuantParams::from_max_abs(self.running_max_abs)
    }
}

pub fn finalize_params(state: &ObserverState) -> Result<QuantParams> {
    state.finalize()
}

/// `clamp(round_half_even(t / scale), -127, 127)`.
pub fn quantize_tensor(t: &Tensor, p: &QuantParams) -> Result<Tensor, TensorError> {
    let q = t.as_f32()?.iter().map(|&x| p.quantize_value(x)).collect();
    Tensor::from_i8(t.shape().to_vec(), q)
}

pub fn dequantize_tensor(q: &Tensor, p: &QuantParams) -> Result<Tensor, TensorError> {
    let x = q.as_i8()?.iter().map(|&v| p.dequantize_value(v) as f32).collect();
    Tensor::from_f32(q.shape().to_vec(), x)
}

/// Finalized calibration: parameters per site plus the sites whose observed
/// range was zero (they carry the fallback scale 1.0).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Calibration {
    pub params: BTreeMap<String, QuantParams>,
    pub degenerate: Vec<String>,
}

fn weight_params(w: &Tensor) -> Result<(QuantParams, bool)> {
    let mut obs = ObserverState::new(ObserverKind::MinMax);
    obs.observe(w)?;
    match obs.finalize() {
        Ok(p) => Ok((p, false)),
        Err(QuantError::DegenerateRange { fallback }) => Ok((fallback, true)),
        Err(e) => Err(e),
    }
}

fn is_quantizable(n: &Node) -> bool {
    matches!(n.kind, OpKind::Conv | OpKind::Linear) && !n.is_quantized()
}

/// Runs fp32 inference on each sample, observing every graph input and the
/// input activation of every Conv/Linear node. Weights are observed with
/// exact min/max.
pub fn calibrate(g: &Graph, samples: &[Tensor], kind: ObserverKind) -> Result<Calibration> {
    kind.validate()?;
    if samples.is_empty() {
        return Err(QuantError::NoSamples);
    }
    let input_name = g
        .inputs
        .first()
        .ok_or_else(|| GraphError::Invalid(vec!["graph has no inputs".into()]))?
        .name
        .clone();
    // producer id -> observation sites fed by it
    let mut sites_by_producer: HashMap<String, Vec<String>> = HashMap::new();
    let mut observers: BTreeMap<String, ObserverState> = BTreeMap::new();
    for gi in &g.inputs {
        sites_by_producer.entry(gi.name.clone()).or_default().push(gi.name.clone());
        observers.insert(gi.name.clone(), ObserverState::new(kind));
    }
    for n in g.nodes.iter().filter(|n| is_quantizable(n)) {
        let site = activation_site(&n.id);
        sites_by_producer.entry(n.inputs[0].clone()).or_default().push(site.clone());
        observers.insert(site, ObserverState::new(kind));
    }
    for sample in samples {
        let inputs = BTreeMap::from([(input_name.clone(), sample.clone())]);
        let mut failure = None;
        executor::run_observed(g, &inputs, &mut |id, t| {
            if let Some(sites) = sites_by_producer.get(id) {
                for s in sites {
                    if let Err(e) = observers.get_mut(s).expect("registered").observe(t) {
                        failure.get_or_insert(e);
                    }
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    let mut cal = Calibration::default();
    for (site, obs) in observers {
        match obs.finalize() {
            Ok(p) => {
                cal.params.insert(site, p);
            }
            Err(QuantError::DegenerateRange { fallback }) => {
                log::warn!("calibration site {site} saw only zeros; using scale {}", fallback.scale);
                cal.params.insert(site.clone(), fallback);
                cal.degenerate.push(site);
            }
            Err(e) => return Err(e),
        }
    }
    for n in g.nodes.iter().filter(|n| is_quantizable(n)) {
        let w = n.weight("w").ok_or_else(|| GraphError::Invalid(vec![format!("{} has no weight", n.id)]))?;
        let (p, degenerate) = weight_params(w)?;
        let site = weight_site(&n.id);
        if degenerate {
            cal.degenerate.push(site.clone());
        }
        cal.params.insert(site, p);
    }
    Ok(cal)
}

/// Rewrites every float Conv/Linear as `Quantize -> int8 kernel`, with int8
/// weights, int32 bias at scale `s_x * s_w`, and fp32 output. All other nodes
/// are untouched. Weight scales come from exact min/max of the weights.
pub fn convert_int8(g: &Graph, act_params: &BTreeMap<String, QuantParams>) -> Result<Graph> {
    let mut out = g.clone();
    let mut nodes = Vec::with_capacity(g.nodes.len() * 2);
    for n in &g.nodes {
        if !is_quantizable(n) {
            nodes.push(n.clone());
            continue;
        }
        let site = activation_site(&n.id);
        if g.node(&site).is_some() || g.is_input(&site) {
            return Err(QuantError::IdCollision(site));
        }
        let px = *act_params.get(&site).ok_or_else(|| QuantError::MissingParams(site.clone()))?;
        let w = n.weight("w").ok_or_else(|| GraphError::Invalid(vec![format!("{} has no weight", n.id)]))?;
        let (pw, degenerate) = weight_params(w)?;
        if degenerate {
            log::warn!("weights of {} are all zero; using scale {}", n.id, pw.scale);
        }
        let mut qn = n.clone();
        qn.inputs[0] = site.clone();
        qn.weights.insert("w".into(), quantize_tensor(w, &pw)?);
        if let Some(b) = n.weight("b") {
            let bias_scale = px.scale as f64 * pw.scale as f64;
            let q: Vec<i32> = b
                .as_f32()?
                .iter()
                .map(|&v| {
                    let r = (v as f64 / bias_scale).round_ties_even();
                    if r.abs() > i32::MAX as f64 {
                        Err(QuantError::BiasOverflow { node: n.id.clone() })
                    } else {
                        Ok(r as i32)
                    }
                })
                .collect::<Result<_>>()?;
            qn.weights.insert("b".into(), Tensor::from_i32(b.shape().to_vec(), q)?);
        }
        nodes.push(Node::new(site.clone(), OpKind::Quantize, &[n.inputs[0].as_str()]));
        nodes.push(qn);
        out.quant.insert(site, px);
        out.quant.insert(weight_site(&n.id), pw);
    }
    out.nodes = nodes;
    out.validate()?;
    Ok(out)
}

/// Number of weight elements stored as int8.
pub fn int8_weight_count(g: &Graph) -> usize {
    g.nodes
        .iter()
        .flat_map(|n| n.weights.values())
        .filter(|t| t.dtype() == DType::I8)
        .map(Tensor::len)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Dim, GraphInput};
    use proptest::prelude::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::create(&[v.len()], v).unwrap()
    }

    #[test]
    fn observer_examples() {
        let mut mm = ObserverState::new(ObserverKind::MinMax);
        mm.observe(&t(&[0.5, -1.0])).unwrap();
        mm.observe(&t(&[2.0, 0.1])).unwrap();
        assert_eq!(mm.running_max_abs, 2.0);

        let mut ema = ObserverState::new(ObserverKind::EmaMinMax { momentum: 0.9 });
        ema.observe(&t(&[1.0])).unwrap();
        ema.observe(&t(&[-2.0])).unwrap();
        assert!((ema.running_max_abs - 1.1).abs() < 1e-12);

        let mut q = ObserverState::new(ObserverKind::Quantile { quantile: 0.5 });
        q.observe(&t(&[3.0, -1.0, 0.0, 2.0])).unwrap();
        assert_eq!(q.running_max_abs, 1.5);

        let mut e = ObserverState::new(ObserverKind::MinMax);
        let empty = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        e.observe(&empty).unwrap();
        assert!(matches!(e.finalize(), Err(QuantError::DegenerateRange { .. })));
        assert!(matches!(
            ObserverState::new(ObserverKind::MinMax).finalize(),
            Err(QuantError::NoBatches)
        ));
    }

    #[test]
    fn observer_kind_validation() {
        assert!(ObserverKind::Quantile { quantile: 0.0 }.validate().is_err());
        assert!(ObserverKind::Quantile { quantile: 1.0 }.validate().is_ok());
        assert!(ObserverKind::EmaMinMax { momentum: 1.0 }.validate().is_err());
        assert!(ObserverKind::default().validate().is_ok());
    }

    #[test]
    fn quantile_brute_force() {
        // oracle: full sort then interpolate
        let v: Vec<f32> = (0..37).map(|i| ((i * 17 % 23) as f32 - 11.0) * 0.3).collect();
        let mut sorted: Vec<f64> = v.iter().map(|x| x.abs() as f64).collect();
        sorted.sort_by(f64::total_cmp);
        for q in [0.01, 0.25, 0.5, 0.9, 0.9999, 1.0] {
            let pos: f64 = q * 36.0;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(36);
            let want = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
            assert!((abs_quantile(&v, q) - want).abs() < 1e-9, "q={q}");
        }
    }

    #[test]
    fn finalize_examples() {
        let st = |r: f64| ObserverState {
            kind: ObserverKind::MinMax,
            running_max_abs: r,
            batches_seen: 1,
        };
        assert_eq!(finalize_params(&st(2.54)).unwrap().scale, 0.02);
        assert_eq!(finalize_params(&st(127.0)).unwrap().scale, 1.0);
        match finalize_params(&st(0.0)) {
            Err(QuantError::DegenerateRange { fallback }) => assert_eq!(fallback.scale, 1.0),
            other => panic!("{other:?}"),
        }
        let p = finalize_params(&st(3.0)).unwrap();
        assert_eq!((p.zero_point, p.bits), (0, 8));
    }

    #[test]
    fn quantize_examples() {
        let p = QuantParams::new(0.02).unwrap();
        assert_eq!(quantize_tensor(&t(&[1.0]), &p).unwrap().as_i8().unwrap(), &[50]);
        assert_eq!(quantize_tensor(&t(&[-300.0 * 0.02]), &p).unwrap().as_i8().unwrap(), &[-127]);
        assert_eq!(quantize_tensor(&t(&[0.0]), &p).unwrap().as_i8().unwrap(), &[0]);
        let q = Tensor::create(&[2], &[50i8, 0]).unwrap();
        let d = dequantize_tensor(&q, &p).unwrap();
        assert!((d.as_f32().unwrap()[0] - 1.0).abs() < 1e-6);
        assert_eq!(d.as_f32().unwrap()[1], 0.0);
    }

    proptest! {
        #[test]
        fn round_trip_error_bound(scale in 1e-4f32..10.0, frac in -1.0f64..1.0) {
            let p = QuantParams::new(scale).unwrap();
            let x = (frac * 127.0 * scale as f64) as f32;
            let q = p.quantize_value(x);
            prop_assert!((x as f64 - p.dequantize_value(q)).abs() <= scale as f64 / 2.0);
        }

        #[test]
        fn quantize_is_monotone(scale in 1e-3f32..5.0, a in -1000.0f32..1000.0, b in -1000.0f32..1000.0) {
            let p = QuantParams::new(scale).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.quantize_value(lo) <= p.quantize_value(hi));
        }

        #[test]
        fn minmax_is_order_insensitive(mut batches in prop::collection::vec(prop::collection::vec(-50.0f32..50.0, 1..20), 1..6)) {
            let run = |bs: &[Vec<f32>]| {
                let mut o = ObserverState::new(ObserverKind::MinMax);
                for b in bs {
                    o.observe(&t(b)).unwrap();
                }
                o.running_max_abs
            };
            let forward = run(&batches);
            batches.reverse();
            prop_assert_eq!(forward, run(&batches));
        }
    }

    fn identity_graph() -> Graph {
        Graph::new(
            vec![GraphInput::new("x", vec![Dim::batch(), Dim::Fixed(3)])],
            vec![],
            vec!["x"],
        )
    }

    #[test]
    fn calibrate_identity_and_constant_samples() {
        let g = identity_graph();
        let s = Tensor::create(&[1, 3], &[0.1f32, -2.54, 1.0]).unwrap();
        let cal = calibrate(&g, std::slice::from_ref(&s), ObserverKind::MinMax).unwrap();
        assert_eq!(cal.params["x"].scale, 0.02);

        let kinds = [
            ObserverKind::EmaMinMax { momentum: 0.9 },
            ObserverKind::EmaQuantile {
                quantile: 0.9,
                momentum: 0.9,
            },
        ];
        for kind in kinds {
            let one = calibrate(&g, std::slice::from_ref(&s), kind).unwrap();
            let five = calibrate(&g, &vec![s.clone(); 5], kind).unwrap();
            assert_eq!(one, five);
        }

        let zero = Tensor::zeros(&[1, 3], DType::F32).unwrap();
        let cal = calibrate(&g, &[zero.clone(), zero], ObserverKind::default()).unwrap();
        assert_eq!(cal.degenerate, vec!["x".to_string()]);
        assert_eq!(cal.params["x"].scale, 1.0);
    }

    fn conv1x1(w: f32, b: Option<f32>) -> Graph {
        Graph::new(
            vec![GraphInput::new("x", vec![Dim::batch(), Dim::Fixed(1), Dim::Fixed(4)])],
            vec![
                Node::conv(
                    "c",
                    "x",
                    Tensor::from_f32(vec![1, 1, 1], vec![w]).unwrap(),
                    b.map(|b| Tensor::from_f32(vec![1], vec![b]).unwrap()),
                    1,
                    0,
                ),
                Node::new("r", OpKind::ReLU, &["c"]),
            ],
            vec!["r"],
        )
    }

    #[test]
    fn convert_single_conv() {
        let g = conv1x1(2.0, Some(0.5));
        let x = Tensor::create(&[1, 1, 4], &[0.5f32, -1.0, 1.27, 0.0]).unwrap();
        let cal = calibrate(&g, std::slice::from_ref(&x), ObserverKind::MinMax).unwrap();
        let q = convert_int8(&g, &cal.params).unwrap();
        let c = q.node("c").unwrap();
        assert_eq!(c.weight("w").unwrap().as_i8().unwrap(), &[127]);
        assert_eq!(q.quant[&weight_site("c")].scale, 2.0 / 127.0);
        assert_eq!(c.inputs, vec!["c.x"]);
        assert_eq!(q.node("c.x").unwrap().kind, OpKind::Quantize);
        // bias stored at s_x * s_w
        let sx = q.quant["c.x"].scale as f64;
        let sw = q.quant["c.w"].scale as f64;
        assert_eq!(c.weight("b").unwrap().as_i32().unwrap(), &[(0.5 / (sx * sw)).round_ties_even() as i32]);

        let y_fp = executor::run_single(&g, &x).unwrap();
        let y_q = executor::run_single(&q, &x).unwrap();
        for (a, b) in y_fp.as_f32().unwrap().iter().zip(y_q.as_f32().unwrap()) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn convert_without_quantizable_nodes_is_identity() {
        let g = Graph::new(
            vec![GraphInput::new("x", vec![Dim::batch(), Dim::Fixed(2)])],
            vec![Node::new("r", OpKind::ReLU, &["x"])],
            vec!["r"],
        );
        assert_eq!(convert_int8(&g, &BTreeMap::new()).unwrap(), g);
    }

    #[test]
    fn convert_requires_params() {
        let g = conv1x1(1.0, None);
        assert!(matches!(
            convert_int8(&g, &BTreeMap::new()),
            Err(QuantError::MissingParams(site)) if site == "c.x"
        ));
    }
}
