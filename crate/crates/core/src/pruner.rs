//! Structured filter pruning: per-filter importance, sparsity selection,
//! channel-dependency grouping and the structural rewrite that physically
//! removes filters and the matching consumer input channels.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Dim, Graph, GraphError, Node, OpKind};
use crate::tensor::{DType, Tensor, TensorError};
use crate::trainer::{self, LossKind, SgdConfig, TrainError};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("plan violates dependency groups: {0}")]
    PlanViolatesGroups(String),
    #[error("plan would remove every filter of {0}")]
    WouldEmptyLayer(String),
    #[error("malformed plan: {0}")]
    InvalidPlan(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot prune: {0}")]
    Unsupported(String),
    #[error("sparsity {0} outside [0, 1)")]
    BadRatio(f64),
    #[error("evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = PruneError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    L1,
    L2,
    #[serde(rename = "FPGM")]
    Fpgm,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::L1, Criterion::L2, Criterion::Fpgm];
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::L1 => "L1",
            Criterion::L2 => "L2",
            Criterion::Fpgm => "FPGM",
        })
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown criterion {s}"))
    }
}

/// Per-filter score; lower means pruned first.
pub fn importance(w: &Tensor, c: Criterion) -> Result<Vec<f64>> {
    if w.rank() < 2 || w.shape()[0] == 0 {
        return Err(PruneError::ShapeMismatch(format!("filter weights need [out, in, ...], got {:?}", w.shape())));
    }
    let n = w.shape()[0];
    let per = w.len() / n;
    let data = w.as_f32()?;
    let filters: Vec<&[f32]> = data.chunks(per).collect();
    Ok(match c {
        Criterion::L1 => filters.iter().map(|f| f.iter().map(|&v| (v as f64).abs()).sum()).collect(),
        Criterion::L2 => filters
            .iter()
            .map(|f| f.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .collect(),
        Criterion::Fpgm => {
            let dist = |a: &[f32], b: &[f32]| {
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            (0..n)
                .map(|i| (0..n).filter(|&j| j != i).map(|j| dist(filters[i], filters[j])).sum())
                .collect()
        }
    })
}

/// Keeps all but the `floor(sparsity * n)` lowest-scoring filters (at least
/// one survives). Equal scores prune the lower index first.
pub fn select_filters(scores: &[f64], sparsity: f64) -> Vec<usize> {
    let n = scores.len();
    let n_prune = ((sparsity * n as f64).floor().max(0.0) as usize).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept = order[n_prune..].to_vec();
    kept.sort_unstable();
    kept
}

/// Convs whose output filters must be pruned with identical index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DependencyGroup {
    pub members: Vec<String>,
    /// Add nodes that tie the members together.
    pub couplers: Vec<String>,
    /// False when some member's channels reach a graph output, a Linear layer
    /// or a misaligned Add; such groups are kept whole.
    pub prunable: bool,
}

/// A run of channels inside a tensor, produced by one conv (or by something
/// that cannot be pruned when `source` is `None`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSegment {
    pub source: Option<String>,
    pub offset: usize,
    pub len: usize,
}

type Layout = Vec<(Option<String>, usize)>;

struct Analysis {
    layouts: HashMap<String, Layout>,
    groups: Vec<DependencyGroup>,
    out_ch: BTreeMap<String, usize>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn analyze(g: &Graph) -> Result<Analysis> {
    g.validate()?;
    let convs: Vec<&Node> = g.nodes.iter().filter(|n| n.kind == OpKind::Conv).collect();
    if let Some(n) = convs.iter().find(|n| n.is_quantized()) {
        return Err(PruneError::Unsupported(format!("{} is already quantized", n.id)));
    }
    let index: HashMap<&str, usize> = convs.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut uf = UnionFind {
        parent: (0..convs.len()).collect(),
    };
    let mut fixed = vec![false; convs.len()];
    let mut couplers: Vec<(usize, String)> = Vec::new();
    let mut layouts: HashMap<String, Layout> = HashMap::new();
    let fix_all = |layout: &Layout, fixed: &mut Vec<bool>| {
        for (src, _) in layout {
            if let Some(s) = src {
                fixed[index[s.as_str()]] = true;
            }
        }
    };

    for gi in &g.inputs {
        let c = match gi.shape.get(1) {
            Some(Dim::Fixed(c)) => *c,
            _ if gi.shape.len() < 2 => 0,
            _ => return Err(PruneError::Unsupported(format!("input {} needs a fixed channel extent", gi.name))),
        };
        layouts.insert(gi.name.clone(), vec![(None, c)]);
    }
    for id in g.topo_order()? {
        let node = g.node(&id).expect("topo ids exist");
        let ins: Vec<&Layout> = node.inputs.iter().map(|i| &layouts[i]).collect();
        let layout = match node.kind {
            OpKind::Conv => vec![(Some(id.clone()), node.weight("w").expect("validated").shape()[0])],
            OpKind::Linear => {
                fix_all(ins[0], &mut fixed);
                vec![(None, node.weight("w").expect("validated").shape()[0])]
            }
            OpKind::Concat => ins.iter().flat_map(|l| l.iter().cloned()).collect(),
            OpKind::Add => {
                let (a, b) = (ins[0], ins[1]);
                let aligned = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.1 == y.1);
                if aligned {
                    for ((sa, _), (sb, _)) in a.iter().zip(b) {
                        match (sa, sb) {
                            (Some(x), Some(y)) => {
                                uf.union(index[x.as_str()], index[y.as_str()]);
                                couplers.push((index[x.as_str()], id.clone()));
                            }
                            (Some(x), None) | (None, Some(x)) => fixed[index[x.as_str()]] = true,
                            (None, None) => {}
                        }
                    }
                } else {
                    fix_all(a, &mut fixed);
                    fix_all(b, &mut fixed);
                }
                a.clone()
            }
            kind if kind.is_channelwise() => ins[0].clone(),
            kind => return Err(PruneError::Unsupported(format!("{kind} in channel analysis"))),
        };
        layouts.insert(id, layout);
    }
    for out in &g.outputs {
        fix_all(&layouts[out], &mut fixed);
    }

    let mut groups: Vec<DependencyGroup> = Vec::new();
    let mut root_group: HashMap<usize, usize> = HashMap::new();
    for (i, n) in convs.iter().enumerate() {
        let r = uf.find(i);
        let gi = *root_group.entry(r).or_insert_with(|| {
            groups.push(DependencyGroup {
                members: Vec::new(),
                couplers: Vec::new(),
                prunable: true,
            });
            groups.len() - 1
        });
        groups[gi].members.push(n.id.clone());
        groups[gi].prunable &= !fixed[i];
    }
    // a fixed member pins its whole group
    for (i, _) in convs.iter().enumerate() {
        if fixed[i] {
            let r = uf.find(i);
            groups[root_group[&r]].prunable = false;
        }
    }
    for (member, add_id) in couplers {
        let gi = root_group[&uf.find(member)];
        if !groups[gi].couplers.contains(&add_id) {
            groups[gi].couplers.push(add_id);
        }
    }
    let out_ch = convs
        .iter()
        .map(|n| (n.id.clone(), n.weight("w").expect("validated").shape()[0]))
        .collect();
    Ok(Analysis {
        layouts,
        groups,
        out_ch,
    })
}

/// Partitions the graph's convs into dependency groups, in declaration order.
pub fn build_groups(g: &Graph) -> Result<Vec<DependencyGroup>> {
    Ok(analyze(g)?.groups)
}

/// Channel segments of the tensor consumed by `node_id` (its first input);
/// for a conv after a Concat this is the input-channel remap table.
pub fn input_segments(g: &Graph, node_id: &str) -> Result<Vec<ChannelSegment>> {
    let a = analyze(g)?;
    let node = g
        .node(node_id)
        .ok_or_else(|| PruneError::InvalidPlan(format!("unknown node {node_id}")))?;
    let mut offset = 0;
    Ok(a.layouts[&node.inputs[0]]
        .iter()
        .map(|(source, len)| {
            let seg = ChannelSegment {
                source: source.clone(),
                offset,
                len: *len,
            };
            offset += len;
            seg
        })
        .collect())
}

/// Kept output filters per conv. Convs absent from `keep` are kept whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub keep: BTreeMap<String, Vec<usize>>,
    pub sparsity: f64,
}

/// Scores every prunable group (member scores summed per filter index) and
/// keeps the same filters across the group.
pub fn plan_prune(g: &Graph, criterion: Criterion, sparsity: f64) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(PruneError::BadRatio(sparsity));
    }
    let a = analyze(g)?;
    let mut keep = BTreeMap::new();
    for group in &a.groups {
        let n = a.out_ch[&group.members[0]];
        let kept = if group.prunable {
            let mut total = vec![0.0; n];
            for m in &group.members {
                let scores = importance(g.node(m).expect("member").weight("w").expect("validated"), criterion)?;
                total.iter_mut().zip(&scores).for_each(|(t, s)| *t += s);
            }
            select_filters(&total, sparsity)
        } else {
            (0..n).collect()
        };
        for m in &group.members {
            keep.insert(m.clone(), kept.clone());
        }
    }
    Ok(PrunePlan { keep, sparsity })
}

/// Resolves the plan to an explicit keep list for every conv, checking it
/// against the dependency groups.
fn resolve(a: &Analysis, plan: &PrunePlan) -> Result<BTreeMap<String, Vec<usize>>> {
    if let Some(id) = plan.keep.keys().find(|id| !a.out_ch.contains_key(*id)) {
        return Err(PruneError::InvalidPlan(format!("{id} is not a conv of this graph")));
    }
    let mut keep = BTreeMap::new();
    for (id, &n) in &a.out_ch {
        let k = plan.keep.get(id).cloned().unwrap_or_else(|| (0..n).collect());
        if k.is_empty() {
            return Err(PruneError::WouldEmptyLayer(id.clone()));
        }
        if k.windows(2).any(|p| p[0] >= p[1]) || k.last().is_some_and(|&l| l >= n) {
            return Err(PruneError::InvalidPlan(format!("keep list of {id} must be increasing and below {n}")));
        }
        keep.insert(id.clone(), k);
    }
    for group in &a.groups {
        let first = &keep[&group.members[0]];
        if let Some(m) = group.members.iter().find(|m| &keep[*m] != first) {
            return Err(PruneError::PlanViolatesGroups(format!(
                "{m} and {} share a group but keep different filters",
                group.members[0]
            )));
        }
        if !group.prunable && first.len() != a.out_ch[&group.members[0]] {
            return Err(PruneError::PlanViolatesGroups(format!(
                "group of {} feeds an output or unprunable consumer",
                group.members[0]
            )));
        }
    }
    Ok(keep)
}

fn kept_channels(layout: &Layout, keep: &BTreeMap<String, Vec<usize>>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (src, len) in layout {
        match src {
            Some(s) => out.extend(keep[s].iter().map(|&k| offset + k)),
            None => out.extend(offset..offset + len),
        }
        offset += len;
    }
    out
}

fn kept_count(layout: &Layout, keep: &BTreeMap<String, Vec<usize>>) -> usize {
    layout
        .iter()
        .map(|(src, len)| src.as_ref().map_or(*len, |s| keep[s].len()))
        .sum()
}

/// Selects `idx` along `axis` of an fp32 tensor.
pub fn select_axis(t: &Tensor, axis: usize, idx: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    if axis >= shape.len() || idx.iter().any(|&i| i >= shape[axis]) {
        return Err(PruneError::ShapeMismatch(format!("select {idx:?} on axis {axis} of {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let data = t.as_f32()?;
    let mut out = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        for &i in idx {
            let start = (o * shape[axis] + i) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = idx.len();
    Ok(Tensor::from_f32(new_shape, out)?)
}

const BN_WEIGHTS: [&str; 4] = ["gamma", "beta", "mean", "var"];

/// Physically removes pruned filters and the matching consumer input channels.
pub fn apply_prune(g: &Graph, plan: &PrunePlan) -> Result<Graph> {
    let a = analyze(g)?;
    let keep = resolve(&a, plan)?;
    if keep.iter().all(|(id, k)| k.len() == a.out_ch[id]) {
        return Ok(g.clone());
    }
    let mut out = g.clone();
    for node in &mut out.nodes {
        match node.kind {
            OpKind::Conv => {
                let own = &keep[&node.id];
                let cin = kept_channels(&a.layouts[&node.inputs[0]], &keep);
                let w = node.weight("w").expect("validated");
                let mut nw = w.clone();
                if own.len() != w.shape()[0] {
                    nw = select_axis(&nw, 0, own)?;
                }
                if cin.len() != w.shape()[1] {
                    nw = select_axis(&nw, 1, &cin)?;
                }
                node.weights.insert("w".into(), nw);
                if let Some(b) = node.weight("b") {
                    if own.len() != b.len() {
                        let nb = select_axis(b, 0, own)?;
                        node.weights.insert("b".into(), nb);
                    }
                }
            }
            OpKind::BatchNorm => {
                let cin = kept_channels(&a.layouts[&node.inputs[0]], &keep);
                for name in BN_WEIGHTS {
                    let t = node.weight(name).expect("validated");
                    if t.len() != cin.len() {
                        let nt = select_axis(t, 0, &cin)?;
                        node.weights.insert(name.into(), nt);
                    }
                }
            }
            _ => {}
        }
    }
    out.validate()?;
    Ok(out)
}

/// Oracle for [`apply_prune`]: same graph with pruned filters (weights and
/// bias) set to zero. Equivalent to the rewrite when no BatchNorm or Sigmoid
/// sits between a pruned conv and its consumers.
pub fn mask_filters(g: &Graph, plan: &PrunePlan) -> Result<Graph> {
    let a = analyze(g)?;
    let keep = resolve(&a, plan)?;
    let mut out = g.clone();
    for (id, k) in &keep {
        let kept: HashSet<usize> = k.iter().copied().collect();
        let node = out.node_mut(id).expect("conv exists");
        for name in ["w", "b"] {
            if let Some(t) = node.weights.get_mut(name) {
                let n = t.shape()[0];
                let per = t.len() / n;
                let data = t.as_f32_mut()?;
                for f in (0..n).filter(|f| !kept.contains(f)) {
                    data[f * per..(f + 1) * per].fill(0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Parameter count of `apply_prune(g, plan)`, computed from channel counts.
pub fn predict_params(g: &Graph, plan: &PrunePlan) -> Result<usize> {
    let a = analyze(g)?;
    let keep = resolve(&a, plan)?;
    let mut total = 0;
    for node in &g.nodes {
        total += match node.kind {
            OpKind::Conv => {
                let w = node.weight("w").expect("validated");
                let k: usize = w.shape()[2..].iter().product();
                let cout = keep[&node.id].len();
                let cin = kept_count(&a.layouts[&node.inputs[0]], &keep);
                cout * cin * k + node.weight("b").map_or(0, |_| cout)
            }
            OpKind::BatchNorm => {
                let cin = kept_count(&a.layouts[&node.inputs[0]], &keep);
                BN_WEIGHTS.len() * cin
            }
            _ => node.param_count(),
        };
    }
    Ok(total)
}

/// Floating-point operations of one forward pass (2 per multiply-accumulate,
/// Conv and Linear only).
pub fn flops(g: &Graph, input_shape: &[usize]) -> Result<u64> {
    let shapes = g.infer_shapes_single(input_shape)?;
    let mut macs = 0u64;
    for node in &g.nodes {
        let per_output = match node.kind {
            OpKind::Conv | OpKind::Linear => {
                let w = node.weight("w").expect("validated");
                (w.len() / w.shape()[0]) as u64
            }
            _ => continue,
        };
        let outputs: usize = shapes[&node.id].iter().product();
        macs += outputs as u64 * per_output;
    }
    Ok(2 * macs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub criterion: Criterion,
    pub ratio: f64,
    pub accuracy: f64,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub baseline_accuracy: f64,
    pub baseline_params: usize,
    pub baseline_flops: u64,
    pub rows: Vec<SweepRow>,
}

/// Optional fine-tuning applied to every pruned graph in a sweep.
#[derive(Debug, Clone)]
pub struct FinetuneSpec<'a> {
    pub data: &'a [(Tensor, Tensor)],
    pub loss: LossKind,
    pub cfg: SgdConfig,
}

/// Prunes (and optionally fine-tunes) `g` for every (criterion, ratio) cell
/// and evaluates it. Rows are ordered criterion-major.
pub fn sweep<F>(
    g: &Graph,
    evaluate: F,
    criteria: &[Criterion],
    ratios: &[f64],
    finetune: Option<&FinetuneSpec>,
    input_shape: &[usize],
) -> Result<SweepResult>
where
    F: Fn(&Graph) -> Result<f64> + Sync,
{
    if let Some(&r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(PruneError::BadRatio(r));
    }
    let cells: Vec<(Criterion, f64)> = criteria
        .iter()
        .flat_map(|&c| ratios.iter().map(move |&r| (c, r)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(criterion, ratio)| {
            let plan = plan_prune(g, criterion, ratio)?;
            let mut pruned = apply_prune(g, &plan)?;
            if let Some(ft) = finetune {
                pruned = trainer::finetune(&pruned, ft.data, ft.loss, &ft.cfg)?.graph;
            }
            Ok(SweepRow {
                criterion,
                ratio,
                accuracy: evaluate(&pruned)?,
                params: pruned.param_count(),
                flops: flops(&pruned, input_shape)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        baseline_accuracy: evaluate(g)?,
        baseline_params: g.param_count(),
        baseline_flops: flops(g, input_shape)?,
        rows,
    })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("criterion,ratio,accuracy,params,flops\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.criterion, r.ratio, r.accuracy, r.params, r.flops));
        }
        s
    }

    /// Row with the smallest accuracy drop among those removing at least
    /// `min_reduction` of the baseline parameters; earlier rows win ties.
    pub fn recommend(&self, min_reduction: f64) -> Option<&SweepRow> {
        let base = self.baseline_params.max(1) as f64;
        let mut best: Option<&SweepRow> = None;
        for r in &self.rows {
            if 1.0 - r.params as f64 / base + 1e-12 < min_reduction {
                continue;
            }
            if best.is_none_or(|b| r.accuracy > b.accuracy) {
                best = Some(r);
            }
        }
        best
    }
}

/// True when every weight tensor is fp32, i.e. the graph can be pruned.
pub fn is_prunable(g: &Graph) -> bool {
    g.nodes.iter().flat_map(|n| n.weights.values()).all(|t| t.dtype() == DType::F32)
}
