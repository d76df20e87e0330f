//! Task metrics: Pearson correlation, Dice overlap, connected components and
//! AP50 instance matching.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Pearson,
    Dice,
    Ap50,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Pearson => "pearson",
            MetricKind::Dice => "dice",
            MetricKind::Ap50 => "ap50",
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_f32_vec().into_iter().map(f64::from).collect()
}

/// Sample Pearson correlation over all elements.
pub fn pearson(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (x, y) = (values(a), values(b));
    if x.len() < 2 {
        return Err(MetricError::DegenerateInput("need at least two elements".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&u, &v) in x.iter().zip(&y) {
        let (du, dv) = (u - mx, v - my);
        sxy += du * dv;
        sxx += du * du;
        syy += dv * dv;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::DegenerateInput("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `2|A∩B| / (|A|+|B|)` with `A = pred > threshold` and `B = gt > 0.5`;
/// 1.0 when both are empty.
pub fn dice(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    let (p, g) = (values(pred), values(gt));
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&u, &v) in p.iter().zip(&g) {
        let (a, b) = (u > threshold, v > 0.5);
        na += a as usize;
        nb += b as usize;
        inter += (a && b) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Spatial axes of a label/mask tensor: trailing 2 or 3 axes after dropping
/// leading unit extents.
fn spatial_shape(shape: &[usize]) -> Result<Vec<usize>> {
    let mut s: Vec<usize> = shape.to_vec();
    while s.len() > 3 && s[0] == 1 {
        s.remove(0);
    }
    if !(2..=3).contains(&s.len()) {
        return Err(MetricError::DegenerateInput(format!("need 2-D or 3-D spatial data, got {shape:?}")));
    }
    Ok(s)
}

/// Labels foreground (`> 0.5`) regions with 4-connectivity in 2-D and
/// 6-connectivity in 3-D. Labels follow first-encounter scan order from 1.
pub fn connected_components(mask: &Tensor) -> Result<Tensor> {
    let sp = spatial_shape(mask.shape())?;
    let fg: Vec<bool> = values(mask).into_iter().map(|v| v > 0.5).collect();
    let strides: Vec<usize> = (0..sp.len()).map(|a| sp[a + 1..].iter().product()).collect();
    let mut labels = vec![0i32; fg.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for (ax, &st) in strides.iter().enumerate() {
                let coord = (i / st) % sp[ax];
                let mut visit = |j: usize| {
                    if fg[j] && labels[j] == 0 {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                };
                if coord > 0 {
                    visit(i - st);
                }
                if coord + 1 < sp[ax] {
                    visit(i + st);
                }
            }
        }
    }
    Ok(Tensor::from_i32(mask.shape().to_vec(), labels)?)
}

fn label_values(t: &Tensor) -> Vec<i64> {
    match t.as_i32() {
        Ok(v) => v.iter().map(|&x| x as i64).collect(),
        Err(_) => t.to_f32_vec().into_iter().map(|x| x.round() as i64).collect(),
    }
}

/// Instance score `TP / (TP + FP + FN)` with greedy matching in descending IoU
/// order at IoU >= 0.5. Both maps empty gives 1.0.
pub fn ap50(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt)?;
    let (p, g) = (label_values(pred), label_values(gt));
    let mut area_p: BTreeMap<i64, usize> = BTreeMap::new();
    let mut area_g: BTreeMap<i64, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    // first pixel of each instance in scan order; a label-independent tie-break
    let mut first_p: BTreeMap<i64, usize> = BTreeMap::new();
    let mut first_g: BTreeMap<i64, usize> = BTreeMap::new();
    for (i, (&a, &b)) in p.iter().zip(&g).enumerate() {
        first_p.entry(a).or_insert(i);
        first_g.entry(b).or_insert(i);
        if a > 0 {
            *area_p.entry(a).or_default() += 1;
        }
        if b > 0 {
            *area_g.entry(b).or_default() += 1;
        }
        if a > 0 && b > 0 {
            *inter.entry((a, b)).or_default() += 1;
        }
    }
    if area_p.is_empty() && area_g.is_empty() {
        return Ok(1.0);
    }
    let mut pairs: Vec<(f64, i64, i64)> = inter
        .iter()
        .map(|(&(a, b), &i)| (i as f64 / (area_p[&a] + area_g[&b] - i) as f64, a, b))
        .filter(|&(iou, _, _)| iou >= 0.5)
        .collect();
    pairs.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then(first_p[&x.1].cmp(&first_p[&y.1]))
            .then(first_g[&x.2].cmp(&first_g[&y.2]))
    });
    let mut used_p = std::collections::HashSet::new();
    let mut used_g = std::collections::HashSet::new();
    let mut tp = 0usize;
    for (_, a, b) in pairs {
        if !used_p.contains(&a) && !used_g.contains(&b) {
            used_p.insert(a);
            used_g.insert(b);
            tp += 1;
        }
    }
    let fp = area_p.len() - tp;
    let fn_ = area_g.len() - tp;
    Ok(tp as f64 / (tp + fp + fn_) as f64)
}
