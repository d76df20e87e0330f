//! Small reference models: a configurable U-Net, an identity model and a
//! random generator of prunable graphs used by the property suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Attr, Dim, Graph, GraphInput, Node, OpKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    /// Spatial rank, 2 or 3.
    pub dims: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels at the top level; level `l` has `base * 2^l`.
    pub base: usize,
    /// Number of resolution levels; `levels - 1` pooling steps.
    pub levels: usize,
    pub batchnorm: bool,
    pub final_sigmoid: bool,
    pub seed: u64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            dims: 3,
            in_channels: 1,
            out_channels: 1,
            base: 8,
            levels: 2,
            batchnorm: false,
            final_sigmoid: false,
            seed: 0,
        }
    }
}

fn spatial_dims(d: usize) -> Vec<Dim> {
    ["D", "H", "W"][3 - d..].iter().map(|s| Dim::Symbolic(s.to_string())).collect()
}

fn input(dims: usize, channels: usize) -> GraphInput {
    let mut shape = vec![Dim::batch(), Dim::Fixed(channels)];
    shape.extend(spatial_dims(dims));
    GraphInput::new("x", shape)
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(rng) as f32).collect();
    Tensor::from_f32(shape.to_vec(), data).expect("shape matches data")
}

fn conv(rng: &mut ChaCha8Rng, id: &str, input: &str, cin: usize, cout: usize, k: usize, d: usize) -> Node {
    let mut wshape = vec![cout, cin];
    wshape.extend(std::iter::repeat_n(k, d));
    let w = kaiming(rng, &wshape);
    let b = Tensor::zeros(&[cout], crate::tensor::DType::F32).expect("valid shape");
    Node::conv(id, input, w, Some(b), 1, k / 2)
}

fn batchnorm(rng: &mut ChaCha8Rng, id: &str, input: &str, c: usize) -> Node {
    let mut draw = |lo: f32, hi: f32| {
        let v = (0..c).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_f32(vec![c], v).expect("shape matches data")
    };
    let (gamma, beta, mean, var) = (draw(0.8, 1.2), draw(-0.1, 0.1), draw(-0.1, 0.1), draw(0.8, 1.2));
    Node::new(id, OpKind::BatchNorm, &[input])
        .with_weight("gamma", gamma)
        .with_weight("beta", beta)
        .with_weight("mean", mean)
        .with_weight("var", var)
        .with_attr("eps", Attr::Float(1e-5))
}

/// U-Net with one 3x3 conv + ReLU per level, max-pool down, nearest
/// upsample up and Concat skips, then a 1x1 head.
pub fn unet(cfg: &UnetConfig) -> Graph {
    assert!(matches!(cfg.dims, 2 | 3), "dims must be 2 or 3");
    assert!(cfg.levels >= 1 && cfg.base >= 1);
    let d = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nodes = Vec::new();
    let ch = |l: usize| cfg.base << l;
    let block = |nodes: &mut Vec<Node>, rng: &mut ChaCha8Rng, name: &str, input: &str, cin: usize, cout: usize| {
        nodes.push(conv(rng, name, input, cin, cout, 3, d));
        let mut last = name.to_string();
        if cfg.batchnorm {
            let bn = format!("{name}_bn");
            nodes.push(batchnorm(rng, &bn, &last, cout));
            last = bn;
        }
        let relu = format!("{name}_relu");
        nodes.push(Node::new(&relu, OpKind::ReLU, &[&last]));
        relu
    };

    let mut skips = Vec::new();
    let mut last = block(&mut nodes, &mut rng, "enc0", "x", cfg.in_channels, ch(0));
    skips.push(last.clone());
    for l in 1..cfg.levels {
        let pool = format!("pool{l}");
        nodes.push(Node::new(&pool, OpKind::MaxPool, &[&last]).with_attr("window", Attr::Ints(vec![2])));
        last = block(&mut nodes, &mut rng, &format!("enc{l}"), &pool, ch(l - 1), ch(l));
        skips.push(last.clone());
    }
    for l in (0..cfg.levels - 1).rev() {
        let up = format!("up{l}");
        nodes.push(Node::new(&up, OpKind::UpsampleNearest, &[&last]).with_attr("factor", Attr::Ints(vec![2])));
        let cat = format!("cat{l}");
        nodes.push(Node::new(&cat, OpKind::Concat, &[&skips[l], &up]).with_attr("axis", Attr::Ints(vec![1])));
        last = block(&mut nodes, &mut rng, &format!("dec{l}"), &cat, ch(l) + ch(l + 1), ch(l));
    }
    nodes.push(conv(&mut rng, "head", &last, ch(0), cfg.out_channels, 1, d));
    last = "head".into();
    if cfg.final_sigmoid {
        nodes.push(Node::new("prob", OpKind::Sigmoid, &["head"]));
        last = "prob".into();
    }
    Graph::new(vec![input(d, cfg.in_channels)], nodes, vec![&last])
}

/// A single 1x1 conv with identity weights and zero bias.
pub fn identity(dims: usize, channels: usize) -> Graph {
    let mut wshape = vec![channels, channels];
    wshape.extend(std::iter::repeat_n(1, dims));
    let w: Vec<f32> = (0..channels * channels)
        .map(|i| if i / channels == i % channels { 1.0 } else { 0.0 })
        .collect();
    let w = Tensor::from_f32(wshape, w).expect("shape matches data");
    Graph::new(vec![input(dims, channels)], vec![Node::conv("id", "x", w, None, 1, 0)], vec!["id"])
}

/// Random conv graph built from plain, residual (Add) and U-shaped (Concat)
/// blocks, without BatchNorm. Spatial extents must be divisible by 2.
pub fn random_graph(seed: u64, dims: usize, in_channels: usize) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::new();
    let mut last = "x".to_string();
    let mut c = in_channels;
    let blocks = rng.random_range(1..=4);
    let small_conv = |rng: &mut ChaCha8Rng, id: &str, input: &str, cin: usize, cout: usize| {
        let k = if rng.random_bool(0.7) { 3 } else { 1 };
        let mut node = conv(rng, id, input, cin, cout, k, dims);
        let b = (0..cout).map(|_| rng.random_range(-0.2f32..0.2)).collect();
        node.weights.insert("b".into(), Tensor::from_f32(vec![cout], b).expect("shape matches data"));
        node
    };
    let act = |rng: &mut ChaCha8Rng, id: &str, input: &str| {
        if rng.random_bool(0.5) {
            Node::new(id, OpKind::ReLU, &[input])
        } else {
            Node::new(id, OpKind::LeakyReLU, &[input]).with_attr("slope", Attr::Float(0.1))
        }
    };
    for b in 0..blocks {
        let cout = rng.random_range(2..=6);
        match rng.random_range(0..3) {
            0 => {
                nodes.push(small_conv(&mut rng, &format!("b{b}c"), &last, c, cout));
                nodes.push(act(&mut rng, &format!("b{b}a"), &format!("b{b}c")));
                last = format!("b{b}a");
                c = cout;
            }
            1 => {
                // residual: two convs feeding an Add with the projected input
                nodes.push(small_conv(&mut rng, &format!("b{b}p"), &last, c, cout));
                nodes.push(small_conv(&mut rng, &format!("b{b}c1"), &format!("b{b}p"), cout, cout));
                nodes.push(act(&mut rng, &format!("b{b}a"), &format!("b{b}c1")));
                nodes.push(small_conv(&mut rng, &format!("b{b}c2"), &format!("b{b}a"), cout, cout));
                nodes.push(Node::new(format!("b{b}add"), OpKind::Add, &[&format!("b{b}p"), &format!("b{b}c2")]));
                last = format!("b{b}add");
                c = cout;
            }
            _ => {
                let inner = rng.random_range(2..=6);
                nodes.push(small_conv(&mut rng, &format!("b{b}e"), &last, c, cout));
                nodes.push(act(&mut rng, &format!("b{b}ea"), &format!("b{b}e")));
                nodes.push(
                    Node::new(format!("b{b}pool"), OpKind::MaxPool, &[&format!("b{b}ea")])
                        .with_attr("window", Attr::Ints(vec![2])),
                );
                nodes.push(small_conv(&mut rng, &format!("b{b}m"), &format!("b{b}pool"), cout, inner));
                nodes.push(
                    Node::new(format!("b{b}up"), OpKind::UpsampleNearest, &[&format!("b{b}m")])
                        .with_attr("factor", Attr::Ints(vec![2])),
                );
                nodes.push(
                    Node::new(format!("b{b}cat"), OpKind::Concat, &[&format!("b{b}ea"), &format!("b{b}up")])
                        .with_attr("axis", Attr::Ints(vec![1])),
                );
                last = format!("b{b}cat");
                c = cout + inner;
            }
        }
    }
    let out = rng.random_range(1..=3);
    nodes.push(small_conv(&mut rng, "head", &last, c, out));
    Graph::new(vec![input(dims, in_channels)], nodes, vec!["head"])
}
