//! Architecture builders and seeded parameter initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode, ModelGraph, NodeId};
use crate::tensor::Tensor;

pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    edges: Vec<(NodeId, NodeId)>,
    inputs: Vec<NodeId>,
    input_shape: Vec<usize>,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self {
            nodes: Vec::new(),
            edges: Vec::new(),
            inputs: Vec::new(),
            input_shape,
        }
    }

    /// Add a node fed by `producers`; an empty producer list means the node
    /// consumes the external batch.
    pub fn add(&mut self, kind: LayerKind, producers: &[NodeId]) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(LayerNode { id, kind });
        if producers.is_empty() {
            self.inputs.push(id);
        } else {
            for &p in producers {
                self.edges.push((p, id));
            }
        }
        id
    }

    pub fn finish(self, output: NodeId) -> Result<ModelGraph> {
        let model = ModelGraph {
            nodes: self.nodes,
            edges: self.edges,
            inputs: self.inputs,
            output,
            input_shape: self.input_shape,
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn linear(in_features: usize, out_features: usize, bias: bool) -> LayerKind {
    LayerKind::Linear {
        in_features,
        out_features,
        weight: Tensor::zeros(vec![out_features, in_features]),
        bias: bias.then(|| Tensor::zeros(vec![out_features])),
    }
}

pub fn conv2d(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> LayerKind {
    LayerKind::Conv2d {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
        weight: Tensor::zeros(vec![out_ch, in_ch, kernel, kernel]),
        bias: Tensor::zeros(vec![out_ch]),
    }
}

pub const BN_EPSILON: f32 = 1e-5;

pub fn batchnorm(channels: usize) -> LayerKind {
    LayerKind::BatchNorm {
        channels,
        gamma: Tensor::filled(vec![channels], 1.0),
        beta: Tensor::zeros(vec![channels]),
        running_mean: Tensor::zeros(vec![channels]),
        running_var: Tensor::filled(vec![channels], 1.0),
        epsilon: BN_EPSILON,
    }
}

/// mlp(in, hidden.., out): Linear/ReLU chain with biases.
pub fn mlp(in_features: usize, hidden: &[usize], classes: usize) -> Result<ModelGraph> {
    if in_features == 0 || classes == 0 {
        return Err(Error::Input("mlp dims must be positive".into()));
    }
    let mut b = GraphBuilder::new(vec![in_features]);
    let mut prev_dim = in_features;
    let mut prev: Vec<NodeId> = vec![];
    for &h in hidden {
        if h == 0 {
            return Err(Error::Input("mlp hidden dim must be positive".into()));
        }
        let l = b.add(linear(prev_dim, h, true), &prev);
        let r = b.add(LayerKind::ReLU, &[l]);
        prev = vec![r];
        prev_dim = h;
    }
    let out = b.add(linear(prev_dim, classes, true), &prev);
    b.finish(out)
}

/// VGG-style stack: (conv3x3 pad1 -> BN -> ReLU -> maxpool2) per channel
/// entry, then flatten and a linear head.
pub fn vgg_toy(in_ch: usize, hw: usize, channels: &[usize], classes: usize) -> Result<ModelGraph> {
    if channels.is_empty() {
        return Err(Error::Input("vgg-toy needs at least one conv stage".into()));
    }
    let mut b = GraphBuilder::new(vec![in_ch, hw, hw]);
    let mut prev: Vec<NodeId> = vec![];
    let mut cur_ch = in_ch;
    let mut cur_hw = hw;
    for &c in channels {
        if c == 0 {
            return Err(Error::Input("vgg-toy channel count must be positive".into()));
        }
        let conv = b.add(conv2d(cur_ch, c, 3, 1, 1), &prev);
        let bn = b.add(batchnorm(c), &[conv]);
        let relu = b.add(LayerKind::ReLU, &[bn]);
        if cur_hw >= 2 {
            let pool = b.add(LayerKind::MaxPool { window: 2 }, &[relu]);
            cur_hw /= 2;
            prev = vec![pool];
        } else {
            prev = vec![relu];
        }
        cur_ch = c;
    }
    let flat = b.add(LayerKind::Flatten, &prev);
    let head = b.add(linear(cur_ch * cur_hw * cur_hw, classes, true), &[flat]);
    b.finish(head)
}

/// Small residual net: stem conv, one residual block whose Add couples the
/// stem and block-exit channels into a single prunable group, pooled head.
pub fn resnet_toy(in_ch: usize, hw: usize, width: usize, classes: usize) -> Result<ModelGraph> {
    if width == 0 {
        return Err(Error::Input("resnet-toy width must be positive".into()));
    }
    let mut b = GraphBuilder::new(vec![in_ch, hw, hw]);
    let stem = b.add(conv2d(in_ch, width, 3, 1, 1), &[]);
    let stem_bn = b.add(batchnorm(width), &[stem]);
    let stem_relu = b.add(LayerKind::ReLU, &[stem_bn]);
    let c1 = b.add(conv2d(width, width, 3, 1, 1), &[stem_relu]);
    let bn1 = b.add(batchnorm(width), &[c1]);
    let r1 = b.add(LayerKind::ReLU, &[bn1]);
    let c2 = b.add(conv2d(width, width, 3, 1, 1), &[r1]);
    let bn2 = b.add(batchnorm(width), &[c2]);
    let add = b.add(LayerKind::Add, &[stem_relu, bn2]);
    let relu = b.add(LayerKind::ReLU, &[add]);
    let pool = b.add(LayerKind::AvgPool { window: 2 }, &[relu]);
    let flat = b.add(LayerKind::Flatten, &[pool]);
    let head = b.add(linear(width * (hw / 2) * (hw / 2), classes, true), &[flat]);
    b.finish(head)
}

#[derive(Debug, Clone)]
pub enum ArchSpec {
    Mlp { in_features: usize, hidden: Vec<usize>, classes: usize },
    VggToy { in_ch: usize, hw: usize, channels: Vec<usize>, classes: usize },
    ResnetToy { in_ch: usize, hw: usize, width: usize, classes: usize },
}

pub fn build_arch(spec: &ArchSpec) -> Result<ModelGraph> {
    match spec {
        ArchSpec::Mlp { in_features, hidden, classes } => mlp(*in_features, hidden, *classes),
        ArchSpec::VggToy { in_ch, hw, channels, classes } => {
            vgg_toy(*in_ch, *hw, channels, *classes)
        }
        ArchSpec::ResnetToy { in_ch, hw, width, classes } => {
            resnet_toy(*in_ch, *hw, *width, *classes)
        }
    }
}

/// Parse `mlp:784,32,10`, `vgg-toy:1x8,8,16,10`, `resnet-toy:1x8,8,10`.
pub fn parse_arch(s: &str) -> Result<ArchSpec> {
    let (name, rest) = s
        .split_once(':')
        .ok_or_else(|| Error::Input(format!("arch spec '{s}' missing ':'")))?;
    let err = || Error::Input(format!("invalid arch spec '{s}'"));
    match name {
        "mlp" => {
            let dims: Vec<usize> = rest
                .split(',')
                .map(|d| d.parse().map_err(|_| err()))
                .collect::<Result<_>>()?;
            if dims.len() < 2 {
                return Err(err());
            }
            Ok(ArchSpec::Mlp {
                in_features: dims[0],
                hidden: dims[1..dims.len() - 1].to_vec(),
                classes: dims[dims.len() - 1],
            })
        }
        "vgg-toy" | "resnet-toy" => {
            let mut parts = rest.split(',');
            let first = parts.next().ok_or_else(err)?;
            let (ch, hw) = first.split_once('x').ok_or_else(err)?;
            let in_ch = ch.parse().map_err(|_| err())?;
            let hw = hw.parse().map_err(|_| err())?;
            let dims: Vec<usize> = parts
                .map(|d| d.parse().map_err(|_| err()))
                .collect::<Result<_>>()?;
            if dims.len() < 2 {
                return Err(err());
            }
            let classes = dims[dims.len() - 1];
            if name == "vgg-toy" {
                Ok(ArchSpec::VggToy {
                    in_ch,
                    hw,
                    channels: dims[..dims.len() - 1].to_vec(),
                    classes,
                })
            } else {
                if dims.len() != 2 {
                    return Err(err());
                }
                Ok(ArchSpec::ResnetToy { in_ch, hw, width: dims[0], classes })
            }
        }
        _ => Err(Error::Input(format!("unknown architecture '{name}'"))),
    }
}

/// He-uniform weights, zero biases, identity BN, seeded.
pub fn init_params(model: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for node in &mut model.nodes {
        match &mut node.kind {
            LayerKind::Linear { in_features, weight, .. } => {
                let bound = (6.0 / *in_features as f32).sqrt();
                for w in weight.data_mut() {
                    *w = rng.gen_range(-bound..bound);
                }
            }
            LayerKind::Conv2d { in_ch, kernel, weight, .. } => {
                let fan_in = (*in_ch * *kernel * *kernel) as f32;
                let bound = (6.0 / fan_in).sqrt();
                for w in weight.data_mut() {
                    *w = rng.gen_range(-bound..bound);
                }
            }
            _ => {}
        }
    }
}

/// Random BN statistics and affine parameters, for fold tests.
pub fn randomize_bn(model: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for node in &mut model.nodes {
        if let LayerKind::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } = &mut node.kind
        {
            for g in gamma.data_mut() {
                *g = rng.gen_range(0.5..2.0);
            }
            for b in beta.data_mut() {
                *b = rng.gen_range(-1.0..1.0);
            }
            for m in running_mean.data_mut() {
                *m = rng.gen_range(-1.0..1.0);
            }
            for v in running_var.data_mut() {
                *v = rng.gen_range(0.1..2.0);
            }
        }
    }
}
