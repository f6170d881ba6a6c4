//! Layer graph and the forward/backward engine.
//!
//! A `ModelGraph` is a DAG of typed layers. Forward evaluation runs in
//! inference mode (BatchNorm uses running statistics); `backward` produces
//! gradients of the mean cross-entropy loss with respect to every learnable
//! parameter. Running statistics are never differentiated.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
        /// [out_features, in_features]
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// [out_ch, in_ch, kernel, kernel]
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        channels: usize,
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        epsilon: f32,
    },
    ReLU,
    Add,
    AvgPool {
        window: usize,
    },
    MaxPool {
        window: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::ReLU => "relu",
            LayerKind::Add => "add",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: NodeId,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelGraph {
    pub nodes: Vec<LayerNode>,
    /// producer -> consumer pairs; order is significant for Add operands.
    pub edges: Vec<(NodeId, NodeId)>,
    /// Nodes fed directly by the external batch.
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
    /// Per-example input shape, e.g. [features] or [channels, h, w].
    pub input_shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Param {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl Param {
    pub fn name(&self) -> &'static str {
        match self {
            Param::Weight => "weight",
            Param::Bias => "bias",
            Param::Gamma => "gamma",
            Param::Beta => "beta",
            Param::RunningMean => "running_mean",
            Param::RunningVar => "running_var",
        }
    }
}

/// Gradients of the loss keyed by (layer id, parameter).
pub type GradientSet = BTreeMap<(NodeId, Param), Tensor>;

impl ModelGraph {
    pub fn producers(&self, id: NodeId) -> Vec<NodeId> {
        self.edges
            .iter()
            .filter(|(_, c)| *c == id)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.edges
            .iter()
            .filter(|(p, _)| *p == id)
            .map(|(_, c)| *c)
            .collect()
    }

    pub fn node(&self, id: NodeId) -> &LayerNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut LayerNode {
        &mut self.nodes[id]
    }

    /// Kahn topological sort. Errors on cycles.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for &(_, c) in &self.edges {
            indeg[c] += 1;
        }
        let mut queue: Vec<NodeId> = (0..n).filter(|&i| indeg[i] == 0).collect();
        queue.sort_unstable();
        let mut order = Vec::with_capacity(n);
        let mut head = 0;
        while head < queue.len() {
            let u = queue[head];
            head += 1;
            order.push(u);
            for &(p, c) in &self.edges {
                if p == u {
                    indeg[c] -= 1;
                    if indeg[c] == 0 {
                        queue.push(c);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(Error::Structure("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Per-node output shapes (without the batch dimension) for a given
    /// per-example input shape; also validates edge shape compatibility.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let order = self.topo_order()?;
        let mut shapes: Vec<Option<Vec<usize>>> = vec![None; self.nodes.len()];
        for id in order {
            let node = &self.nodes[id];
            let in_shapes: Vec<Vec<usize>> = if self.inputs.contains(&id) {
                vec![self.input_shape.clone()]
            } else {
                let prods = self.producers(id);
                if prods.is_empty() {
                    return Err(Error::Structure(format!(
                        "node {id} ({}) has no producers and is not an input",
                        node.kind.name()
                    )));
                }
                prods
                    .iter()
                    .map(|&p| {
                        shapes[p].clone().ok_or_else(|| {
                            Error::Structure(format!("producer {p} of node {id} unresolved"))
                        })
                    })
                    .collect::<Result<_>>()?
            };
            shapes[id] = Some(infer_node_shape(node, &in_shapes)?);
        }
        Ok(shapes.into_iter().map(|s| s.unwrap()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Structure(format!(
                    "node id {} at index {i}",
                    node.id
                )));
            }
            validate_params(node)?;
        }
        if self.output >= self.nodes.len() {
            return Err(Error::Structure("output id out of range".into()));
        }
        self.infer_shapes()?;
        Ok(())
    }
}

fn validate_params(node: &LayerNode) -> Result<()> {
    let bad = |msg: String| Err(Error::Structure(format!("node {}: {}", node.id, msg)));
    match &node.kind {
        LayerKind::Linear {
            in_features,
            out_features,
            weight,
            bias,
        } => {
            if weight.shape() != [*out_features, *in_features] {
                return bad(format!("linear weight shape {:?}", weight.shape()));
            }
            if let Some(b) = bias {
                if b.shape() != [*out_features] {
                    return bad(format!("linear bias shape {:?}", b.shape()));
                }
            }
        }
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            weight,
            bias,
            ..
        } => {
            if weight.shape() != [*out_ch, *in_ch, *kernel, *kernel] {
                return bad(format!("conv weight shape {:?}", weight.shape()));
            }
            if bias.shape() != [*out_ch] {
                return bad(format!("conv bias shape {:?}", bias.shape()));
            }
        }
        LayerKind::BatchNorm {
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } => {
            for (name, t) in [
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ] {
                if t.shape() != [*channels] {
                    return bad(format!("batchnorm {name} shape {:?}", t.shape()));
                }
            }
            if running_var.data().iter().any(|&v| v < 0.0) {
                return bad("negative running variance".into());
            }
        }
        _ => {}
    }
    Ok(())
}

fn infer_node_shape(node: &LayerNode, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
    let one = |n: usize| -> Result<&Vec<usize>> {
        if inputs.len() != n {
            return Err(Error::Structure(format!(
                "node {} ({}) expects {n} input(s), has {}",
                node.id,
                node.kind.name(),
                inputs.len()
            )));
        }
        Ok(&inputs[0])
    };
    let mismatch = |expected: Vec<usize>, got: &[usize]| Error::Shape {
        context: format!("edge into node {} ({})", node.id, node.kind.name()),
        expected,
        got: got.to_vec(),
    };
    match &node.kind {
        LayerKind::Linear {
            in_features,
            out_features,
            ..
        } => {
            let s = one(1)?;
            if s != &[*in_features] {
                return Err(mismatch(vec![*in_features], s));
            }
            Ok(vec![*out_features])
        }
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            ..
        } => {
            let s = one(1)?;
            if s.len() != 3 || s[0] != *in_ch {
                return Err(mismatch(vec![*in_ch, 0, 0], s));
            }
            let (h, w) = (s[1], s[2]);
            if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                return Err(Error::Structure(format!(
                    "node {}: kernel {kernel} larger than padded input {h}x{w}",
                    node.id
                )));
            }
            let oh = (h + 2 * padding - kernel) / stride + 1;
            let ow = (w + 2 * padding - kernel) / stride + 1;
            Ok(vec![*out_ch, oh, ow])
        }
        LayerKind::BatchNorm { channels, .. } => {
            let s = one(1)?;
            if s[0] != *channels {
                return Err(mismatch(vec![*channels], s));
            }
            Ok(s.clone())
        }
        LayerKind::ReLU => Ok(one(1)?.clone()),
        LayerKind::Add => {
            if inputs.len() != 2 {
                return Err(Error::Structure(format!(
                    "node {}: add expects exactly 2 inputs, has {}",
                    node.id,
                    inputs.len()
                )));
            }
            if inputs[0] != inputs[1] {
                return Err(mismatch(inputs[0].clone(), &inputs[1]));
            }
            Ok(inputs[0].clone())
        }
        LayerKind::AvgPool { window } | LayerKind::MaxPool { window } => {
            let s = one(1)?;
            if s.len() != 3 {
                return Err(mismatch(vec![0, 0, 0], s));
            }
            Ok(vec![s[0], s[1] / window, s[2] / window])
        }
        LayerKind::Flatten => {
            let s = one(1)?;
            Ok(vec![s.iter().product()])
        }
    }
}

/// Per-node activations from a forward pass, indexed by node id.
pub struct ForwardCache {
    pub activations: Vec<Tensor>,
    pub order: Vec<NodeId>,
    pub batch: Tensor,
}

fn batch_size(batch: &Tensor, input_shape: &[usize]) -> Result<usize> {
    let s = batch.shape();
    if s.len() != input_shape.len() + 1 || &s[1..] != input_shape {
        return Err(Error::Shape {
            context: "model input".into(),
            expected: input_shape.to_vec(),
            got: s.to_vec(),
        });
    }
    Ok(s[0])
}

pub fn forward_cached(model: &ModelGraph, batch: &Tensor) -> Result<ForwardCache> {
    let b = batch_size(batch, &model.input_shape)?;
    let order = model.topo_order()?;
    let mut acts: Vec<Option<Tensor>> = vec![None; model.nodes.len()];
    for &id in &order {
        let node = &model.nodes[id];
        let ins: Vec<&Tensor> = if model.inputs.contains(&id) {
            vec![batch]
        } else {
            model
                .producers(id)
                .into_iter()
                .map(|p| acts[p].as_ref().expect("topo order"))
                .collect()
        };
        acts[id] = Some(node_forward(node, &ins, b)?);
    }
    Ok(ForwardCache {
        activations: acts.into_iter().map(|a| a.unwrap()).collect(),
        order,
        batch: batch.clone(),
    })
}

/// Inference-mode forward pass; returns the output node's activations.
pub fn forward(model: &ModelGraph, batch: &Tensor) -> Result<Tensor> {
    let cache = forward_cached(model, batch)?;
    Ok(cache.activations[model.output].clone())
}

fn node_forward(node: &LayerNode, ins: &[&Tensor], b: usize) -> Result<Tensor> {
    match &node.kind {
        LayerKind::Linear { in_features, out_features, weight, bias } => {
            let x = ins[0];
            if x.shape() != [b, *in_features] {
                return Err(Error::Shape {
                    context: format!("edge into node {} (linear)", node.id),
                    expected: vec![b, *in_features],
                    got: x.shape().to_vec(),
                });
            }
            let mut out = Tensor::zeros(vec![b, *out_features]);
            for bi in 0..b {
                for o in 0..*out_features {
                    let mut acc = bias.as_ref().map_or(0.0, |bt| bt.data()[o]);
                    let wrow = &weight.data()[o * in_features..(o + 1) * in_features];
                    let xrow = &x.data()[bi * in_features..(bi + 1) * in_features];
                    for k in 0..*in_features {
                        acc += wrow[k] * xrow[k];
                    }
                    *out.at2_mut(bi, o) = acc;
                }
            }
            Ok(out)
        }
        LayerKind::Conv2d { in_ch, out_ch, kernel, stride, padding, weight, bias } => {
            conv2d_forward(node.id, ins[0], b, *in_ch, *out_ch, *kernel, *stride, *padding, weight, bias)
        }
        LayerKind::BatchNorm { channels, gamma, beta, running_mean, running_var, epsilon } => {
            let x = ins[0];
            let spatial: usize = x.shape()[2..].iter().product();
            if x.shape()[1] != *channels {
                return Err(Error::Shape {
                    context: format!("edge into node {} (batchnorm)", node.id),
                    expected: vec![*channels],
                    got: x.shape().to_vec(),
                });
            }
            let mut out = x.clone();
            for bi in 0..b {
                for c in 0..*channels {
                    let scale = gamma.data()[c] / (running_var.data()[c] + epsilon).sqrt();
                    let shift = beta.data()[c] - running_mean.data()[c] * scale;
                    let base = (bi * channels + c) * spatial;
                    for s in 0..spatial {
                        let v = &mut out.data_mut()[base + s];
                        *v = *v * scale + shift;
                    }
                }
            }
            Ok(out)
        }
        LayerKind::ReLU => {
            let mut out = ins[0].clone();
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(out)
        }
        LayerKind::Add => {
            if ins[0].shape() != ins[1].shape() {
                return Err(Error::Shape {
                    context: format!("edge into node {} (add)", node.id),
                    expected: ins[0].shape().to_vec(),
                    got: ins[1].shape().to_vec(),
                });
            }
            let mut out = ins[0].clone();
            for (o, r) in out.data_mut().iter_mut().zip(ins[1].data()) {
                *o += r;
            }
            Ok(out)
        }
        LayerKind::AvgPool { window } => pool_forward(ins[0], b, *window, false).map(|(t, _)| t),
        LayerKind::MaxPool { window } => pool_forward(ins[0], b, *window, true).map(|(t, _)| t),
        LayerKind::Flatten => {
            let x = ins[0];
            let flat: usize = x.shape()[1..].iter().product();
            x.reshaped(vec![b, flat])
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    id: NodeId,
    x: &Tensor,
    b: usize,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[1] != in_ch {
        return Err(Error::Shape {
            context: format!("edge into node {id} (conv2d)"),
            expected: vec![b, in_ch, 0, 0],
            got: s.to_vec(),
        });
    }
    let (h, w) = (s[2], s[3]);
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Tensor::zeros(vec![b, out_ch, oh, ow]);
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();
    for bi in 0..b {
        for oc in 0..out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..in_ch {
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let xi = ((bi * in_ch + ic) * h + iy as usize) * w + ix as usize;
                                let wi = ((oc * in_ch + ic) * kernel + ky) * kernel + kx;
                                acc += xd[xi] * wd[wi];
                            }
                        }
                    }
                    od[((bi * out_ch + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Window pooling with stride == window. For max pooling the second return
/// carries the flat argmax index per output cell (first max wins).
fn pool_forward(x: &Tensor, b: usize, window: usize, max: bool) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            context: "pool input".into(),
            expected: vec![b, 0, 0, 0],
            got: s.to_vec(),
        });
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let (oh, ow) = (h / window, w / window);
    if oh == 0 || ow == 0 {
        return Err(Error::Structure(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(vec![b, c, oh, ow]);
    let mut argmax = vec![0usize; if max { b * c * oh * ow } else { 0 }];
    let xd = x.data();
    let od = out.data_mut();
    let area = (window * window) as f32;
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = ((bi * c + ci) * oh + oy) * ow + ox;
                    if max {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0;
                        for ky in 0..window {
                            for kx in 0..window {
                                let xi = ((bi * c + ci) * h + oy * window + ky) * w
                                    + ox * window
                                    + kx;
                                if xd[xi] > best {
                                    best = xd[xi];
                                    best_i = xi;
                                }
                            }
                        }
                        od[oi] = best;
                        argmax[oi] = best_i;
                    } else {
                        let mut acc = 0.0;
                        for ky in 0..window {
                            for kx in 0..window {
                                acc += xd[((bi * c + ci) * h + oy * window + ky) * w
                                    + ox * window
                                    + kx];
                            }
                        }
                        od[oi] = acc / area;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Mean negative log-softmax of the true class.
pub fn loss_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Input(format!(
            "logits shape {s:?} vs {} labels",
            labels.len()
        )));
    }
    let classes = s[1];
    let mut total = 0.0f64;
    for (bi, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits.data()[bi * classes..(bi + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let lse: f32 = row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
        total += (lse - row[label]) as f64;
    }
    Ok((total / labels.len() as f64) as f32)
}

/// Row-wise softmax of a [batch, classes] tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = logits.clone();
    for bi in 0..b {
        let row = &mut out.data_mut()[bi * c..(bi + 1) * c];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Gradients of mean cross-entropy w.r.t. every learnable parameter.
pub fn backward(model: &ModelGraph, batch: &Tensor, labels: &[usize]) -> Result<GradientSet> {
    let cache = forward_cached(model, batch)?;
    backward_from_cache(model, &cache, labels)
}

pub fn backward_from_cache(
    model: &ModelGraph,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<GradientSet> {
    let logits = &cache.activations[model.output];
    let b = logits.shape()[0];
    let classes = logits.shape()[1];
    if labels.len() != b {
        return Err(Error::Input(format!("{} labels for batch {b}", labels.len())));
    }
    for &l in labels {
        if l >= classes {
            return Err(Error::Input(format!("label {l} out of range")));
        }
    }
    // dL/dlogits = (softmax - onehot) / batch
    let mut dlogits = softmax_rows(logits);
    for (bi, &label) in labels.iter().enumerate() {
        *dlogits.at2_mut(bi, label) -= 1.0;
    }
    for v in dlogits.data_mut() {
        *v /= b as f32;
    }

    let mut grads: GradientSet = BTreeMap::new();
    let mut out_grads: Vec<Option<Tensor>> = vec![None; model.nodes.len()];
    out_grads[model.output] = Some(dlogits);

    for &id in cache.order.iter().rev() {
        let dy = match out_grads[id].take() {
            Some(g) => g,
            None => continue, // dead branch: no gradient flows here
        };
        let node = &model.nodes[id];
        let producers = model.producers(id);
        let ins: Vec<&Tensor> = if model.inputs.contains(&id) {
            vec![&cache.batch]
        } else {
            producers.iter().map(|&p| &cache.activations[p]).collect()
        };
        let din = node_backward(node, &ins, &dy, &mut grads)?;
        for (slot, grad) in producers.iter().zip(din) {
            match &mut out_grads[*slot] {
                Some(acc) => {
                    for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += g;
                    }
                }
                none => *none = Some(grad),
            }
        }
    }

    // parameters on dead branches get explicit zero gradients
    for node in &model.nodes {
        for (param, shape) in param_shapes(&node.kind) {
            grads
                .entry((node.id, param))
                .or_insert_with(|| Tensor::zeros(shape));
        }
    }
    Ok(grads)
}

/// Learnable parameters only (running statistics are not differentiated).
fn param_shapes(kind: &LayerKind) -> Vec<(Param, Vec<usize>)> {
    match kind {
        LayerKind::Linear { weight, bias, .. } => {
            let mut v = vec![(Param::Weight, weight.shape().to_vec())];
            if let Some(b) = bias {
                v.push((Param::Bias, b.shape().to_vec()));
            }
            v
        }
        LayerKind::Conv2d { weight, bias, .. } => vec![
            (Param::Weight, weight.shape().to_vec()),
            (Param::Bias, bias.shape().to_vec()),
        ],
        LayerKind::BatchNorm { gamma, beta, .. } => vec![
            (Param::Gamma, gamma.shape().to_vec()),
            (Param::Beta, beta.shape().to_vec()),
        ],
        _ => vec![],
    }
}

fn node_backward(
    node: &LayerNode,
    ins: &[&Tensor],
    dy: &Tensor,
    grads: &mut GradientSet,
) -> Result<Vec<Tensor>> {
    match &node.kind {
        LayerKind::Linear { in_features, out_features, weight, bias } => {
            let x = ins[0];
            let b = x.shape()[0];
            let mut dw = Tensor::zeros(vec![*out_features, *in_features]);
            let mut dx = Tensor::zeros(vec![b, *in_features]);
            for bi in 0..b {
                for o in 0..*out_features {
                    let g = dy.at2(bi, o);
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = &weight.data()[o * in_features..(o + 1) * in_features];
                    for k in 0..*in_features {
                        dw.data_mut()[o * in_features + k] += g * x.at2(bi, k);
                        dx.data_mut()[bi * in_features + k] += g * wrow[k];
                    }
                }
            }
            grads.insert((node.id, Param::Weight), dw);
            if bias.is_some() {
                let mut db = Tensor::zeros(vec![*out_features]);
                for bi in 0..b {
                    for o in 0..*out_features {
                        db.data_mut()[o] += dy.at2(bi, o);
                    }
                }
                grads.insert((node.id, Param::Bias), db);
            }
            Ok(vec![dx])
        }
        LayerKind::Conv2d { in_ch, out_ch, kernel, stride, padding, weight, .. } => {
            let x = ins[0];
            let b = x.shape()[0];
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
            let mut dw = Tensor::zeros(vec![*out_ch, *in_ch, *kernel, *kernel]);
            let mut db = Tensor::zeros(vec![*out_ch]);
            let mut dx = Tensor::zeros(x.shape().to_vec());
            let xd = x.data();
            let wd = weight.data();
            let dyd = dy.data();
            for bi in 0..b {
                for oc in 0..*out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dyd[((bi * out_ch + oc) * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            db.data_mut()[oc] += g;
                            for ic in 0..*in_ch {
                                for ky in 0..*kernel {
                                    let iy = (oy * stride + ky) as isize - *padding as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    for kx in 0..*kernel {
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if ix < 0 || ix as usize >= w {
                                            continue;
                                        }
                                        let xi = ((bi * in_ch + ic) * h + iy as usize) * w
                                            + ix as usize;
                                        let wi = ((oc * in_ch + ic) * kernel + ky) * kernel + kx;
                                        dw.data_mut()[wi] += g * xd[xi];
                                        dx.data_mut()[xi] += g * wd[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            grads.insert((node.id, Param::Weight), dw);
            grads.insert((node.id, Param::Bias), db);
            Ok(vec![dx])
        }
        LayerKind::BatchNorm { channels, gamma, running_mean, running_var, epsilon, .. } => {
            let x = ins[0];
            let b = x.shape()[0];
            let spatial: usize = x.shape()[2..].iter().product();
            let mut dgamma = Tensor::zeros(vec![*channels]);
            let mut dbeta = Tensor::zeros(vec![*channels]);
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for bi in 0..b {
                for c in 0..*channels {
                    let inv = 1.0 / (running_var.data()[c] + epsilon).sqrt();
                    let base = (bi * channels + c) * spatial;
                    for s in 0..spatial {
                        let g = dy.data()[base + s];
                        dgamma.data_mut()[c] += g * (x.data()[base + s] - running_mean.data()[c]) * inv;
                        dbeta.data_mut()[c] += g;
                        dx.data_mut()[base + s] = g * gamma.data()[c] * inv;
                    }
                }
            }
            grads.insert((node.id, Param::Gamma), dgamma);
            grads.insert((node.id, Param::Beta), dbeta);
            Ok(vec![dx])
        }
        LayerKind::ReLU => {
            let x = ins[0];
            let mut dx = dy.clone();
            for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                if v <= 0.0 {
                    *d = 0.0;
                }
            }
            Ok(vec![dx])
        }
        LayerKind::Add => Ok(vec![dy.clone(), dy.clone()]),
        LayerKind::AvgPool { window } => {
            let x = ins[0];
            let b = x.shape()[0];
            let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
            let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
            let mut dx = Tensor::zeros(x.shape().to_vec());
            let area = (window * window) as f32;
            for bi in 0..b {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dy.data()[((bi * c + ci) * oh + oy) * ow + ox] / area;
                            for ky in 0..*window {
                                for kx in 0..*window {
                                    dx.data_mut()[((bi * c + ci) * h + oy * window + ky) * w
                                        + ox * window
                                        + kx] += g;
                                }
                            }
                        }
                    }
                }
            }
            Ok(vec![dx])
        }
        LayerKind::MaxPool { window } => {
            let x = ins[0];
            let b = x.shape()[0];
            let (_, argmax) = pool_forward(x, b, *window, true)?;
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for (oi, &xi) in argmax.iter().enumerate() {
                dx.data_mut()[xi] += dy.data()[oi];
            }
            Ok(vec![dx])
        }
        LayerKind::Flatten => Ok(vec![dy.reshaped(ins[0].shape().to_vec())?]),
    }
}

/// Update every BatchNorm's running statistics from the batch statistics of
/// its input activations (training-mode bookkeeping; gradients are unaffected).
pub fn update_bn_stats(model: &mut ModelGraph, cache: &ForwardCache, momentum: f32) {
    let producer_map: Vec<Vec<NodeId>> =
        (0..model.nodes.len()).map(|id| model.producers(id)).collect();
    for id in 0..model.nodes.len() {
        let x = match &producer_map[id][..] {
            [p] => &cache.activations[*p],
            _ => continue,
        };
        if let LayerKind::BatchNorm {
            channels,
            running_mean,
            running_var,
            ..
        } = &mut model.nodes[id].kind
        {
            let b = x.shape()[0];
            let spatial: usize = x.shape()[2..].iter().product();
            let count = (b * spatial) as f32;
            for c in 0..*channels {
                let mut mean = 0.0f32;
                let mut sq = 0.0f32;
                for bi in 0..b {
                    let base = (bi * *channels + c) * spatial;
                    for s in 0..spatial {
                        let v = x.data()[base + s];
                        mean += v;
                        sq += v * v;
                    }
                }
                mean /= count;
                let var = (sq / count - mean * mean).max(0.0);
                let rm = &mut running_mean.data_mut()[c];
                *rm = (1.0 - momentum) * *rm + momentum * mean;
                let rv = &mut running_var.data_mut()[c];
                *rv = (1.0 - momentum) * *rv + momentum * var;
            }
        }
    }
}
