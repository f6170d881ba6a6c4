//! Inter-model fusion: align each source model's neurons to an anchor with
//! per-group transport plans, then average parameters with mixing weights.

use crate::depgraph::{build_groups, AxisRole, Group};
use crate::error::{Error, Result};
use crate::graph::{forward_cached, LayerKind, ModelGraph, Param};
use crate::model_io::{node_params, node_params_mut};
use crate::ot::{cost_matrix, normalize_transport, solve_ot, DiscreteDistribution};
use crate::parallel::map_indexed;
use crate::prune::apply_group_map;
use crate::tensor::Tensor;

pub const DEFAULT_FUSION_SAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionCost {
    /// ℓ1 distance between incoming (producer-side) weight vectors.
    Weight,
    /// ℓ1 distance between per-channel activation profiles over a calibration
    /// sample, taken after the group's trailing ReLU, spatially averaged.
    Activation,
}

impl std::str::FromStr for FusionCost {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(Self::Weight),
            "activation" => Ok(Self::Activation),
            other => Err(Error::Input(format!("unknown fusion cost '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionSpec<'a> {
    pub anchor: &'a ModelGraph,
    pub others: Vec<&'a ModelGraph>,
    /// convex mixing weights: anchor first, then `others` in order
    pub weights: Vec<f32>,
    pub cost: FusionCost,
    pub samples: usize,
}

/// Align every non-anchor model to the anchor group-by-group (input to
/// output) and average the aligned parameter tensors.
pub fn fuse_models(spec: &FusionSpec, calibration: Option<&Tensor>) -> Result<ModelGraph> {
    if spec.weights.len() != spec.others.len() + 1 {
        return Err(Error::Input(format!(
            "{} mixing weights for {} models",
            spec.weights.len(),
            spec.others.len() + 1
        )));
    }
    if spec.weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
        return Err(Error::Input("mixing weights must lie in [0, 1]".into()));
    }
    let wsum: f32 = spec.weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("mixing weights sum to {wsum}, not 1")));
    }
    for other in &spec.others {
        check_same_topology(spec.anchor, other)?;
    }
    let calib = match spec.cost {
        FusionCost::Weight => None,
        FusionCost::Activation => {
            let data = calibration
                .ok_or_else(|| Error::Input("activation cost requires calibration data".into()))?;
            let avail = data.shape()[0];
            if avail < spec.samples {
                return Err(Error::Input(format!(
                    "calibration has {avail} samples, need {}",
                    spec.samples
                )));
            }
            Some(first_samples(data, spec.samples)?)
        }
    };

    let aligned: Vec<Result<ModelGraph>> = map_indexed(spec.others.len(), |i| {
        align_to_anchor(spec.anchor, spec.others[i], spec.cost, calib.as_ref())
    });

    let mut out = spec.anchor.clone();
    let mut models: Vec<&ModelGraph> = vec![spec.anchor];
    let aligned: Vec<ModelGraph> = aligned.into_iter().collect::<Result<_>>()?;
    models.extend(aligned.iter());
    for node in &mut out.nodes {
        let sources: Vec<Vec<(Param, &Tensor)>> = models
            .iter()
            .map(|m| node_params(&m.nodes[node.id].kind))
            .collect();
        for (pi, (_, dst)) in node_params_mut(&mut node.kind).into_iter().enumerate() {
            let mut acc = vec![0.0f64; dst.data().len()];
            for (mi, params) in sources.iter().enumerate() {
                let w = spec.weights[mi] as f64;
                if w == 0.0 {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(params[pi].1.data()) {
                    *a += w * v as f64;
                }
            }
            for (d, a) in dst.data_mut().iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
    }
    Ok(out)
}

fn check_same_topology(a: &ModelGraph, b: &ModelGraph) -> Result<()> {
    if a.nodes.len() != b.nodes.len() || a.edges != b.edges || a.input_shape != b.input_shape {
        return Err(Error::Structure("model topologies differ".into()));
    }
    for (na, nb) in a.nodes.iter().zip(&b.nodes) {
        if std::mem::discriminant(&na.kind) != std::mem::discriminant(&nb.kind) {
            return Err(Error::Structure(format!("node {} kinds differ", na.id)));
        }
        let pa = node_params(&na.kind);
        let pb = node_params(&nb.kind);
        if pa.len() != pb.len()
            || pa
                .iter()
                .zip(&pb)
                .any(|((_, ta), (_, tb))| ta.shape() != tb.shape())
        {
            return Err(Error::Structure(format!("node {} shapes differ", na.id)));
        }
    }
    Ok(())
}

fn first_samples(data: &Tensor, count: usize) -> Result<Tensor> {
    let per = data.data().len() / data.shape()[0];
    let mut shape = data.shape().to_vec();
    shape[0] = count;
    Tensor::new(shape, data.data()[..count * per].to_vec())
}

/// Transport `other` onto the anchor's channel indexing. Groups are processed
/// input-first so each plan sees incoming weights already re-aligned upstream.
fn align_to_anchor(
    anchor: &ModelGraph,
    other: &ModelGraph,
    cost_mode: FusionCost,
    calib: Option<&Tensor>,
) -> Result<ModelGraph> {
    let groups = build_groups(anchor)?;
    let mut aligned = other.clone();
    // group id 0 is nearest the output; walk the list backwards
    for group in groups.iter().rev().filter(|g| g.prunable) {
        let n = group.cardinality;
        let (sources, targets) = match cost_mode {
            FusionCost::Weight => (
                incoming_vectors(&aligned, group)?,
                incoming_vectors(anchor, group)?,
            ),
            FusionCost::Activation => {
                let batch = calib.expect("checked in fuse_models");
                (
                    activation_vectors(&aligned, group, batch)?,
                    activation_vectors(anchor, group, batch)?,
                )
            }
        };
        let cost = cost_matrix(&sources, &targets)?;
        let mu = DiscreteDistribution::uniform(n);
        let nu = DiscreteDistribution::uniform(n);
        let plan = solve_ot(&mu, &nu, &cost)?;
        let map = normalize_transport(&plan)?;
        aligned = apply_group_map(&aligned, group, &map.rows, &map.rows, n)?;
    }
    Ok(aligned)
}

/// Per-pairing vectors over incoming weights only: producer rows and biases,
/// plus the group's BatchNorm parameters. Consumer columns are excluded —
/// their indexing is not yet aligned when this group is matched.
fn incoming_vectors(model: &ModelGraph, group: &Group) -> Result<Vec<Vec<f32>>> {
    let n = group.cardinality;
    let mut out = vec![Vec::new(); n];
    for slice in &group.slices {
        let kind = &model.nodes[slice.layer].kind;
        match slice.role {
            AxisRole::ProducerOut => match kind {
                LayerKind::Linear {
                    in_features,
                    weight,
                    bias,
                    ..
                } => {
                    for (j, v) in out.iter_mut().enumerate() {
                        v.extend_from_slice(
                            &weight.data()[j * in_features..(j + 1) * in_features],
                        );
                        if let Some(b) = bias {
                            v.push(b.data()[j]);
                        }
                    }
                }
                LayerKind::Conv2d {
                    in_ch,
                    kernel,
                    weight,
                    bias,
                    ..
                } => {
                    let row = in_ch * kernel * kernel;
                    for (j, v) in out.iter_mut().enumerate() {
                        v.extend_from_slice(&weight.data()[j * row..(j + 1) * row]);
                        v.push(bias.data()[j]);
                    }
                }
                _ => unreachable!("producer slice on non-affine layer"),
            },
            AxisRole::BnElementwise => {
                if let LayerKind::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } = kind
                {
                    for (j, v) in out.iter_mut().enumerate() {
                        v.push(gamma.data()[j]);
                        v.push(beta.data()[j]);
                        v.push(running_mean.data()[j]);
                        v.push(running_var.data()[j]);
                    }
                }
            }
            AxisRole::ConsumerIn { .. } => {}
        }
    }
    Ok(out)
}

/// Per-channel activation profiles at the group's representative node: the
/// last ReLU reachable from a producer through elementwise/pool layers, or
/// the producer itself if none. Conv maps are averaged over space.
fn activation_vectors(model: &ModelGraph, group: &Group, batch: &Tensor) -> Result<Vec<Vec<f32>>> {
    let node = representative_node(model, group)?;
    let cache = forward_cached(model, batch)?;
    let act = &cache.activations[node];
    let shape = act.shape();
    let b = shape[0];
    let c = shape[1];
    if c != group.cardinality {
        return Err(Error::Structure(format!(
            "representative node {node} has {c} channels, group has {}",
            group.cardinality
        )));
    }
    let spatial: usize = shape[2..].iter().product();
    let mut out = vec![vec![0.0f32; b]; c];
    for s in 0..b {
        for (ch, v) in out.iter_mut().enumerate() {
            let base = (s * c + ch) * spatial;
            let sum: f64 = act.data()[base..base + spatial]
                .iter()
                .map(|&x| x as f64)
                .sum();
            v[s] = (sum / spatial as f64) as f32;
        }
    }
    Ok(out)
}

fn representative_node(model: &ModelGraph, group: &Group) -> Result<usize> {
    let order = model.topo_order()?;
    let pos: std::collections::BTreeMap<usize, usize> =
        order.iter().enumerate().map(|(p, &id)| (id, p)).collect();
    let start = group
        .producers()
        .map(|s| s.layer)
        .max_by_key(|id| pos[id])
        .ok_or_else(|| Error::Structure("group has no producer".into()))?;
    let mut best = start;
    let mut stack = vec![start];
    let mut seen = std::collections::BTreeSet::new();
    seen.insert(start);
    while let Some(id) = stack.pop() {
        for c in model.consumers(id) {
            if !seen.insert(c) {
                continue;
            }
            match model.nodes[c].kind {
                LayerKind::ReLU => {
                    if pos[&c] > pos[&best] {
                        best = c;
                    }
                    stack.push(c);
                }
                LayerKind::BatchNorm { .. }
                | LayerKind::Add
                | LayerKind::AvgPool { .. }
                | LayerKind::MaxPool { .. } => stack.push(c),
                _ => {}
            }
        }
    }
    Ok(best)
}
