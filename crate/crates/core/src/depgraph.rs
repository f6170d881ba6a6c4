//! Prunable-group extraction: coupled layer/axis slices that must be pruned
//! in unison, found by union-find over channel axes.
//!
//! A producer's output-channel axis merges with every direct consumer's
//! input-channel axis; BatchNorm merges elementwise with its producer; Add
//! merges the output-channel classes of both operands. Groups touching the
//! model's classifier output axis are non-prunable.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisRole {
    /// The layer's output-channel axis (weight rows and bias).
    ProducerOut,
    /// The layer's input-channel axis; `block` consecutive input positions
    /// per channel (> 1 for a linear behind a flatten).
    ConsumerIn { block: usize },
    /// BatchNorm per-channel parameters.
    BnElementwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisSlice {
    pub layer: NodeId,
    pub role: AxisRole,
}

#[derive(Debug, Clone)]
pub struct Group {
    /// Small ids are closer to the model output.
    pub id: usize,
    /// Producers in topological order, then consumers in topological order,
    /// then BN slices in topological order.
    pub slices: Vec<AxisSlice>,
    pub cardinality: usize,
    pub prunable: bool,
}

impl Group {
    pub fn producers(&self) -> impl Iterator<Item = &AxisSlice> {
        self.slices
            .iter()
            .filter(|s| s.role == AxisRole::ProducerOut)
    }

    pub fn consumers(&self) -> impl Iterator<Item = &AxisSlice> {
        self.slices
            .iter()
            .filter(|s| matches!(s.role, AxisRole::ConsumerIn { .. }))
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }
    fn fresh(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }
    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // lower root wins, for determinism
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Extract all channel groups of a model.
pub fn build_groups(model: &ModelGraph) -> Result<Vec<Group>> {
    let order = model.topo_order()?;
    let shapes = model.infer_shapes()?;
    let topo_pos: BTreeMap<NodeId, usize> =
        order.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut uf = UnionFind::new();
    let input_class = uf.fresh();
    // (class, block) carried on each node's output
    let mut node_class: Vec<Option<(usize, usize)>> = vec![None; model.nodes.len()];
    let mut slices: Vec<(usize, AxisSlice)> = Vec::new();

    for &id in &order {
        let node = &model.nodes[id];
        let upstream: Vec<(usize, usize)> = if model.inputs.contains(&id) {
            vec![(input_class, 1)]
        } else {
            model
                .producers(id)
                .iter()
                .map(|&p| node_class[p].expect("topo order"))
                .collect()
        };
        let out = match &node.kind {
            LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                let (up_class, block) = upstream[0];
                slices.push((
                    up_class,
                    AxisSlice {
                        layer: id,
                        role: AxisRole::ConsumerIn { block },
                    },
                ));
                let class = uf.fresh();
                slices.push((
                    class,
                    AxisSlice {
                        layer: id,
                        role: AxisRole::ProducerOut,
                    },
                ));
                (class, 1)
            }
            LayerKind::BatchNorm { .. } => {
                let (up_class, block) = upstream[0];
                if block != 1 {
                    return Err(Error::Unsupported(format!(
                        "node {id}: batchnorm behind flatten"
                    )));
                }
                slices.push((
                    up_class,
                    AxisSlice {
                        layer: id,
                        role: AxisRole::BnElementwise,
                    },
                ));
                (up_class, 1)
            }
            LayerKind::Add => {
                let (a, ab) = upstream[0];
                let (b, bb) = upstream[1];
                if ab != bb {
                    return Err(Error::Structure(format!(
                        "node {id}: add operands with different channel blocks"
                    )));
                }
                uf.union(a, b);
                (uf.find(a), ab)
            }
            LayerKind::Flatten => {
                let (up_class, block) = upstream[0];
                // channel c of a [C, H, W] producer maps to a block of H*W
                // flattened positions
                let prod = model.producers(id)[0];
                let spatial: usize = shapes[prod][1..].iter().product();
                (up_class, block * spatial)
            }
            LayerKind::ReLU | LayerKind::AvgPool { .. } | LayerKind::MaxPool { .. } => upstream[0],
        };
        node_class[id] = Some(out);
    }

    let output_class = uf.find(node_class[model.output].expect("output resolved").0);
    let input_root = uf.find(input_class);

    // gather slices per root class
    let mut by_class: BTreeMap<usize, Vec<AxisSlice>> = BTreeMap::new();
    for (class, slice) in slices {
        by_class.entry(uf.find(class)).or_default().push(slice);
    }

    let mut groups = Vec::new();
    for (class, mut members) in by_class {
        let has_producer = members.iter().any(|s| s.role == AxisRole::ProducerOut);
        if !has_producer {
            // the raw model input axis; nothing to prune, nothing to group
            debug_assert_eq!(class, input_root);
            continue;
        }
        let role_rank = |s: &AxisSlice| match s.role {
            AxisRole::ProducerOut => 0,
            AxisRole::ConsumerIn { .. } => 1,
            AxisRole::BnElementwise => 2,
        };
        members.sort_by_key(|s| (role_rank(s), topo_pos[&s.layer]));

        let mut cardinality = None;
        for s in &members {
            let n = match s.role {
                AxisRole::ProducerOut | AxisRole::BnElementwise => shapes[s.layer][0],
                AxisRole::ConsumerIn { block } => match &model.nodes[s.layer].kind {
                    LayerKind::Linear { in_features, .. } => in_features / block,
                    LayerKind::Conv2d { in_ch, .. } => *in_ch,
                    _ => unreachable!(),
                },
            };
            match cardinality {
                None => cardinality = Some(n),
                Some(c) if c != n => {
                    return Err(Error::Structure(format!(
                        "group axis length mismatch at layer {} ({n} vs {c})",
                        s.layer
                    )))
                }
                _ => {}
            }
        }
        let cardinality = cardinality.unwrap();
        let has_consumer = members
            .iter()
            .any(|s| matches!(s.role, AxisRole::ConsumerIn { .. }));
        let prunable = class != output_class && has_consumer;
        // position of the most-downstream producer, for output-first ordering
        let depth = members
            .iter()
            .filter(|s| s.role == AxisRole::ProducerOut)
            .map(|s| topo_pos[&s.layer])
            .max()
            .unwrap();
        groups.push((depth, Group {
            id: 0,
            slices: members,
            cardinality,
            prunable,
        }));
    }

    // index 0 nearest the output
    groups.sort_by_key(|(depth, g)| (std::cmp::Reverse(*depth), g.slices[0].layer));
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut g))| {
            g.id = i;
            g
        })
        .collect())
}

pub fn prunable_groups(model: &ModelGraph) -> Result<Vec<Group>> {
    Ok(build_groups(model)?
        .into_iter()
        .filter(|g| g.prunable)
        .collect())
}

/// Weight vector of pairing `j`: producer row `j` weights + bias `j` for each
/// producer slice, then consumer column block `j` for each consumer slice.
/// BN slices contribute nothing (they are identity in a folded model).
pub fn pairing_vector(model: &ModelGraph, group: &Group, j: usize) -> Result<Vec<f32>> {
    if j >= group.cardinality {
        return Err(Error::Input(format!(
            "pairing {j} out of range for cardinality {}",
            group.cardinality
        )));
    }
    let mut v = Vec::new();
    for slice in &group.slices {
        let kind = &model.nodes[slice.layer].kind;
        match slice.role {
            AxisRole::ProducerOut => match kind {
                LayerKind::Linear { in_features, weight, bias, .. } => {
                    v.extend_from_slice(&weight.data()[j * in_features..(j + 1) * in_features]);
                    if let Some(b) = bias {
                        v.push(b.data()[j]);
                    }
                }
                LayerKind::Conv2d { in_ch, kernel, weight, bias, .. } => {
                    let row = in_ch * kernel * kernel;
                    v.extend_from_slice(&weight.data()[j * row..(j + 1) * row]);
                    v.push(bias.data()[j]);
                }
                _ => {
                    return Err(Error::Structure(format!(
                        "producer slice on non-affine layer {}",
                        slice.layer
                    )))
                }
            },
            AxisRole::ConsumerIn { block } => match kind {
                LayerKind::Linear { in_features, out_features, weight, .. } => {
                    for o in 0..*out_features {
                        for b in 0..block {
                            v.push(weight.data()[o * in_features + j * block + b]);
                        }
                    }
                }
                LayerKind::Conv2d { in_ch, out_ch, kernel, weight, .. } => {
                    let kk = kernel * kernel;
                    for o in 0..*out_ch {
                        let base = (o * in_ch + j) * kk;
                        v.extend_from_slice(&weight.data()[base..base + kk]);
                    }
                }
                _ => {
                    return Err(Error::Structure(format!(
                        "consumer slice on non-affine layer {}",
                        slice.layer
                    )))
                }
            },
            AxisRole::BnElementwise => {}
        }
    }
    Ok(v)
}

/// All `n` pairing vectors of a group, computed on a BN-folded model.
pub fn pairing_vectors(model_folded: &ModelGraph, group: &Group) -> Result<Vec<Vec<f32>>> {
    (0..group.cardinality)
        .map(|j| pairing_vector(model_folded, group, j))
        .collect()
}

/// Zero out every slice entry of pairing `j` in place (perturbation oracle
/// support and pruning soundness checks).
pub fn zero_pairing(model: &mut ModelGraph, group: &Group, j: usize) {
    for slice in &group.slices {
        let kind = &mut model.nodes[slice.layer].kind;
        match slice.role {
            AxisRole::ProducerOut => match kind {
                LayerKind::Linear { in_features, weight, bias, .. } => {
                    let inf = *in_features;
                    zero_range(weight, j * inf, inf);
                    if let Some(b) = bias {
                        b.data_mut()[j] = 0.0;
                    }
                }
                LayerKind::Conv2d { in_ch, kernel, weight, bias, .. } => {
                    let row = *in_ch * *kernel * *kernel;
                    zero_range(weight, j * row, row);
                    bias.data_mut()[j] = 0.0;
                }
                _ => {}
            },
            AxisRole::ConsumerIn { block } => match kind {
                LayerKind::Linear { in_features, out_features, weight, .. } => {
                    let (inf, outf) = (*in_features, *out_features);
                    for o in 0..outf {
                        zero_range(weight, o * inf + j * block, block);
                    }
                }
                LayerKind::Conv2d { in_ch, out_ch, kernel, weight, .. } => {
                    let kk = *kernel * *kernel;
                    let (ic, oc) = (*in_ch, *out_ch);
                    for o in 0..oc {
                        zero_range(weight, (o * ic + j) * kk, kk);
                    }
                }
                _ => {}
            },
            AxisRole::BnElementwise => {
                if let LayerKind::BatchNorm { gamma, beta, running_mean, running_var, .. } = kind {
                    gamma.data_mut()[j] = 0.0;
                    beta.data_mut()[j] = 0.0;
                    running_mean.data_mut()[j] = 0.0;
                    running_var.data_mut()[j] = 1.0;
                }
            }
        }
    }
}

fn zero_range(t: &mut Tensor, start: usize, len: usize) {
    for v in &mut t.data_mut()[start..start + len] {
        *v = 0.0;
    }
}
