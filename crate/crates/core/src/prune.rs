//! The two meta-pruning procedures: conventional top-m pruning and
//! intra-group fusion via optimal transport, plus BN folding and target
//! selection. Both produce structurally identical (smaller) graphs; only the
//! surviving values differ.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::depgraph::{build_groups, pairing_vectors, AxisRole, Group};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, NodeId};
use crate::importance::{compute_importance, ImportanceVector, Metric};
use crate::kmeans;
use crate::model_io::count_params;
use crate::ot::{
    cost_matrix, make_distribution, normalize_transport, solve_ot, DistributionMode,
    NormalizedTransport, TransportPlan,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Targets are the m kept pairings of conventional pruning (default).
    TopM,
    /// Targets are k-means centroids of the pairing vectors.
    KMeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsumerAgg {
    /// Consumers aggregated with the same row-stochastic map as producers.
    PaperLiteral,
    /// Consumer columns weighted by unnormalized transport mass times n;
    /// makes merging exact duplicates function-preserving.
    MassSum,
}

#[derive(Debug, Clone)]
pub struct PruneOptions {
    pub target_mode: TargetMode,
    pub source_dist: DistributionMode,
    pub target_dist: DistributionMode,
    pub consumer_agg: ConsumerAgg,
    /// Fall back to uniform marginals when importance sums to zero.
    pub degenerate_fallback: bool,
    pub kmeans_seed: u64,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            target_mode: TargetMode::TopM,
            source_dist: DistributionMode::Uniform,
            target_dist: DistributionMode::Uniform,
            consumer_agg: ConsumerAgg::PaperLiteral,
            degenerate_fallback: false,
            kmeans_seed: 0,
        }
    }
}

impl PruneOptions {
    /// The configuration that performs best in practice: both marginals
    /// informed by importance and exact mass-sum consumer aggregation.
    /// Degenerate (all-zero) importance falls back to uniform marginals so
    /// long pipelines never abort mid-run.
    pub fn recommended() -> Self {
        Self {
            source_dist: DistributionMode::SumNormalized,
            target_dist: DistributionMode::SumNormalized,
            consumer_agg: ConsumerAgg::MassSum,
            degenerate_fallback: true,
            ..Self::default()
        }
    }
}

/// `m = max(1, round(n * (1 - sparsity)))`.
pub fn sparsity_to_m(n: usize, sparsity: f32) -> usize {
    ((n as f32 * (1.0 - sparsity)).round() as usize).clamp(1, n)
}

/// Fold every BatchNorm into its affine producer:
/// `w <- w * gamma / sqrt(var + eps)`, `b <- (b - mean) * scale + beta`,
/// then reset the BN to identity. Forward outputs are preserved.
pub fn fold_batchnorm(model: &ModelGraph) -> Result<ModelGraph> {
    let mut folded = model.clone();
    let bn_ids: Vec<NodeId> = folded
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::BatchNorm { .. }))
        .map(|n| n.id)
        .collect();
    for id in bn_ids {
        let producers = folded.producers(id);
        let prod = match producers.as_slice() {
            [p] => *p,
            _ => {
                return Err(Error::Unsupported(format!(
                    "batchnorm {id} needs exactly one producer"
                )))
            }
        };
        let (scale, shift, channels) = {
            let (gamma, beta, mean, var, eps) = match &folded.nodes[id].kind {
                LayerKind::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                    ..
                } => (gamma, beta, running_mean, running_var, *epsilon),
                _ => unreachable!(),
            };
            let c = gamma.len();
            let scale: Vec<f32> = (0..c)
                .map(|i| gamma.data()[i] / (var.data()[i] + eps).sqrt())
                .collect();
            let shift: Vec<f32> = (0..c)
                .map(|i| beta.data()[i] - mean.data()[i] * scale[i])
                .collect();
            (scale, shift, c)
        };
        match &mut folded.nodes[prod].kind {
            LayerKind::Linear {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                if *out_features != channels {
                    return Err(Error::Structure(format!(
                        "batchnorm {id} channels vs producer {prod} outputs"
                    )));
                }
                let b = bias.as_mut().ok_or_else(|| {
                    Error::Unsupported(format!("batchnorm {id} after bias-free linear {prod}"))
                })?;
                for o in 0..*out_features {
                    for k in 0..*in_features {
                        weight.data_mut()[o * *in_features + k] *= scale[o];
                    }
                    let bo = &mut b.data_mut()[o];
                    *bo = *bo * scale[o] + shift[o];
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
                if *out_ch != channels {
                    return Err(Error::Structure(format!(
                        "batchnorm {id} channels vs producer {prod} outputs"
                    )));
                }
                let row = *in_ch * *kernel * *kernel;
                for o in 0..*out_ch {
                    for k in 0..row {
                        weight.data_mut()[o * row + k] *= scale[o];
                    }
                    let bo = &mut bias.data_mut()[o];
                    *bo = *bo * scale[o] + shift[o];
                }
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "batchnorm {id} follows non-affine layer {prod} ({})",
                    other.name()
                )))
            }
        }
        if let LayerKind::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon,
            ..
        } = &mut folded.nodes[id].kind
        {
            let eps = *epsilon;
            for i in 0..channels {
                gamma.data_mut()[i] = 1.0;
                beta.data_mut()[i] = 0.0;
                running_mean.data_mut()[i] = 0.0;
                running_var.data_mut()[i] = 1.0 - eps;
            }
        }
    }
    Ok(folded)
}

/// Indices of the m highest-importance pairings, ascending; ties at the
/// threshold keep the lower index so exactly m survive.
pub fn top_m_indices(scores: &[f32], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(m).collect();
    kept.sort_unstable();
    kept
}

fn check_group(group: &Group, importance: &ImportanceVector, m: usize) -> Result<()> {
    if !group.prunable {
        return Err(Error::Input(format!("group {} is not prunable", group.id)));
    }
    if m == 0 || m > group.cardinality {
        return Err(Error::Input(format!(
            "target cardinality {m} outside 1..={}",
            group.cardinality
        )));
    }
    if importance.scores.len() != group.cardinality {
        return Err(Error::Input(format!(
            "importance length {} vs cardinality {}",
            importance.scores.len(),
            group.cardinality
        )));
    }
    Ok(())
}

/// Keep the m highest-importance pairings, remove the rest across every slice.
pub fn conventional_prune(
    model: &ModelGraph,
    group: &Group,
    importance: &ImportanceVector,
    m: usize,
) -> Result<ModelGraph> {
    check_group(group, importance, m)?;
    let kept = top_m_indices(&importance.scores, m);
    let mut selection = vec![0.0f64; m * group.cardinality];
    for (t, &j) in kept.iter().enumerate() {
        selection[t * group.cardinality + j] = 1.0;
    }
    apply_group_map(model, group, &selection, &selection, m)
}

#[derive(Debug, Clone)]
pub struct TargetSelection {
    pub vectors: Vec<Vec<f32>>,
    /// Per-target importance for importance-informed target marginals.
    pub importance: Vec<f32>,
    /// Original pairing indices of the targets (top-m mode only).
    pub kept: Option<Vec<usize>>,
}

/// Choose the m fusion targets for a group of a folded model.
pub fn select_target(
    model_folded: &ModelGraph,
    group: &Group,
    importance: &ImportanceVector,
    m: usize,
    mode: TargetMode,
    kmeans_seed: u64,
) -> Result<TargetSelection> {
    check_group(group, importance, m)?;
    let vectors = pairing_vectors(model_folded, group)?;
    match mode {
        TargetMode::TopM => {
            let kept = top_m_indices(&importance.scores, m);
            Ok(TargetSelection {
                vectors: kept.iter().map(|&j| vectors[j].clone()).collect(),
                importance: kept.iter().map(|&j| importance.scores[j]).collect(),
                kept: Some(kept),
            })
        }
        TargetMode::KMeans => {
            let centroids = kmeans::kmeans(&vectors, m, kmeans_seed)?;
            let members = kmeans::assign(&vectors, &centroids);
            // cluster mass = sum of member importances
            let mut mass = vec![0.0f32; m];
            for (j, &c) in members.iter().enumerate() {
                mass[c] += importance.scores[j];
            }
            Ok(TargetSelection {
                vectors: centroids,
                importance: mass,
                kept: None,
            })
        }
    }
}

#[derive(Debug)]
pub struct FusionDetail {
    pub plan: TransportPlan,
    pub map: NormalizedTransport,
    pub kept: Option<Vec<usize>>,
}

/// Merge a group's n pairings into m fused pairings via an exact OT plan.
pub fn intra_fuse(
    model: &ModelGraph,
    group: &Group,
    importance: &ImportanceVector,
    m: usize,
    options: &PruneOptions,
) -> Result<ModelGraph> {
    intra_fuse_detailed(model, group, importance, m, options).map(|(g, _)| g)
}

pub fn intra_fuse_detailed(
    model: &ModelGraph,
    group: &Group,
    importance: &ImportanceVector,
    m: usize,
    options: &PruneOptions,
) -> Result<(ModelGraph, FusionDetail)> {
    check_group(group, importance, m)?;
    let folded = fold_batchnorm(model)?;
    let n = group.cardinality;
    let sources = pairing_vectors(&folded, group)?;
    let target = select_target(&folded, group, importance, m, options.target_mode, options.kmeans_seed)?;
    let cost = cost_matrix(&sources, &target.vectors)?;
    let mu = make_distribution(
        n,
        Some(&importance.scores),
        options.source_dist,
        options.degenerate_fallback,
    )?;
    let nu = make_distribution(
        m,
        Some(&target.importance),
        options.target_dist,
        options.degenerate_fallback,
    )?;
    let plan = solve_ot(&mu, &nu, &cost)?;
    let map = normalize_transport(&plan)?;

    let consumer: Vec<f64> = match options.consumer_agg {
        ConsumerAgg::PaperLiteral => map.rows.clone(),
        ConsumerAgg::MassSum => {
            let mut a = vec![0.0f64; m * n];
            for t in 0..m {
                for j in 0..n {
                    a[t * n + j] = plan.at(j, t) * n as f64;
                }
            }
            a
        }
    };
    let fused = apply_group_map(&folded, group, &map.rows, &consumer, m)?;
    Ok((fused, FusionDetail { plan, map, kept: target.kept }))
}

/// Rebuild the model with the group's n-sized axis replaced by m entries:
/// producer rows/bias are `producer_map · old`, consumer column blocks are
/// `consumer_map · old`, BN entries become identity of length m.
pub(crate) fn apply_group_map(
    model: &ModelGraph,
    group: &Group,
    producer_map: &[f64], // m×n row-major
    consumer_map: &[f64], // m×n row-major
    m: usize,
) -> Result<ModelGraph> {
    let n = group.cardinality;
    let mut out = model.clone();
    for slice in &group.slices {
        let kind = &mut out.nodes[slice.layer].kind;
        match slice.role {
            AxisRole::ProducerOut => match kind {
                LayerKind::Linear {
                    in_features,
                    out_features,
                    weight,
                    bias,
                } => {
                    let inf = *in_features;
                    let mut w = vec![0.0f32; m * inf];
                    for t in 0..m {
                        for j in 0..n {
                            let c = producer_map[t * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            for k in 0..inf {
                                w[t * inf + k] += (c * weight.data()[j * inf + k] as f64) as f32;
                            }
                        }
                    }
                    *weight = Tensor::new(vec![m, inf], w)?;
                    if let Some(b) = bias {
                        *b = map_vector(producer_map, m, n, b.data())?;
                    }
                    *out_features = m;
                }
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    weight,
                    bias,
                    ..
                } => {
                    let row = *in_ch * *kernel * *kernel;
                    let mut w = vec![0.0f32; m * row];
                    for t in 0..m {
                        for j in 0..n {
                            let c = producer_map[t * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            for k in 0..row {
                                w[t * row + k] += (c * weight.data()[j * row + k] as f64) as f32;
                            }
                        }
                    }
                    *weight = Tensor::new(vec![m, *in_ch, *kernel, *kernel], w)?;
                    *bias = map_vector(producer_map, m, n, bias.data())?;
                    *out_ch = m;
                }
                _ => unreachable!("producer slice on non-affine layer"),
            },
            AxisRole::ConsumerIn { block } => match kind {
                LayerKind::Linear {
                    in_features,
                    out_features,
                    weight,
                    ..
                } => {
                    let inf = *in_features;
                    let outf = *out_features;
                    let new_inf = m * block;
                    let mut w = vec![0.0f32; outf * new_inf];
                    for o in 0..outf {
                        for t in 0..m {
                            for j in 0..n {
                                let c = consumer_map[t * n + j];
                                if c == 0.0 {
                                    continue;
                                }
                                for b in 0..block {
                                    w[o * new_inf + t * block + b] +=
                                        (c * weight.data()[o * inf + j * block + b] as f64) as f32;
                                }
                            }
                        }
                    }
                    *weight = Tensor::new(vec![outf, new_inf], w)?;
                    *in_features = new_inf;
                }
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    weight,
                    ..
                } => {
                    let kk = *kernel * *kernel;
                    let (ic, oc) = (*in_ch, *out_ch);
                    let mut w = vec![0.0f32; oc * m * kk];
                    for o in 0..oc {
                        for t in 0..m {
                            for j in 0..n {
                                let c = consumer_map[t * n + j];
                                if c == 0.0 {
                                    continue;
                                }
                                for k in 0..kk {
                                    w[(o * m + t) * kk + k] +=
                                        (c * weight.data()[(o * ic + j) * kk + k] as f64) as f32;
                                }
                            }
                        }
                    }
                    *weight = Tensor::new(vec![oc, m, *kernel, *kernel], w)?;
                    *in_ch = m;
                }
                _ => unreachable!("consumer slice on non-affine layer"),
            },
            AxisRole::BnElementwise => {
                if let LayerKind::BatchNorm {
                    channels,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    epsilon,
                } = kind
                {
                    // selection matrices pick entries; fused groups are folded
                    // beforehand, where every entry is identity anyway
                    *gamma = map_vector(producer_map, m, n, gamma.data())?;
                    *beta = map_vector(producer_map, m, n, beta.data())?;
                    *running_mean = map_vector(producer_map, m, n, running_mean.data())?;
                    let eps = *epsilon;
                    let var = map_vector(producer_map, m, n, running_var.data())?;
                    let data = var
                        .data()
                        .iter()
                        .map(|&v| v.max(-eps + f32::EPSILON))
                        .collect();
                    *running_var = Tensor::new(vec![m], data)?;
                    *channels = m;
                }
            }
        }
    }
    out.validate()?;
    Ok(out)
}

fn map_vector(map: &[f64], m: usize, n: usize, v: &[f32]) -> Result<Tensor> {
    let mut out = vec![0.0f32; m];
    for t in 0..m {
        let mut acc = 0.0f64;
        for j in 0..n {
            acc += map[t * n + j] * v[j] as f64;
        }
        out[t] = acc as f32;
    }
    Tensor::new(vec![m], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Conventional,
    IntraFusion,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conventional" => Method::Conventional,
            "intra-fusion" => Method::IntraFusion,
            _ => return Err(Error::Input(format!("unknown method '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupPrune {
    pub group_id: usize,
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PruneReport {
    pub method: String,
    pub metric: String,
    pub neuron_sparsity: f32,
    pub groups: Vec<GroupPrune>,
    pub params_before: usize,
    pub params_after: usize,
    pub weight_sparsity: f32,
}

#[derive(Debug)]
pub struct PruneOutcome {
    pub model: ModelGraph,
    pub report: PruneReport,
    /// Surviving/target original indices per group (absent for k-means targets).
    pub kept: BTreeMap<usize, Option<Vec<usize>>>,
}

/// Apply one method to every prunable group at a uniform neuron sparsity.
#[allow(clippy::too_many_arguments)]
pub fn prune_all_groups(
    model: &ModelGraph,
    sparsity: f32,
    method: Method,
    metric: Metric,
    options: &PruneOptions,
    calibration: &[(Tensor, Vec<usize>)],
    seed: u64,
) -> Result<PruneOutcome> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Input(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let params_before = count_params(model).total;
    let group_ids: Vec<usize> = build_groups(model)?
        .iter()
        .filter(|g| g.prunable)
        .map(|g| g.id)
        .collect();

    let mut current = model.clone();
    let mut report_groups = Vec::new();
    let mut kept = BTreeMap::new();
    for gid in group_ids {
        // group slices reference layer dims of the evolving model
        let groups = build_groups(&current)?;
        let group = groups
            .iter()
            .find(|g| g.id == gid)
            .ok_or_else(|| Error::Structure(format!("group {gid} vanished while pruning")))?;
        let n = group.cardinality;
        let m = sparsity_to_m(n, sparsity);
        let folded = fold_batchnorm(&current)?;
        let importance = compute_importance(metric, &current, &folded, group, calibration, seed)?;
        match method {
            Method::Conventional => {
                let k = top_m_indices(&importance.scores, m);
                current = conventional_prune(&current, group, &importance, m)?;
                kept.insert(gid, Some(k));
            }
            Method::IntraFusion => {
                let (fused, detail) = intra_fuse_detailed(&current, group, &importance, m, options)?;
                current = fused;
                kept.insert(gid, detail.kept);
            }
        }
        report_groups.push(GroupPrune { group_id: gid, n, m });
    }
    let params_after = count_params(&current).total;
    let report = PruneReport {
        method: match method {
            Method::Conventional => "conventional".into(),
            Method::IntraFusion => "intra-fusion".into(),
        },
        metric: format!("{metric:?}").to_lowercase(),
        neuron_sparsity: sparsity,
        groups: report_groups,
        params_before,
        params_after,
        weight_sparsity: 1.0 - params_after as f32 / params_before as f32,
    };
    Ok(PruneOutcome {
        model: current,
        report,
        kept,
    })
}
