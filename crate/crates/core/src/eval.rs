//! Evaluation: top-1 accuracy, output divergence, model vectorization,
//! pruned-model embedding, loss-landscape planes, and the distribution
//! ablation grid.

use std::collections::BTreeMap;

use crate::dataset::Dataset;
use crate::depgraph::{build_groups, AxisRole};
use crate::error::{Error, Result};
use crate::graph::{forward, LayerKind, ModelGraph};
use crate::importance::{compute_importance, Metric};
use crate::model_io::{count_params, node_params, node_params_mut, ParamCount};
use crate::ot::DistributionMode;
use crate::parallel::map_indexed;
use crate::prune::{fold_batchnorm, intra_fuse, sparsity_to_m, PruneOptions};

pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalRecord {
    pub model_id: String,
    pub dataset_id: String,
    pub accuracy: f64,
    pub divergence: Option<f64>,
    pub params: ParamCount,
    pub neuron_sparsity: f64,
    pub weight_sparsity: f64,
}

fn eval_batches(len: usize) -> Vec<(usize, usize)> {
    (0..len)
        .step_by(EVAL_BATCH)
        .map(|lo| (lo, (lo + EVAL_BATCH).min(len)))
        .collect()
}

/// Top-1 accuracy over the whole dataset; argmax ties go to the lowest
/// class index.
pub fn accuracy(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let ranges = eval_batches(data.len());
    let counts: Vec<Result<usize>> = map_indexed(ranges.len(), |bi| {
        let (lo, hi) = ranges[bi];
        let idx: Vec<usize> = (lo..hi).collect();
        let (x, labels) = data.batch(&idx);
        let logits = forward(model, &x)?;
        let classes = logits.shape()[1];
        let mut hits = 0usize;
        for (s, &label) in labels.iter().enumerate() {
            let row = &logits.data()[s * classes..(s + 1) * classes];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == label {
                hits += 1;
            }
        }
        Ok(hits)
    });
    let mut total = 0usize;
    for c in counts {
        total += c?;
    }
    Ok(total as f64 / data.len() as f64)
}

/// Mean per-sample ℓ2 distance between the two models' logits.
pub fn output_divergence(
    original: &ModelGraph,
    pruned: &ModelGraph,
    data: &Dataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let ranges = eval_batches(data.len());
    let sums: Vec<Result<f64>> = map_indexed(ranges.len(), |bi| {
        let (lo, hi) = ranges[bi];
        let idx: Vec<usize> = (lo..hi).collect();
        let (x, _) = data.batch(&idx);
        let ya = forward(original, &x)?;
        let yb = forward(pruned, &x)?;
        if ya.shape() != yb.shape() {
            return Err(Error::Shape {
                context: "output divergence".into(),
                expected: ya.shape().to_vec(),
                got: yb.shape().to_vec(),
            });
        }
        let classes = ya.shape()[1];
        let mut sum = 0.0f64;
        for s in 0..hi - lo {
            let mut sq = 0.0f64;
            for c in 0..classes {
                let d = ya.data()[s * classes + c] as f64 - yb.data()[s * classes + c] as f64;
                sq += d * d;
            }
            sum += sq.sqrt();
        }
        Ok(sum)
    });
    let mut total = 0.0f64;
    for s in sums {
        total += s?;
    }
    Ok(total / data.len() as f64)
}

/// All parameter tensors concatenated in node/payload order.
pub fn vectorize(model: &ModelGraph) -> Vec<f32> {
    let mut v = Vec::new();
    for node in &model.nodes {
        for (_, t) in node_params(&node.kind) {
            v.extend_from_slice(t.data());
        }
    }
    v
}

/// Write a parameter vector back into a copy of the template architecture.
pub fn devectorize(template: &ModelGraph, v: &[f32]) -> Result<ModelGraph> {
    let mut out = template.clone();
    let mut pos = 0usize;
    for node in &mut out.nodes {
        for (_, t) in node_params_mut(&mut node.kind) {
            let len = t.data().len();
            if pos + len > v.len() {
                return Err(Error::Input(format!(
                    "parameter vector too short: {} for template",
                    v.len()
                )));
            }
            t.data_mut().copy_from_slice(&v[pos..pos + len]);
            pos += len;
        }
    }
    if pos != v.len() {
        return Err(Error::Input(format!(
            "parameter vector length {} vs template {pos}",
            v.len()
        )));
    }
    Ok(out)
}

/// Embed a pruned model back into the original parameter dimension: kept
/// pairings return to their recorded positions, removed positions stay zero
/// and BatchNorm entries become pass-through-zero.
pub fn embed_pruned(
    pruned: &ModelGraph,
    original: &ModelGraph,
    kept: &BTreeMap<usize, Option<Vec<usize>>>,
) -> Result<Vec<f32>> {
    let groups = build_groups(original)?;
    // per-node index maps along the group axes; identity where unpruned
    let mut out_map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut in_map: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();
    let mut bn_map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for g in &groups {
        let indices: Vec<usize> = match kept.get(&g.id) {
            Some(Some(list)) => list.clone(),
            Some(None) => {
                return Err(Error::Unsupported(
                    "model pruned with synthetic targets has no index map".into(),
                ))
            }
            None => (0..g.cardinality).collect(),
        };
        if indices.iter().any(|&j| j >= g.cardinality) {
            return Err(Error::Input(format!(
                "kept index out of range for group {}",
                g.id
            )));
        }
        for s in &g.slices {
            match s.role {
                AxisRole::ProducerOut => {
                    out_map.insert(s.layer, indices.clone());
                }
                AxisRole::ConsumerIn { block } => {
                    in_map.insert(s.layer, (indices.clone(), block));
                }
                AxisRole::BnElementwise => {
                    bn_map.insert(s.layer, indices.clone());
                }
            }
        }
    }

    let mut embedded = zero_filled(original);
    for node in &original.nodes {
        let id = node.id;
        match (&mut embedded.nodes[id].kind, &pruned.nodes[id].kind) {
            (
                LayerKind::Linear {
                    in_features: e_in,
                    weight: ew,
                    bias: eb,
                    ..
                },
                LayerKind::Linear {
                    in_features: p_in,
                    out_features: p_out,
                    weight: pw,
                    bias: pb,
                    ..
                },
            ) => {
                let rows = axis_indices(out_map.get(&id), *p_out);
                let cols = input_indices(in_map.get(&id), *p_in);
                for (t, &ot) in rows.iter().enumerate() {
                    for (u, &ou) in cols.iter().enumerate() {
                        ew.data_mut()[ot * *e_in + ou] = pw.data()[t * *p_in + u];
                    }
                }
                if let (Some(eb), Some(pb)) = (eb, pb) {
                    for (t, &ot) in rows.iter().enumerate() {
                        eb.data_mut()[ot] = pb.data()[t];
                    }
                }
            }
            (
                LayerKind::Conv2d {
                    in_ch: e_in,
                    weight: ew,
                    bias: eb,
                    kernel,
                    ..
                },
                LayerKind::Conv2d {
                    in_ch: p_in,
                    out_ch: p_out,
                    weight: pw,
                    bias: pb,
                    ..
                },
            ) => {
                let kk = *kernel * *kernel;
                let rows = axis_indices(out_map.get(&id), *p_out);
                let cols = axis_indices(bn_none(in_map.get(&id)), *p_in);
                for (t, &ot) in rows.iter().enumerate() {
                    for (u, &ou) in cols.iter().enumerate() {
                        for k in 0..kk {
                            ew.data_mut()[(ot * *e_in + ou) * kk + k] =
                                pw.data()[(t * *p_in + u) * kk + k];
                        }
                    }
                    eb.data_mut()[ot] = pb.data()[t];
                }
            }
            (
                LayerKind::BatchNorm {
                    gamma: eg,
                    beta: ebt,
                    running_mean: em,
                    running_var: ev,
                    ..
                },
                LayerKind::BatchNorm {
                    channels: p_ch,
                    gamma: pg,
                    beta: pbt,
                    running_mean: pm,
                    running_var: pv,
                    ..
                },
            ) => {
                let idxs = axis_indices(bn_map.get(&id), *p_ch);
                for (t, &ot) in idxs.iter().enumerate() {
                    eg.data_mut()[ot] = pg.data()[t];
                    ebt.data_mut()[ot] = pbt.data()[t];
                    em.data_mut()[ot] = pm.data()[t];
                    ev.data_mut()[ot] = pv.data()[t];
                }
            }
            _ => {}
        }
    }
    Ok(vectorize(&embedded))
}

fn axis_indices(map: Option<&Vec<usize>>, pruned_len: usize) -> Vec<usize> {
    match map {
        Some(list) => list.clone(),
        None => (0..pruned_len).collect(),
    }
}

fn bn_none(map: Option<&(Vec<usize>, usize)>) -> Option<&Vec<usize>> {
    map.map(|(list, _)| list)
}

fn input_indices(map: Option<&(Vec<usize>, usize)>, pruned_len: usize) -> Vec<usize> {
    match map {
        Some((list, block)) => list
            .iter()
            .flat_map(|&j| (0..*block).map(move |b| j * block + b))
            .collect(),
        None => (0..pruned_len).collect(),
    }
}

/// The original architecture with every parameter zeroed and BatchNorm set
/// so that un-restored channels pass zero through.
fn zero_filled(original: &ModelGraph) -> ModelGraph {
    let mut out = original.clone();
    for node in &mut out.nodes {
        for (_, t) in node_params_mut(&mut node.kind) {
            t.data_mut().fill(0.0);
        }
        if let LayerKind::BatchNorm {
            running_var,
            epsilon,
            ..
        } = &mut node.kind
        {
            // gamma = 0 silences the channel; variance keeps sqrt well-posed
            running_var.data_mut().fill(1.0 - *epsilon);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LandscapeGrid {
    pub steps: usize,
    pub margin: f32,
    /// (alpha, beta, accuracy) per grid cell, row-major in beta then alpha
    pub cells: Vec<(f32, f32, f64)>,
    /// origin, model A, model B as (alpha, beta, accuracy)
    pub anchors: [(f32, f32, f64); 3],
}

pub const LANDSCAPE_STEPS: usize = 21;
pub const LANDSCAPE_MARGIN: f32 = 0.25;

/// Accuracy over the plane through the origin model and two embedded
/// parameter vectors: u spans origin→A, v̂ the orthogonalized origin→B
/// direction, scaled so B sits at beta = 1.
pub fn landscape_grid(
    origin: &ModelGraph,
    a: &[f32],
    b: &[f32],
    steps: usize,
    margin: f32,
    data: &Dataset,
) -> Result<LandscapeGrid> {
    if steps < 2 {
        return Err(Error::Input("grid needs at least 2 steps per axis".into()));
    }
    let theta0 = vectorize(origin);
    if a.len() != theta0.len() || b.len() != theta0.len() {
        return Err(Error::Input(format!(
            "anchor vectors must have dimension {}",
            theta0.len()
        )));
    }
    let u: Vec<f64> = a
        .iter()
        .zip(&theta0)
        .map(|(&x, &o)| x as f64 - o as f64)
        .collect();
    let w: Vec<f64> = b
        .iter()
        .zip(&theta0)
        .map(|(&x, &o)| x as f64 - o as f64)
        .collect();
    let uu: f64 = u.iter().map(|&x| x * x).sum();
    if uu <= 0.0 {
        return Err(Error::Degenerate("model A coincides with the origin".into()));
    }
    let uw: f64 = u.iter().zip(&w).map(|(&x, &y)| x * y).sum();
    let alpha_b = uw / uu;
    let v: Vec<f64> = w.iter().zip(&u).map(|(&y, &x)| y - alpha_b * x).collect();
    let vv: f64 = v.iter().map(|&x| x * x).sum();
    if vv <= 0.0 {
        return Err(Error::Degenerate(
            "model B lies on the origin–A line; the plane is degenerate".into(),
        ));
    }

    let coords: Vec<f32> = (0..steps)
        .map(|i| -margin + (1.0 + 2.0 * margin) * i as f32 / (steps - 1) as f32)
        .collect();
    let points: Vec<(f32, f32)> = coords
        .iter()
        .flat_map(|&beta| coords.iter().map(move |&alpha| (alpha, beta)))
        .collect();
    let cells: Vec<Result<(f32, f32, f64)>> = map_indexed(points.len(), |i| {
        let (alpha, beta) = points[i];
        let theta: Vec<f32> = theta0
            .iter()
            .enumerate()
            .map(|(k, &o)| (o as f64 + alpha as f64 * u[k] + beta as f64 * v[k]) as f32)
            .collect();
        let model = devectorize(origin, &theta)?;
        Ok((alpha, beta, accuracy(&model, data)?))
    });
    let cells: Vec<(f32, f32, f64)> = cells.into_iter().collect::<Result<_>>()?;

    // anchors evaluated from their exact parameter vectors, same accuracy path
    let acc0 = accuracy(origin, data)?;
    let acc_a = accuracy(&devectorize(origin, a)?, data)?;
    let acc_b = accuracy(&devectorize(origin, b)?, data)?;
    Ok(LandscapeGrid {
        steps,
        margin,
        cells,
        anchors: [
            (0.0, 0.0, acc0),
            (1.0, 0.0, acc_a),
            (alpha_b as f32, 1.0, acc_b),
        ],
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub group: usize,
    pub sparsity: f32,
    pub source: DistributionMode,
    pub target: DistributionMode,
    /// Table-style label: i/u for importance/uniform, T target, S source
    pub label: &'static str,
    pub accuracy: f64,
}

/// Data-free Intra-Fusion accuracy over every source/target distribution
/// combination, per group and sparsity.
pub fn ablation_grid(
    model: &ModelGraph,
    data: &Dataset,
    groups: &[usize],
    sparsities: &[f32],
    metric: Metric,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    const COMBOS: [(DistributionMode, DistributionMode, &str); 4] = [
        (DistributionMode::Uniform, DistributionMode::Uniform, "uTuS"),
        (
            DistributionMode::SumNormalized,
            DistributionMode::Uniform,
            "uTiS",
        ),
        (
            DistributionMode::Uniform,
            DistributionMode::SumNormalized,
            "iTuS",
        ),
        (
            DistributionMode::SumNormalized,
            DistributionMode::SumNormalized,
            "iTiS",
        ),
    ];
    let all = build_groups(model)?;
    let mut rows = Vec::new();
    for &gid in groups {
        let group = all
            .iter()
            .find(|g| g.id == gid && g.prunable)
            .ok_or_else(|| Error::Input(format!("no prunable group {gid}")))?;
        let folded = fold_batchnorm(model)?;
        let importance = compute_importance(metric, model, &folded, group, &[], seed)?;
        for &sparsity in sparsities {
            let m = sparsity_to_m(group.cardinality, sparsity);
            for (source, target, label) in COMBOS {
                let options = PruneOptions {
                    source_dist: source,
                    target_dist: target,
                    degenerate_fallback: true,
                    ..Default::default()
                };
                let fused = intra_fuse(model, group, &importance, m, &options)?;
                rows.push(AblationRow {
                    group: gid,
                    sparsity,
                    source,
                    target,
                    label,
                    accuracy: accuracy(&fused, data)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Accuracy, divergence against a reference, and size statistics in one row.
pub fn eval_record(
    model: &ModelGraph,
    reference: Option<&ModelGraph>,
    data: &Dataset,
    model_id: &str,
    dataset_id: &str,
) -> Result<EvalRecord> {
    let acc = accuracy(model, data)?;
    let divergence = match reference {
        Some(r) => Some(output_divergence(r, model, data)?),
        None => None,
    };
    let params = count_params(model);
    let (neuron_sparsity, weight_sparsity) = match reference {
        Some(r) => {
            let rp = count_params(r);
            let rn = total_neurons(r);
            let pn = total_neurons(model);
            (
                1.0 - pn as f64 / rn as f64,
                1.0 - params.total as f64 / rp.total as f64,
            )
        }
        None => (0.0, 0.0),
    };
    Ok(EvalRecord {
        model_id: model_id.into(),
        dataset_id: dataset_id.into(),
        accuracy: acc,
        divergence,
        params,
        neuron_sparsity,
        weight_sparsity,
    })
}

fn total_neurons(model: &ModelGraph) -> usize {
    model
        .nodes
        .iter()
        .map(|n| match &n.kind {
            LayerKind::Linear { out_features, .. } => *out_features,
            LayerKind::Conv2d { out_ch, .. } => *out_ch,
            _ => 0,
        })
        .sum()
}
