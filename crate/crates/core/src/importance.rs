//! Per-pairing importance scores: ℓp norms, first-order Taylor, a structured
//! LAMP adaptation, and seeded random scores.
//!
//! ℓp and LAMP read the BN-folded model so BN scale is reflected in the
//! pairing weights; Taylor needs gradients and therefore runs on the live
//! model (BN gamma/beta included in its per-pairing sum).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depgraph::{pairing_vectors, AxisRole, Group};
use crate::error::{Error, Result};
use crate::graph::{backward, GradientSet, LayerKind, ModelGraph, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ImportanceVector {
    pub group_id: usize,
    pub scores: Vec<f32>,
    pub metric: String,
    pub seed: Option<u64>,
}

impl ImportanceVector {
    fn check(self, group: &Group) -> Result<Self> {
        if self.scores.len() != group.cardinality {
            return Err(Error::Input(format!(
                "importance length {} vs group cardinality {}",
                self.scores.len(),
                group.cardinality
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Input("importance scores must be finite and >= 0".into()));
        }
        Ok(self)
    }
}

/// score_j = ℓp norm of pairing vector j, on the folded model.
pub fn lp_norm_importance(model_folded: &ModelGraph, group: &Group, p: f32) -> Result<ImportanceVector> {
    if p < 1.0 {
        return Err(Error::Input(format!("lp norm requires p >= 1, got {p}")));
    }
    let vectors = pairing_vectors(model_folded, group)?;
    let scores = vectors
        .iter()
        .map(|v| {
            let sum: f64 = v.iter().map(|&x| (x.abs() as f64).powf(p as f64)).sum();
            sum.powf(1.0 / p as f64) as f32
        })
        .collect();
    ImportanceVector {
        group_id: group.id,
        scores,
        metric: format!("l{p}"),
        seed: None,
    }
    .check(group)
}

/// Squared-ℓ2 base scores with suffix-sum normalization:
/// score_j = s_j / Σ_{k: s_k >= s_j} s_k.
pub fn lamp_importance(model_folded: &ModelGraph, group: &Group) -> Result<ImportanceVector> {
    let vectors = pairing_vectors(model_folded, group)?;
    let base: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|&x| (x as f64) * (x as f64)).sum())
        .collect();
    let scores = base
        .iter()
        .map(|&s| {
            if s == 0.0 {
                return 0.0;
            }
            let denom: f64 = base.iter().filter(|&&k| k >= s).sum();
            (s / denom) as f32
        })
        .collect();
    ImportanceVector {
        group_id: group.id,
        scores,
        metric: "lamp".into(),
        seed: None,
    }
    .check(group)
}

/// score_j = Σ_batches Σ_{w in pairing j} |w · dL/dw|, on the live model.
pub fn taylor_importance(
    model: &ModelGraph,
    group: &Group,
    calibration: &[(Tensor, Vec<usize>)],
) -> Result<ImportanceVector> {
    if calibration.is_empty() {
        return Err(Error::Input("taylor importance needs calibration batches".into()));
    }
    let mut scores = vec![0.0f64; group.cardinality];
    for (batch, labels) in calibration {
        let grads = backward(model, batch, labels)?;
        for (j, acc) in scores.iter_mut().enumerate() {
            *acc += taylor_pairing_sum(model, &grads, group, j);
        }
    }
    ImportanceVector {
        group_id: group.id,
        scores: scores.into_iter().map(|s| s as f32).collect(),
        metric: "taylor".into(),
        seed: None,
    }
    .check(group)
}

/// Σ |w·g| over every weight of pairing `j` across the group's slices.
pub fn taylor_pairing_sum(
    model: &ModelGraph,
    grads: &GradientSet,
    group: &Group,
    j: usize,
) -> f64 {
    let mut acc = 0.0f64;
    let mut add = |w: f32, g: f32| acc += (w as f64 * g as f64).abs();
    for slice in &group.slices {
        let kind = &model.nodes[slice.layer].kind;
        match slice.role {
            AxisRole::ProducerOut => match kind {
                LayerKind::Linear { in_features, weight, bias, .. } => {
                    let gw = &grads[&(slice.layer, Param::Weight)];
                    for k in j * in_features..(j + 1) * in_features {
                        add(weight.data()[k], gw.data()[k]);
                    }
                    if let Some(b) = bias {
                        let gb = &grads[&(slice.layer, Param::Bias)];
                        add(b.data()[j], gb.data()[j]);
                    }
                }
                LayerKind::Conv2d { in_ch, kernel, weight, bias, .. } => {
                    let row = in_ch * kernel * kernel;
                    let gw = &grads[&(slice.layer, Param::Weight)];
                    for k in j * row..(j + 1) * row {
                        add(weight.data()[k], gw.data()[k]);
                    }
                    let gb = &grads[&(slice.layer, Param::Bias)];
                    add(bias.data()[j], gb.data()[j]);
                }
                _ => {}
            },
            AxisRole::ConsumerIn { block } => match kind {
                LayerKind::Linear { in_features, out_features, weight, .. } => {
                    let gw = &grads[&(slice.layer, Param::Weight)];
                    for o in 0..*out_features {
                        for b in 0..block {
                            let k = o * in_features + j * block + b;
                            add(weight.data()[k], gw.data()[k]);
                        }
                    }
                }
                LayerKind::Conv2d { in_ch, out_ch, kernel, weight, .. } => {
                    let kk = kernel * kernel;
                    let gw = &grads[&(slice.layer, Param::Weight)];
                    for o in 0..*out_ch {
                        let base = (o * in_ch + j) * kk;
                        for k in base..base + kk {
                            add(weight.data()[k], gw.data()[k]);
                        }
                    }
                }
                _ => {}
            },
            AxisRole::BnElementwise => {
                if let LayerKind::BatchNorm { gamma, beta, .. } = kind {
                    let gg = &grads[&(slice.layer, Param::Gamma)];
                    let gb = &grads[&(slice.layer, Param::Beta)];
                    add(gamma.data()[j], gg.data()[j]);
                    add(beta.data()[j], gb.data()[j]);
                }
            }
        }
    }
    acc
}

/// I.i.d. uniform [0,1) scores, reproducible from the seed.
pub fn random_importance(group: &Group, seed: u64) -> Result<ImportanceVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..group.cardinality).map(|_| rng.gen::<f32>()).collect();
    ImportanceVector {
        group_id: group.id,
        scores,
        metric: "random".into(),
        seed: Some(seed),
    }
    .check(group)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    L1,
    L2,
    Taylor,
    Lamp,
    Random,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "l1" => Metric::L1,
            "l2" => Metric::L2,
            "taylor" => Metric::Taylor,
            "lamp" => Metric::Lamp,
            "random" => Metric::Random,
            _ => return Err(Error::Input(format!("unknown importance metric '{s}'"))),
        })
    }
}

/// Dispatch on the metric. `model_folded` feeds ℓp/LAMP, `model` feeds
/// Taylor, `seed`/`calibration` apply to random/taylor respectively.
pub fn compute_importance(
    metric: Metric,
    model: &ModelGraph,
    model_folded: &ModelGraph,
    group: &Group,
    calibration: &[(Tensor, Vec<usize>)],
    seed: u64,
) -> Result<ImportanceVector> {
    match metric {
        Metric::L1 => lp_norm_importance(model_folded, group, 1.0),
        Metric::L2 => lp_norm_importance(model_folded, group, 2.0),
        Metric::Taylor => taylor_importance(model, group, calibration),
        Metric::Lamp => lamp_importance(model_folded, group),
        Metric::Random => random_importance(group, seed),
    }
}
