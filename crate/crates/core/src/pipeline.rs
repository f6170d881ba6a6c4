//! Training, fine-tuning, split-data plans, and the PaF / FaP / whole-data
//! pipelines.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{fuse_models, FusionCost, FusionSpec};
use crate::graph::{
    backward_from_cache, forward_cached, loss_cross_entropy, update_bn_stats, ModelGraph, NodeId,
    Param,
};
use crate::importance::Metric;
use crate::model_io::node_params_mut;
use crate::parallel::map_indexed;
use crate::prune::{prune_all_groups, Method, PruneOptions};

pub const DEFAULT_BATCH: usize = 128;
pub const DEFAULT_MOMENTUM: f32 = 0.9;
pub const TRAIN_BASE_LR: f32 = 0.05;
pub const FINETUNE_BASE_LR: f32 = 0.01;
const BN_STATS_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f32,
    pub base_lr: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn training(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: DEFAULT_BATCH,
            momentum: DEFAULT_MOMENTUM,
            base_lr: TRAIN_BASE_LR,
            seed,
        }
    }

    pub fn finetuning(epochs: usize, seed: u64) -> Self {
        Self {
            base_lr: FINETUNE_BASE_LR,
            ..Self::training(epochs, seed)
        }
    }

    /// Stepped schedule: base · 0.5^⌊epoch/30⌋.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.base_lr * 0.5f32.powi((epoch / 30) as i32)
    }

    fn check(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Input(format!("base LR {} must be > 0", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub lr: f32,
    /// mean cross-entropy over the epoch's batches
    pub loss: f64,
    /// running top-1 accuracy over the training pass
    pub accuracy: f64,
}

/// SGD with momentum under the stepped LR schedule; BatchNorm running stats
/// follow the batches. `epochs == 0` returns the model unchanged.
pub fn train(
    model: &ModelGraph,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelGraph, Vec<EpochTrace>)> {
    config.check()?;
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut current = model.clone();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut velocity: BTreeMap<(NodeId, Param), Vec<f32>> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let order = {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            idx
        };
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        let mut hits = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = data.batch(chunk);
            let cache = forward_cached(&current, &x)?;
            let logits = &cache.activations[current.output];
            loss_sum += loss_cross_entropy(logits, &labels)? as f64;
            batches += 1;
            let classes = logits.shape()[1];
            for (s, &label) in labels.iter().enumerate() {
                let row = &logits.data()[s * classes..(s + 1) * classes];
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                if best == label {
                    hits += 1;
                }
            }
            let grads = backward_from_cache(&current, &cache, &labels)?;
            update_bn_stats(&mut current, &cache, BN_STATS_MOMENTUM);
            for node in &mut current.nodes {
                let id = node.id;
                for (param, t) in node_params_mut(&mut node.kind) {
                    let Some(g) = grads.get(&(id, param)) else {
                        continue;
                    };
                    let v = velocity
                        .entry((id, param))
                        .or_insert_with(|| vec![0.0; t.data().len()]);
                    for ((w, vel), &gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data())
                    {
                        *vel = config.momentum * *vel + gi;
                        *w -= lr * *vel;
                    }
                }
            }
        }
        trace.push(EpochTrace {
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            accuracy: hits as f64 / data.len() as f64,
        });
    }
    Ok((current, trace))
}

pub fn finetune(
    model: &ModelGraph,
    data: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<(ModelGraph, Vec<EpochTrace>)> {
    train(model, data, &TrainConfig::finetuning(epochs, seed))
}

#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub k: usize,
    /// k disjoint index sets covering the training data
    pub subsets: Vec<Vec<usize>>,
    /// all C(k, k/2) unions of k/2 subsets, lexicographic in subset ids
    pub training_sets: Vec<Vec<usize>>,
}

/// Seeded shuffle, contiguous partition into k subsets (remainder spread
/// round-robin), then every union of k/2 subsets.
pub fn make_split_plan(len: usize, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::Input(format!("k = {k}; need an even k >= 2")));
    }
    if len < k {
        return Err(Error::Input(format!("{len} examples cannot fill {k} subsets")));
    }
    let order = shuffled_indices(len, seed);
    let base = len / k;
    let rem = len % k;
    let mut subsets = Vec::with_capacity(k);
    let mut pos = 0usize;
    for p in 0..k {
        let size = base + usize::from(p < rem);
        subsets.push(order[pos..pos + size].to_vec());
        pos += size;
    }
    let mut training_sets = Vec::new();
    for combo in combinations(k, k / 2) {
        let mut set = Vec::new();
        for &p in &combo {
            set.extend_from_slice(&subsets[p]);
        }
        training_sets.push(set);
    }
    Ok(SplitPlan {
        k,
        subsets,
        training_sets,
    })
}

fn combinations(k: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(r);
    fn rec(start: usize, k: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for p in start..k {
            cur.push(p);
            rec(p + 1, k, r, cur, out);
            cur.pop();
        }
    }
    rec(0, k, r, &mut cur, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    Whole,
    Paf,
    Fap,
}

impl std::str::FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(Self::Whole),
            "paf" => Ok(Self::Paf),
            "fap" => Ok(Self::Fap),
            other => Err(Error::Input(format!("unknown pipeline mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub k: usize,
    pub sparsity: f32,
    /// iterative pruning: `steps` rounds, each followed by `step_epochs` of
    /// fine-tuning
    pub steps: usize,
    pub step_epochs: usize,
    pub train_epochs: usize,
    pub finetune_epochs: usize,
    pub fuse_cost: FusionCost,
    pub fuse_samples: usize,
    pub metric: Metric,
    pub options: PruneOptions,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Whole,
            k: 2,
            sparsity: 0.5,
            steps: 4,
            step_epochs: 1,
            train_epochs: 10,
            finetune_epochs: 5,
            fuse_cost: FusionCost::Activation,
            fuse_samples: 200,
            metric: Metric::L1,
            options: PruneOptions::recommended(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StageRecord {
    pub stage: String,
    pub model_id: String,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub model: ModelGraph,
    pub stages: Vec<StageRecord>,
}

pub fn run_pipeline(
    template: &ModelGraph,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome> {
    match cfg.mode {
        PipelineMode::Whole => whole_pipeline(template, train_data, test_data, cfg),
        PipelineMode::Paf => paf(template, train_data, test_data, cfg),
        PipelineMode::Fap => fap(template, train_data, test_data, cfg),
    }
}

fn stage_record(
    stage: &str,
    model_id: &str,
    model: &ModelGraph,
    test_data: &Dataset,
    started: Instant,
) -> Result<StageRecord> {
    Ok(StageRecord {
        stage: stage.into(),
        model_id: model_id.into(),
        accuracy: crate::eval::accuracy(model, test_data)?,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Per-step sparsity so that `steps` rounds compound to the overall target.
fn step_sparsity(sparsity: f32, steps: usize) -> f32 {
    1.0 - (1.0 - sparsity).powf(1.0 / steps.max(1) as f32)
}

/// Iterative Intra-Fusion: prune a step, fine-tune, repeat.
fn iterative_prune(
    model: &ModelGraph,
    data: &Dataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<ModelGraph> {
    let per_step = step_sparsity(cfg.sparsity, cfg.steps);
    let mut current = model.clone();
    for step in 0..cfg.steps {
        let outcome = prune_all_groups(
            &current,
            per_step,
            Method::IntraFusion,
            cfg.metric,
            &cfg.options,
            &[],
            seed,
        )?;
        current = outcome.model;
        let (tuned, _) = finetune(&current, data, cfg.step_epochs, seed + step as u64)?;
        current = tuned;
    }
    Ok(current)
}

fn fuse_trained(
    models: &[ModelGraph],
    train_data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<ModelGraph> {
    let anchor = &models[0];
    let others: Vec<&ModelGraph> = models[1..].iter().collect();
    let weights = vec![1.0 / models.len() as f32; models.len()];
    let spec = FusionSpec {
        anchor,
        others,
        weights,
        cost: cfg.fuse_cost,
        samples: cfg.fuse_samples,
    };
    let calibration = match cfg.fuse_cost {
        FusionCost::Weight => None,
        FusionCost::Activation => {
            let count = cfg.fuse_samples.min(train_data.len());
            let idx: Vec<usize> = (0..count).collect();
            Some(train_data.batch(&idx).0)
        }
    };
    let spec = FusionSpec {
        samples: calibration
            .as_ref()
            .map(|c| c.shape()[0])
            .unwrap_or(spec.samples),
        ..spec
    };
    fuse_models(&spec, calibration.as_ref())
}

fn train_splits(
    template: &ModelGraph,
    train_data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<(Vec<ModelGraph>, Vec<Dataset>)> {
    let plan = make_split_plan(train_data.len(), cfg.k, cfg.seed)?;
    let splits: Vec<Dataset> = plan
        .training_sets
        .iter()
        .map(|idx| train_data.subset(idx))
        .collect();
    let trained: Vec<Result<ModelGraph>> = map_indexed(splits.len(), |i| {
        let mut model = template.clone();
        crate::arch::init_params(&mut model, cfg.seed.wrapping_add(1 + i as u64));
        let config = TrainConfig::training(cfg.train_epochs, cfg.seed.wrapping_add(100 + i as u64));
        train(&model, &splits[i], &config).map(|(m, _)| m)
    });
    let trained: Vec<ModelGraph> = trained.into_iter().collect::<Result<_>>()?;
    Ok((trained, splits))
}

fn whole_pipeline(
    template: &ModelGraph,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome> {
    let mut stages = Vec::new();
    let t = Instant::now();
    let mut model = template.clone();
    crate::arch::init_params(&mut model, cfg.seed.wrapping_add(1));
    let (trained, _) = train(
        &model,
        train_data,
        &TrainConfig::training(cfg.train_epochs, cfg.seed.wrapping_add(100)),
    )?;
    stages.push(stage_record("train", "whole", &trained, test_data, t)?);

    let t = Instant::now();
    let pruned = iterative_prune(&trained, train_data, cfg, cfg.seed)?;
    stages.push(stage_record("prune", "whole", &pruned, test_data, t)?);

    let t = Instant::now();
    let (tuned, _) = finetune(&pruned, train_data, cfg.finetune_epochs, cfg.seed)?;
    stages.push(stage_record("finetune", "whole", &tuned, test_data, t)?);
    Ok(PipelineOutcome {
        model: tuned,
        stages,
    })
}

/// Prune-and-Fuse: train per split, Intra-Fusion-prune each, fuse, fine-tune.
fn paf(
    template: &ModelGraph,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome> {
    let mut stages = Vec::new();
    let t = Instant::now();
    let (trained, splits) = train_splits(template, train_data, cfg)?;
    for (i, m) in trained.iter().enumerate() {
        stages.push(stage_record("train", &format!("split-{i}"), m, test_data, t)?);
    }

    let t = Instant::now();
    let pruned: Vec<Result<ModelGraph>> = map_indexed(trained.len(), |i| {
        iterative_prune(&trained[i], &splits[i], cfg, cfg.seed.wrapping_add(i as u64))
    });
    let pruned: Vec<ModelGraph> = pruned.into_iter().collect::<Result<_>>()?;
    for (i, m) in pruned.iter().enumerate() {
        stages.push(stage_record("prune", &format!("split-{i}"), m, test_data, t)?);
    }

    let t = Instant::now();
    let fused = fuse_trained(&pruned, train_data, cfg)?;
    stages.push(stage_record("fuse", "fused", &fused, test_data, t)?);

    let t = Instant::now();
    let (tuned, _) = finetune(&fused, train_data, cfg.finetune_epochs, cfg.seed)?;
    stages.push(stage_record("finetune", "final", &tuned, test_data, t)?);
    Ok(PipelineOutcome {
        model: tuned,
        stages,
    })
}

/// Fuse-and-Prune: train per split, fuse, fine-tune, prune, fine-tune.
fn fap(
    template: &ModelGraph,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome> {
    let mut stages = Vec::new();
    let t = Instant::now();
    let (trained, _) = train_splits(template, train_data, cfg)?;
    for (i, m) in trained.iter().enumerate() {
        stages.push(stage_record("train", &format!("split-{i}"), m, test_data, t)?);
    }

    let t = Instant::now();
    let fused = fuse_trained(&trained, train_data, cfg)?;
    stages.push(stage_record("fuse", "fused", &fused, test_data, t)?);

    let t = Instant::now();
    let (tuned, _) = finetune(&fused, train_data, cfg.finetune_epochs, cfg.seed)?;
    stages.push(stage_record("finetune", "fused", &tuned, test_data, t)?);

    let t = Instant::now();
    let pruned = iterative_prune(&tuned, train_data, cfg, cfg.seed)?;
    stages.push(stage_record("prune", "pruned", &pruned, test_data, t)?);

    let t = Instant::now();
    let (final_model, _) = finetune(&pruned, train_data, cfg.finetune_epochs, cfg.seed + 1)?;
    stages.push(stage_record("finetune", "final", &final_model, test_data, t)?);
    Ok(PipelineOutcome {
        model: final_model,
        stages,
    })
}
