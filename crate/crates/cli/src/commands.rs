//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;

use prunefuse_core::arch::{build_arch, init_params, parse_arch};
use prunefuse_core::dataset::Dataset;
use prunefuse_core::depgraph::{build_groups, AxisRole};
use prunefuse_core::eval::{
    ablation_grid, accuracy, embed_pruned, eval_record, landscape_grid, output_divergence,
    vectorize, LANDSCAPE_MARGIN, LANDSCAPE_STEPS,
};
use prunefuse_core::fusion::{fuse_models, FusionCost, FusionSpec, DEFAULT_FUSION_SAMPLES};
use prunefuse_core::graph::ModelGraph;
use prunefuse_core::importance::{compute_importance, Metric};
use prunefuse_core::model_io::{
    count_params, load_model, save_model, write_manifest, RunManifest,
};
use prunefuse_core::ot::DistributionMode;
use prunefuse_core::pipeline::{
    self, run_pipeline, PipelineConfig, PipelineMode, TrainConfig,
};
use prunefuse_core::prune::{
    fold_batchnorm, intra_fuse_detailed, prune_all_groups, top_m_indices,
    ConsumerAgg, Method, PruneOptions, TargetMode,
};
use prunefuse_core::{Error, Result, Tensor};

use crate::data::{load_both, load_split, source_hashes, Split};
use crate::output::{num, write_csv};

pub struct Context {
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Context {
    fn out_file(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

/// View the dataset's examples under the model's input shape (e.g. images
/// flattened for an MLP) when the lengths agree.
fn fit(data: Dataset, model: &ModelGraph) -> Result<Dataset> {
    if data.example_shape == model.input_shape {
        Ok(data)
    } else {
        data.with_example_shape(&model.input_shape)
    }
}

fn save_to(model: &ModelGraph, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_model(model, path)
}

// ---------------------------------------------------------------- eval

#[derive(Args)]
pub struct EvalArgs {
    /// Model file (.ifm)
    #[arg(long)]
    model: PathBuf,
    /// Dataset spec: idx:tr-img,tr-lbl,te-img,te-lbl or csv:path[,frac]
    #[arg(long)]
    data: String,
    /// Unpruned reference for divergence and sparsity columns
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Row label in the CSV output
    #[arg(long, default_value = "model")]
    id: String,
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let reference = args.reference.as_deref().map(load_model).transpose()?;
    let data = fit(load_split(&args.data, args.split)?, &model)?;
    let record = eval_record(&model, reference.as_ref(), &data, &args.id, &args.data)?;
    let row = vec![
        record.model_id.clone(),
        record.dataset_id.clone(),
        num(record.accuracy),
        record.divergence.map(num).unwrap_or_default(),
        record.params.total.to_string(),
        num(record.neuron_sparsity),
        num(record.weight_sparsity),
    ];
    write_csv(
        ctx.out.as_deref(),
        &[
            "model_id",
            "dataset_id",
            "accuracy",
            "divergence",
            "params",
            "neuron_sparsity",
            "weight_sparsity",
        ],
        &[row],
    )
}

// ---------------------------------------------------------------- divergence

#[derive(Args)]
pub struct DivergenceArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    pruned: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "test")]
    split: Split,
}

pub fn divergence(ctx: &Context, args: DivergenceArgs) -> Result<()> {
    let original = load_model(&args.original)?;
    let pruned = load_model(&args.pruned)?;
    let data = fit(load_split(&args.data, args.split)?, &original)?;
    let d = output_divergence(&original, &pruned, &data)?;
    write_csv(
        ctx.out.as_deref(),
        &["original", "pruned", "divergence"],
        &[vec![
            args.original.display().to_string(),
            args.pruned.display().to_string(),
            num(d),
        ]],
    )
}

// ---------------------------------------------------------------- landscape

#[derive(Args)]
pub struct LandscapeArgs {
    /// Origin model defining the architecture and parameter dimension
    #[arg(long)]
    origin: PathBuf,
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    /// Prune report carrying model A's kept-index map (needed if A is pruned)
    #[arg(long)]
    kept_a: Option<PathBuf>,
    #[arg(long)]
    kept_b: Option<PathBuf>,
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = LANDSCAPE_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = LANDSCAPE_MARGIN)]
    margin: f32,
}

fn load_kept(path: &Path) -> Result<BTreeMap<usize, Option<Vec<usize>>>> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let kept = value
        .get("kept")
        .ok_or_else(|| Error::Format(format!("{} has no 'kept' field", path.display())))?;
    serde_json::from_value(kept.clone()).map_err(Error::from)
}

fn embed_anchor(
    model: &ModelGraph,
    origin: &ModelGraph,
    kept: Option<&Path>,
) -> Result<Vec<f32>> {
    match kept {
        Some(path) => embed_pruned(model, origin, &load_kept(path)?),
        None => {
            let v = vectorize(model);
            if v.len() != vectorize(origin).len() {
                return Err(Error::Input(
                    "model dimension differs from origin; pass its prune report via --kept-a/--kept-b"
                        .into(),
                ));
            }
            Ok(v)
        }
    }
}

pub fn landscape(ctx: &Context, args: LandscapeArgs) -> Result<()> {
    let origin = load_model(&args.origin)?;
    let a = load_model(&args.model_a)?;
    let b = load_model(&args.model_b)?;
    let va = embed_anchor(&a, &origin, args.kept_a.as_deref())?;
    let vb = embed_anchor(&b, &origin, args.kept_b.as_deref())?;
    let data = fit(load_split(&args.data, args.split)?, &origin)?;
    let grid = landscape_grid(&origin, &va, &vb, args.steps, args.margin, &data)?;
    let mut rows = Vec::with_capacity(grid.cells.len() + 3);
    for &(alpha, beta, acc) in &grid.cells {
        rows.push(vec![
            "cell".into(),
            num(alpha as f64),
            num(beta as f64),
            num(acc),
        ]);
    }
    for (name, &(alpha, beta, acc)) in ["origin", "model_a", "model_b"].iter().zip(&grid.anchors) {
        rows.push(vec![
            (*name).into(),
            num(alpha as f64),
            num(beta as f64),
            num(acc),
        ]);
    }
    write_csv(
        ctx.out.as_deref(),
        &["kind", "alpha", "beta", "accuracy"],
        &rows,
    )
}

// ---------------------------------------------------------------- ablation

#[derive(Args)]
pub struct AblationArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Comma-separated group ids
    #[arg(long, value_delimiter = ',')]
    groups: Vec<usize>,
    /// Comma-separated neuron sparsities
    #[arg(long, value_delimiter = ',')]
    sparsities: Vec<f32>,
    #[arg(long, default_value = "l1")]
    importance: Metric,
}

pub fn ablation(ctx: &Context, args: AblationArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let data = fit(load_split(&args.data, args.split)?, &model)?;
    let rows = ablation_grid(
        &model,
        &data,
        &args.groups,
        &args.sparsities,
        args.importance,
        ctx.seed,
    )?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.group.to_string(),
                num(r.sparsity as f64),
                r.label.to_string(),
                dist_name(r.source).into(),
                dist_name(r.target).into(),
                num(r.accuracy),
            ]
        })
        .collect();
    write_csv(
        ctx.out.as_deref(),
        &["group", "sparsity", "combo", "source_dist", "target_dist", "accuracy"],
        &table,
    )
}

fn dist_name(mode: DistributionMode) -> &'static str {
    match mode {
        DistributionMode::Uniform => "uniform",
        DistributionMode::SumNormalized => "importance",
        DistributionMode::Softmax => "softmax",
    }
}

// ---------------------------------------------------------------- groups

#[derive(Args)]
pub struct GroupsArgs {
    #[arg(long)]
    model: PathBuf,
}

pub fn groups(ctx: &Context, args: GroupsArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let groups = build_groups(&model)?;
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            let slices: Vec<String> = g
                .slices
                .iter()
                .map(|s| match s.role {
                    AxisRole::ProducerOut => format!("{}:producer", s.layer),
                    AxisRole::ConsumerIn { block } => format!("{}:consumer/{block}", s.layer),
                    AxisRole::BnElementwise => format!("{}:bn", s.layer),
                })
                .collect();
            vec![
                g.id.to_string(),
                g.cardinality.to_string(),
                g.prunable.to_string(),
                slices.join(" "),
            ]
        })
        .collect();
    write_csv(
        ctx.out.as_deref(),
        &["group", "cardinality", "prunable", "slices"],
        &rows,
    )
}

// ---------------------------------------------------------------- prune

#[derive(Args)]
pub struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "intra-fusion")]
    method: Method,
    /// Neuron sparsity applied to every prunable group
    #[arg(long, conflicts_with_all = ["group", "target_m"])]
    sparsity: Option<f32>,
    /// Prune a single group instead
    #[arg(long, requires = "target_m")]
    group: Option<usize>,
    /// Surviving pairing count for --group
    #[arg(long, requires = "group")]
    target_m: Option<usize>,
    #[arg(long, default_value = "l1")]
    importance: Metric,
    /// Dataset spec; required for taylor importance
    #[arg(long)]
    data: Option<String>,
    /// Calibration batches for taylor importance
    #[arg(long, default_value_t = 4)]
    calib_batches: usize,
    #[arg(long, default_value = "topm")]
    target: TargetArg,
    #[arg(long, default_value = "uniform")]
    source_dist: DistArg,
    #[arg(long, default_value = "uniform")]
    target_dist: DistArg,
    /// Softmax instead of sum-normalization for importance-informed marginals
    #[arg(long)]
    softmax: bool,
    #[arg(long, default_value = "paper")]
    consumer_agg: AggArg,
    /// Fall back to uniform marginals when importance sums to zero
    #[arg(long)]
    degenerate_fallback: bool,
    /// Write the prune report (with kept-index maps) as JSON
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the transport plan as CSV (single-group intra-fusion only)
    #[arg(long)]
    dump_plan: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum TargetArg {
    Topm,
    Kmeans,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum DistArg {
    Uniform,
    Importance,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum AggArg {
    Paper,
    MassSum,
}

fn dist_mode(arg: DistArg, softmax: bool) -> DistributionMode {
    match arg {
        DistArg::Uniform => DistributionMode::Uniform,
        DistArg::Importance if softmax => DistributionMode::Softmax,
        DistArg::Importance => DistributionMode::SumNormalized,
    }
}

fn calibration_batches(
    data: Option<&String>,
    batches: usize,
    model: &ModelGraph,
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    let Some(spec) = data else {
        return Ok(Vec::new());
    };
    let train = fit(load_split(spec, Split::Train)?, model)?;
    let mut out = Vec::new();
    for start in (0..train.len()).step_by(pipeline::DEFAULT_BATCH).take(batches) {
        let idx: Vec<usize> = (start..(start + pipeline::DEFAULT_BATCH).min(train.len())).collect();
        out.push(train.batch(&idx));
    }
    Ok(out)
}

pub fn prune(ctx: &Context, args: PruneArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let options = PruneOptions {
        target_mode: match args.target {
            TargetArg::Topm => TargetMode::TopM,
            TargetArg::Kmeans => TargetMode::KMeans,
        },
        source_dist: dist_mode(args.source_dist, args.softmax),
        target_dist: dist_mode(args.target_dist, args.softmax),
        consumer_agg: match args.consumer_agg {
            AggArg::Paper => ConsumerAgg::PaperLiteral,
            AggArg::MassSum => ConsumerAgg::MassSum,
        },
        degenerate_fallback: args.degenerate_fallback,
        kmeans_seed: ctx.seed,
    };
    let calibration = calibration_batches(args.data.as_ref(), args.calib_batches, &model)?;
    if args.importance == Metric::Taylor && calibration.is_empty() {
        return Err(Error::Input("taylor importance needs --data".into()));
    }

    let (pruned, report_json, plan) = match (args.sparsity, args.group, args.target_m) {
        (Some(sparsity), None, None) => {
            let outcome = prune_all_groups(
                &model,
                sparsity,
                args.method,
                args.importance,
                &options,
                &calibration,
                ctx.seed,
            )?;
            let json = serde_json::json!({
                "report": outcome.report,
                "kept": outcome.kept,
            });
            (outcome.model, json, None)
        }
        (None, Some(gid), Some(m)) => {
            let groups = build_groups(&model)?;
            let group = groups
                .iter()
                .find(|g| g.id == gid && g.prunable)
                .ok_or_else(|| Error::Input(format!("no prunable group {gid}")))?;
            let folded = fold_batchnorm(&model)?;
            let importance = compute_importance(
                args.importance,
                &model,
                &folded,
                group,
                &calibration,
                ctx.seed,
            )?;
            match args.method {
                Method::Conventional => {
                    let kept = top_m_indices(&importance.scores, m);
                    let pruned = prunefuse_core::prune::conventional_prune(
                        &model, group, &importance, m,
                    )?;
                    let mut kept_map: BTreeMap<usize, Option<Vec<usize>>> = BTreeMap::new();
                    kept_map.insert(gid, Some(kept));
                    let json = serde_json::json!({
                        "report": {
                            "method": "conventional",
                            "metric": importance.metric,
                            "group": gid,
                            "n": group.cardinality,
                            "m": m,
                            "params_after": count_params(&pruned).total,
                        },
                        "kept": kept_map,
                    });
                    (pruned, json, None)
                }
                Method::IntraFusion => {
                    let (fused, detail) =
                        intra_fuse_detailed(&model, group, &importance, m, &options)?;
                    let mut kept_map: BTreeMap<usize, Option<Vec<usize>>> = BTreeMap::new();
                    kept_map.insert(gid, detail.kept.clone());
                    let json = serde_json::json!({
                        "report": {
                            "method": "intra-fusion",
                            "metric": importance.metric,
                            "group": gid,
                            "n": group.cardinality,
                            "m": m,
                            "objective": detail.plan.objective,
                            "params_after": count_params(&fused).total,
                        },
                        "kept": kept_map,
                    });
                    (fused, json, Some(detail.plan))
                }
            }
        }
        _ => {
            return Err(Error::Input(
                "pass either --sparsity or --group with --target-m".into(),
            ))
        }
    };

    save_to(&pruned, &ctx.out_file("pruned.ifm"))?;
    if let Some(path) = &args.report {
        let mut text = serde_json::to_string_pretty(&report_json)?;
        text.push('\n');
        std::fs::write(path, text)?;
    }
    if let Some(path) = &args.dump_plan {
        let plan = plan.ok_or_else(|| {
            Error::Input("--dump-plan needs single-group intra-fusion (--group/--target-m)".into())
        })?;
        let mut rows = Vec::new();
        for i in 0..plan.n {
            for j in 0..plan.m {
                rows.push(vec![i.to_string(), j.to_string(), num(plan.at(i, j))]);
            }
        }
        write_csv(Some(path), &["source", "target", "mass"], &rows)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- fuse

#[derive(Args)]
pub struct FuseArgs {
    #[arg(long)]
    anchor: PathBuf,
    /// Comma-separated model files to align onto the anchor
    #[arg(long, value_delimiter = ',')]
    others: Vec<PathBuf>,
    /// Convex mixing weights, anchor first; default uniform
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f32>,
    #[arg(long, default_value = "weight")]
    cost: FusionCost,
    #[arg(long, default_value_t = DEFAULT_FUSION_SAMPLES)]
    samples: usize,
    /// Dataset spec; required for activation cost
    #[arg(long)]
    data: Option<String>,
}

pub fn fuse(ctx: &Context, args: FuseArgs) -> Result<()> {
    if args.others.is_empty() {
        return Err(Error::Input("--others needs at least one model".into()));
    }
    let anchor = load_model(&args.anchor)?;
    let others: Vec<ModelGraph> = args
        .others
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<_>>()?;
    let count = 1 + others.len();
    let weights = if args.weights.is_empty() {
        vec![1.0 / count as f32; count]
    } else {
        args.weights.clone()
    };
    let calibration = match args.cost {
        FusionCost::Weight => None,
        FusionCost::Activation => {
            let spec = args
                .data
                .as_ref()
                .ok_or_else(|| Error::Input("activation cost needs --data".into()))?;
            let train = fit(load_split(spec, Split::Train)?, &anchor)?;
            let count = args.samples.min(train.len());
            let idx: Vec<usize> = (0..count).collect();
            Some(train.batch(&idx).0)
        }
    };
    let spec = FusionSpec {
        anchor: &anchor,
        others: others.iter().collect(),
        weights,
        cost: args.cost,
        samples: calibration
            .as_ref()
            .map(|c| c.shape()[0])
            .unwrap_or(args.samples),
    };
    let fused = fuse_models(&spec, calibration.as_ref())?;
    save_to(&fused, &ctx.out_file("fused.ifm"))
}

// ---------------------------------------------------------------- pipeline

#[derive(Args)]
pub struct PipelineArgs {
    /// Architecture spec, e.g. mlp:64,32,10 or resnet-toy:1x8,8,10
    #[arg(long)]
    arch: String,
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "whole")]
    mode: PipelineMode,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f32,
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    step_epochs: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    finetune_epochs: usize,
    #[arg(long, default_value = "activation")]
    fuse_cost: FusionCost,
    #[arg(long, default_value_t = DEFAULT_FUSION_SAMPLES)]
    fuse_samples: usize,
    #[arg(long, default_value = "l1")]
    importance: Metric,
}

pub fn pipeline(ctx: &Context, args: PipelineArgs) -> Result<()> {
    let template = build_arch(&parse_arch(&args.arch)?)?;
    let (train_data, test_data) = load_both(&args.data)?;
    let train_data = fit(train_data, &template)?;
    let test_data = fit(test_data, &template)?;
    let cfg = PipelineConfig {
        mode: args.mode,
        k: args.k,
        sparsity: args.sparsity,
        steps: args.steps,
        step_epochs: args.step_epochs,
        train_epochs: args.epochs,
        finetune_epochs: args.finetune_epochs,
        fuse_cost: args.fuse_cost,
        fuse_samples: args.fuse_samples,
        metric: args.importance,
        options: PruneOptions::recommended(),
        seed: ctx.seed,
    };
    let started = Instant::now();
    let outcome = run_pipeline(&template, &train_data, &test_data, &cfg)?;
    let dir = ctx.out_dir();
    std::fs::create_dir_all(&dir)?;
    let rows: Vec<Vec<String>> = outcome
        .stages
        .iter()
        .map(|s| vec![s.stage.clone(), s.model_id.clone(), num(s.accuracy)])
        .collect();
    write_csv(
        Some(&dir.join("stages.csv")),
        &["stage", "model_id", "accuracy"],
        &rows,
    )?;
    save_to(&outcome.model, &dir.join("final.ifm"))?;
    let manifest = RunManifest {
        seed: ctx.seed,
        dataset_hashes: source_hashes(&args.data)?,
        config: serde_json::json!({
            "arch": args.arch,
            "mode": format!("{:?}", args.mode).to_lowercase(),
            "k": args.k,
            "sparsity": args.sparsity,
            "steps": args.steps,
            "step_epochs": args.step_epochs,
            "epochs": args.epochs,
            "finetune_epochs": args.finetune_epochs,
            "fuse_samples": args.fuse_samples,
            "stage_seconds": outcome.stages.iter()
                .map(|s| serde_json::json!({"stage": s.stage, "model": s.model_id, "seconds": s.seconds}))
                .collect::<Vec<_>>(),
            "total_seconds": started.elapsed().as_secs_f64(),
        }),
    };
    write_manifest(&manifest, &dir.join("manifest.json"))
}

// ---------------------------------------------------------------- train

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    arch: String,
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = pipeline::DEFAULT_BATCH)]
    batch: usize,
    /// Use the fine-tuning LR schedule (base 0.01 instead of 0.05)
    #[arg(long)]
    finetune: bool,
    /// Per-epoch loss/accuracy trace CSV
    #[arg(long)]
    trace: Option<PathBuf>,
}

pub fn train(ctx: &Context, args: TrainArgs) -> Result<()> {
    let mut model = build_arch(&parse_arch(&args.arch)?)?;
    init_params(&mut model, ctx.seed);
    let (train_data, test_data) = load_both(&args.data)?;
    let train_data = fit(train_data, &model)?;
    let test_data = fit(test_data, &model)?;
    let mut config = if args.finetune {
        TrainConfig::finetuning(args.epochs, ctx.seed)
    } else {
        TrainConfig::training(args.epochs, ctx.seed)
    };
    config.batch_size = args.batch;
    let (trained, trace) = pipeline::train(&model, &train_data, &config)?;
    save_to(&trained, &ctx.out_file("model.ifm"))?;
    if let Some(path) = &args.trace {
        let rows: Vec<Vec<String>> = trace
            .iter()
            .map(|t| {
                vec![
                    t.epoch.to_string(),
                    num(t.lr as f64),
                    num(t.loss),
                    num(t.accuracy),
                ]
            })
            .collect();
        write_csv(Some(path), &["epoch", "lr", "loss", "accuracy"], &rows)?;
    }
    println!(
        "train accuracy {:.4}, test accuracy {:.4}",
        accuracy(&trained, &train_data)?,
        accuracy(&trained, &test_data)?
    );
    Ok(())
}
