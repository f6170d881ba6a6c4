//! End-to-end acceptance gates. Each test covers one release criterion and
//! prints a single `criterion NN ...: pass` line with the measured margin.
//!
//! The data-driven gates (06–08, 11) train small networks on the bundled
//! digits set; trained models are shared across tests through a `OnceLock`.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use prunefuse_core::arch::{self, build_arch, parse_arch, GraphBuilder};
use prunefuse_core::dataset::{load_dataset, Dataset, DatasetSource};
use prunefuse_core::depgraph::{prunable_groups, zero_pairing, Group};
use prunefuse_core::eval::{accuracy, landscape_grid, output_divergence, vectorize};
use prunefuse_core::fusion::{fuse_models, FusionCost, FusionSpec};
use prunefuse_core::graph::{forward, LayerKind, ModelGraph};
use prunefuse_core::importance::{lp_norm_importance, random_importance, ImportanceVector};
use prunefuse_core::model_io::node_params;
use prunefuse_core::ot::{solve_ot, CostMatrix, DiscreteDistribution};
use prunefuse_core::pipeline::{make_split_plan, train, TrainConfig};
use prunefuse_core::prune::{
    conventional_prune, fold_batchnorm, intra_fuse, sparsity_to_m, ConsumerAgg, PruneOptions,
};
use prunefuse_core::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn digits_source() -> DatasetSource {
    let d = data_dir();
    DatasetSource::Idx {
        train_images: d.join("digits-train-images.idx3-ubyte"),
        train_labels: d.join("digits-train-labels.idx1-ubyte"),
        test_images: d.join("digits-test-images.idx3-ubyte"),
        test_labels: d.join("digits-test-labels.idx1-ubyte"),
    }
}

fn digits() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| load_dataset(&digits_source()).expect("bundled digits data"))
}

fn digits_spec() -> String {
    let d = data_dir();
    format!(
        "idx:{},{},{},{}",
        d.join("digits-train-images.idx3-ubyte").display(),
        d.join("digits-train-labels.idx1-ubyte").display(),
        d.join("digits-test-images.idx3-ubyte").display(),
        d.join("digits-test-labels.idx1-ubyte").display()
    )
}

/// The Intra-Fusion configuration exercised by the trend gates: marginals
/// informed by importance on both sides, mass-sum consumer aggregation.
fn fusion_options() -> PruneOptions {
    PruneOptions::recommended()
}

const TREND_SEEDS: u64 = 5;
const TREND_EPOCHS: usize = 10;

struct TrainedNet {
    model: ModelGraph,
    test_accuracy: f64,
    /// id of the group whose conventional 50% prune hurts accuracy most
    volatile_group: usize,
    train_seconds: f64,
}

/// Five residual conv nets trained on the digits data, one per seed.
fn trained_nets() -> &'static Vec<TrainedNet> {
    static NETS: OnceLock<Vec<TrainedNet>> = OnceLock::new();
    NETS.get_or_init(|| {
        let (train_data, test_data) = digits();
        let spec = parse_arch("resnet-toy:1x8,16,10").unwrap();
        (0..TREND_SEEDS)
            .map(|seed| {
                let start = Instant::now();
                let mut model = build_arch(&spec).unwrap();
                arch::init_params(&mut model, seed);
                let (model, _) =
                    train(&model, train_data, &TrainConfig::training(TREND_EPOCHS, seed)).unwrap();
                let train_seconds = start.elapsed().as_secs_f64();
                let test_accuracy = accuracy(&model, test_data).unwrap();
                let folded = fold_batchnorm(&model).unwrap();
                let volatile_group = prunable_groups(&model)
                    .unwrap()
                    .iter()
                    .map(|g| {
                        let imp = lp_norm_importance(&folded, g, 1.0).unwrap();
                        let m = sparsity_to_m(g.cardinality, 0.5);
                        let pruned = conventional_prune(&model, g, &imp, m).unwrap();
                        (g.id, accuracy(&pruned, test_data).unwrap())
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                TrainedNet { model, test_accuracy, volatile_group, train_seconds }
            })
            .collect()
    })
}

fn volatile_group_of(net: &TrainedNet) -> Group {
    prunable_groups(&net.model)
        .unwrap()
        .into_iter()
        .find(|g| g.id == net.volatile_group)
        .unwrap()
}

fn builders() -> Vec<ModelGraph> {
    let mut models = vec![
        arch::mlp(8, &[6, 5], 4).unwrap(),
        arch::vgg_toy(1, 8, &[4, 5], 10).unwrap(),
        arch::resnet_toy(1, 8, 4, 10).unwrap(),
    ];
    for (i, m) in models.iter_mut().enumerate() {
        arch::init_params(m, 40 + i as u64);
        arch::randomize_bn(m, 50 + i as u64);
    }
    models
}

fn random_batch(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn probe_for(model: &ModelGraph, rows: usize, seed: u64) -> Tensor {
    let mut shape = vec![rows];
    shape.extend_from_slice(&model.input_shape);
    random_batch(shape, seed)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// criterion 01: OT exactness against exhaustive tree-basis enumeration
// ---------------------------------------------------------------------------

/// All basic feasible solutions: every (n+m-1)-subset of cells that spans the
/// bipartite graph, flows solved by leaf elimination, negative flows rejected.
fn tree_basis_objectives(mu: &[f64], nu: &[f64], c: &CostMatrix) -> Vec<f64> {
    let n = mu.len();
    let m = nu.len();
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let k = n + m - 1;
    let mut out = Vec::new();
    let mut choice: Vec<usize> = (0..k).collect();
    loop {
        let subset: Vec<(usize, usize)> = choice.iter().map(|&i| cells[i]).collect();
        if let Some(obj) = tree_objective(mu, nu, c, &subset) {
            out.push(obj);
        }
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if choice[i] != i + cells.len() - k {
                choice[i] += 1;
                for j in i + 1..k {
                    choice[j] = choice[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn tree_objective(mu: &[f64], nu: &[f64], c: &CostMatrix, cells: &[(usize, usize)]) -> Option<f64> {
    let n = mu.len();
    let m = nu.len();
    let mut adj = vec![vec![]; n + m];
    for (k, &(i, j)) in cells.iter().enumerate() {
        adj[i].push((n + j, k));
        adj[n + j].push((i, k));
    }
    let mut seen = vec![false; n + m];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(x) = stack.pop() {
        for &(y, _) in &adj[x] {
            if !seen[y] {
                seen[y] = true;
                stack.push(y);
            }
        }
    }
    if seen.iter().any(|&s| !s) {
        return None;
    }
    let mut supply: Vec<f64> = mu.iter().chain(nu.iter()).cloned().collect();
    let mut degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();
    let mut removed = vec![false; cells.len()];
    let mut flows = vec![0.0f64; cells.len()];
    for _ in 0..cells.len() {
        let leaf = (0..n + m).find(|&x| degree[x] == 1)?;
        let &(other, k) = adj[leaf].iter().find(|&&(_, k)| !removed[k])?;
        let f = supply[leaf];
        flows[k] = f;
        supply[leaf] = 0.0;
        supply[other] -= f;
        removed[k] = true;
        degree[leaf] -= 1;
        degree[other] -= 1;
        adj[leaf].retain(|&(_, kk)| kk != k);
        adj[other].retain(|&(_, kk)| kk != k);
    }
    if flows.iter().any(|&f| f < -1e-9) {
        return None;
    }
    Some(cells.iter().zip(&flows).map(|(&(i, j), &f)| f * c.at(i, j)).sum())
}

#[test]
fn criterion_01_ot_exactness() {
    let start = Instant::now();
    let mut worst_gap = f64::NEG_INFINITY;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=4usize);
        let m = rng.gen_range(1..=4usize);
        let mut mu: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|v| *v /= s);
        let mut nu: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = nu.iter().sum();
        nu.iter_mut().for_each(|v| *v /= s);
        let c: Vec<f64> = (0..n * m).map(|_| rng.gen_range(0.0..1.0)).collect();

        let cost = CostMatrix::new(n, m, c).unwrap();
        let md = DiscreteDistribution::new(mu.clone()).unwrap();
        let nd = DiscreteDistribution::new(nu.clone()).unwrap();
        let plan = solve_ot(&md, &nd, &cost).unwrap();

        let best = tree_basis_objectives(&mu, &nu, &cost)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!(
            plan.objective <= best + 1e-9,
            "seed {seed}: solver {} vs enumerated best {best}",
            plan.objective
        );
        worst_gap = worst_gap.max(plan.objective - best);
        for (rs, w) in plan.row_sums().iter().zip(&mu) {
            assert!((rs - w).abs() <= 1e-6, "seed {seed}: row marginal off by {}", (rs - w).abs());
        }
        for (cs, w) in plan.col_sums().iter().zip(&nu) {
            assert!((cs - w).abs() <= 1e-6, "seed {seed}: col marginal off by {}", (cs - w).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.1}s");
    println!(
        "criterion 01 ot-exactness: pass (200 instances, worst objective gap {worst_gap:.2e}, {secs:.2}s)"
    );
}

// ---------------------------------------------------------------------------
// criterion 02: BN folding preserves the forward pass
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_bn_fold_equivalence() {
    let start = Instant::now();
    let mut worst = 0.0f32;
    for (i, model) in builders().into_iter().enumerate() {
        let folded = fold_batchnorm(&model).unwrap();
        let batch = probe_for(&model, 100, 900 + i as u64);
        let a = forward(&model, &batch).unwrap();
        let b = forward(&folded, &batch).unwrap();
        let diff = a.max_abs_diff(&b);
        assert!(diff <= 1e-5, "builder {i}: max-abs diff {diff}");
        worst = worst.max(diff);
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "took {secs:.1}s");
    println!("criterion 02 bn-fold: pass (100 inputs per builder, worst diff {worst:.2e}, {secs:.2}s)");
}

// ---------------------------------------------------------------------------
// criterion 03: intra-fusion at zero sparsity is the identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_zero_sparsity_identity() {
    let options = PruneOptions::default(); // top-m targets, uniform marginals
    let mut worst = 0.0f32;
    for (i, model) in builders().into_iter().enumerate() {
        let folded = fold_batchnorm(&model).unwrap();
        for group in prunable_groups(&model).unwrap() {
            let imp = lp_norm_importance(&folded, &group, 1.0).unwrap();
            let fused = intra_fuse(&model, &group, &imp, group.cardinality, &options).unwrap();
            let batch = probe_for(&model, 8, 910 + i as u64);
            let diff = forward(&model, &batch)
                .unwrap()
                .max_abs_diff(&forward(&fused, &batch).unwrap());
            assert!(diff <= 1e-5, "builder {i} group {}: diff {diff}", group.id);
            worst = worst.max(diff);
        }
    }
    println!("criterion 03 zero-sparsity identity: pass (worst diff {worst:.2e})");
}

// ---------------------------------------------------------------------------
// criterion 04: merging exact duplicates is lossless in mass-sum mode
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_duplicate_merge() {
    // 2 -> 2 -> 2 MLP whose two hidden pairings are exact duplicates
    let mut b = GraphBuilder::new(vec![2]);
    let l1 = b.add(arch::linear(2, 2, true), &[]);
    let r = b.add(LayerKind::ReLU, &[l1]);
    let l2 = b.add(arch::linear(2, 2, true), &[r]);
    let mut model = b.finish(l2).unwrap();
    if let LayerKind::Linear { weight, bias, .. } = &mut model.nodes[0].kind {
        weight.data_mut().copy_from_slice(&[1.0, -2.0, 1.0, -2.0]);
        bias.as_mut().unwrap().data_mut().copy_from_slice(&[0.5, 0.5]);
    }
    if let LayerKind::Linear { weight, bias, .. } = &mut model.nodes[2].kind {
        weight.data_mut().copy_from_slice(&[0.7, 0.7, -1.1, -1.1]);
        bias.as_mut().unwrap().data_mut().copy_from_slice(&[0.1, -0.2]);
    }
    let group = prunable_groups(&model).unwrap().remove(0);
    let imp = ImportanceVector {
        group_id: group.id,
        scores: vec![1.0, 1.0],
        metric: "manual".into(),
        seed: None,
    };
    let batch = random_batch(vec![16, 2], 5);
    let orig = forward(&model, &batch).unwrap();

    let mass_sum = PruneOptions { consumer_agg: ConsumerAgg::MassSum, ..PruneOptions::default() };
    let fused = intra_fuse(&model, &group, &imp, 1, &mass_sum).unwrap();
    let diff = orig.max_abs_diff(&forward(&fused, &batch).unwrap());
    assert!(diff <= 1e-5, "mass-sum merge diff {diff}");

    // regression pin: the paper-literal consumer map halves the contribution
    let literal = intra_fuse(&model, &group, &imp, 1, &PruneOptions::default()).unwrap();
    let literal_diff = orig.max_abs_diff(&forward(&literal, &batch).unwrap());
    assert!(literal_diff > 1e-3, "paper-literal mode unexpectedly exact");
    println!(
        "criterion 04 duplicate-merge: pass (mass-sum diff {diff:.2e}, paper-literal diff {literal_diff:.2e})"
    );
}

// ---------------------------------------------------------------------------
// criterion 05: conventional pruning is sound and shape-compatible
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_conventional_soundness() {
    let mut worst = 0.0f32;
    for (i, model) in builders().into_iter().enumerate() {
        let folded = fold_batchnorm(&model).unwrap();
        for group in prunable_groups(&model).unwrap() {
            let imp = lp_norm_importance(&folded, &group, 1.0).unwrap();
            for m in 1..=group.cardinality {
                let pruned = conventional_prune(&model, &group, &imp, m).unwrap();

                // oracle: zero the discarded slices in place, outputs must match
                let kept = prunefuse_core::prune::top_m_indices(&imp.scores, m);
                let mut zeroed = model.clone();
                for j in (0..group.cardinality).filter(|j| !kept.contains(j)) {
                    zero_pairing(&mut zeroed, &group, j);
                }
                let batch = probe_for(&model, 4, 920 + i as u64);
                let diff = forward(&pruned, &batch)
                    .unwrap()
                    .max_abs_diff(&forward(&zeroed, &batch).unwrap());
                assert!(diff <= 1e-5, "builder {i} group {} m {m}: diff {diff}", group.id);
                worst = worst.max(diff);

                // intra-fusion at the same (group, m) produces identical shapes
                let fused = intra_fuse(&model, &group, &imp, m, &PruneOptions::default()).unwrap();
                for (a, b) in pruned.nodes.iter().zip(&fused.nodes) {
                    let sa: Vec<_> = node_params(&a.kind).iter().map(|(_, t)| t.shape().to_vec()).collect();
                    let sb: Vec<_> = node_params(&b.kind).iter().map(|(_, t)| t.shape().to_vec()).collect();
                    assert_eq!(sa, sb, "builder {i} group {} m {m}", group.id);
                }
            }
        }
    }
    println!("criterion 05 conventional-prune soundness: pass (worst zero-out diff {worst:.2e})");
}

// ---------------------------------------------------------------------------
// criterion 06: data-free accuracy, intra-fusion vs conventional
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_data_free_superiority() {
    let nets = trained_nets();
    let (_, test_data) = digits();
    let train_seconds: f64 = nets.iter().map(|n| n.train_seconds).sum();
    assert!(train_seconds < 600.0, "training took {train_seconds:.0}s");
    for (seed, net) in nets.iter().enumerate() {
        assert!(
            net.test_accuracy >= 0.95,
            "seed {seed}: test accuracy {:.4} below 0.95",
            net.test_accuracy
        );
    }

    let options = fusion_options();
    let mut means = Vec::new();
    let mut strict_at_70 = 0usize;
    for sp in [0.5f32, 0.7] {
        let mut conv_accs = Vec::new();
        let mut fuse_accs = Vec::new();
        for net in nets {
            let group = volatile_group_of(net);
            let folded = fold_batchnorm(&net.model).unwrap();
            let imp = lp_norm_importance(&folded, &group, 1.0).unwrap();
            let m = sparsity_to_m(group.cardinality, sp);
            let conv =
                accuracy(&conventional_prune(&net.model, &group, &imp, m).unwrap(), test_data)
                    .unwrap();
            let fuse =
                accuracy(&intra_fuse(&net.model, &group, &imp, m, &options).unwrap(), test_data)
                    .unwrap();
            if sp == 0.7 && fuse > conv {
                strict_at_70 += 1;
            }
            conv_accs.push(conv);
            fuse_accs.push(fuse);
        }
        let (mc, mf) = (mean(&conv_accs), mean(&fuse_accs));
        assert!(mf >= mc, "sparsity {sp}: mean intra-fusion {mf:.4} < conventional {mc:.4}");
        means.push((sp, mc, mf));
    }
    assert!(strict_at_70 >= 4, "only {strict_at_70}/5 seeds strictly better at 70%");
    println!(
        "criterion 06 data-free superiority: pass (mean IF vs conv: 50% {:.4}/{:.4}, 70% {:.4}/{:.4}; {strict_at_70}/5 strict at 70%; training {train_seconds:.0}s)",
        means[0].2, means[0].1, means[1].2, means[1].1
    );
}

// ---------------------------------------------------------------------------
// criterion 07: output preservation at low sparsity
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_output_preservation() {
    let nets = &trained_nets()[..3];
    let (_, test_data) = digits();
    let options = fusion_options();
    let mut summary = String::new();
    for sp in [0.1f32, 0.2, 0.3] {
        let mut conv_divs = Vec::new();
        let mut fuse_divs = Vec::new();
        for net in nets {
            let group = volatile_group_of(net);
            let folded = fold_batchnorm(&net.model).unwrap();
            let imp = lp_norm_importance(&folded, &group, 1.0).unwrap();
            let m = sparsity_to_m(group.cardinality, sp);
            conv_divs.push(
                output_divergence(
                    &net.model,
                    &conventional_prune(&net.model, &group, &imp, m).unwrap(),
                    test_data,
                )
                .unwrap(),
            );
            fuse_divs.push(
                output_divergence(
                    &net.model,
                    &intra_fuse(&net.model, &group, &imp, m, &options).unwrap(),
                    test_data,
                )
                .unwrap(),
            );
        }
        let (mc, mf) = (median(conv_divs), median(fuse_divs));
        assert!(
            mf <= mc,
            "sparsity {sp}: median intra-fusion divergence {mf:.4} > conventional {mc:.4}"
        );
        summary.push_str(&format!(" {sp}: {mf:.3}<={mc:.3}"));
    }
    println!("criterion 07 output preservation: pass (median IF<=conv divergence{summary})");
}

// ---------------------------------------------------------------------------
// criterion 08: the ordering is importance-metric agnostic
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_importance_agnosticism() {
    let nets = trained_nets();
    let (_, test_data) = digits();
    let options = fusion_options();
    let mut summary = String::new();
    for sp in [0.5f32, 0.7] {
        let mut conv_accs = Vec::new();
        let mut fuse_accs = Vec::new();
        for (seed, net) in nets.iter().enumerate() {
            let group = volatile_group_of(net);
            let imp = random_importance(&group, seed as u64).unwrap();
            let m = sparsity_to_m(group.cardinality, sp);
            conv_accs.push(
                accuracy(&conventional_prune(&net.model, &group, &imp, m).unwrap(), test_data)
                    .unwrap(),
            );
            fuse_accs.push(
                accuracy(&intra_fuse(&net.model, &group, &imp, m, &options).unwrap(), test_data)
                    .unwrap(),
            );
        }
        let (mc, mf) = (mean(&conv_accs), mean(&fuse_accs));
        assert!(
            mf >= mc,
            "sparsity {sp}: mean intra-fusion {mf:.4} < conventional {mc:.4} with random importance"
        );
        summary.push_str(&format!(" {sp}: {mf:.4}>={mc:.4}"));
    }
    println!("criterion 08 importance agnosticism: pass (random importance, 5-seed mean{summary})");
}

// ---------------------------------------------------------------------------
// criterion 09: inter-model fusion recovers a hidden permutation
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_permutation_recovery() {
    let mut anchor = arch::mlp(12, &[8], 5).unwrap();
    arch::init_params(&mut anchor, 17);

    // permute the hidden axis: rows of the first layer, columns of the second
    let perm: Vec<usize> = vec![5, 2, 7, 0, 4, 6, 1, 3];
    let mut permuted = anchor.clone();
    if let (
        LayerKind::Linear { weight: w0, bias: b0, .. },
        LayerKind::Linear { weight: a0, bias: ab0, .. },
    ) = (&mut permuted.nodes[0].kind, &anchor.nodes[0].kind)
    {
        for (new, &old) in perm.iter().enumerate() {
            w0.data_mut()[new * 12..(new + 1) * 12]
                .copy_from_slice(&a0.data()[old * 12..(old + 1) * 12]);
            b0.as_mut().unwrap().data_mut()[new] = ab0.as_ref().unwrap().data()[old];
        }
    }
    if let (LayerKind::Linear { weight: w2, .. }, LayerKind::Linear { weight: a2, .. }) =
        (&mut permuted.nodes[2].kind, &anchor.nodes[2].kind)
    {
        for r in 0..5 {
            for (new, &old) in perm.iter().enumerate() {
                w2.data_mut()[r * 8 + new] = a2.data()[r * 8 + old];
            }
        }
    }

    let fused = fuse_models(
        &FusionSpec {
            anchor: &anchor,
            others: vec![&permuted],
            weights: vec![0.5, 0.5],
            cost: FusionCost::Weight,
            samples: 0,
        },
        None,
    )
    .unwrap();
    let batch = random_batch(vec![32, 12], 23);
    let diff = forward(&anchor, &batch)
        .unwrap()
        .max_abs_diff(&forward(&fused, &batch).unwrap());
    assert!(diff <= 1e-5, "fused output diverges from anchor by {diff}");
    println!("criterion 09 permutation recovery: pass (forward diff {diff:.2e})");
}

// ---------------------------------------------------------------------------
// criterion 10: split-plan combinatorics
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_split_combinatorics() {
    for (k, expected) in [(2usize, 2usize), (4, 6)] {
        let plan = make_split_plan(1500, k, 3).unwrap();
        assert_eq!(plan.training_sets.len(), expected, "k = {k}");
        let mut all: Vec<usize> = plan.subsets.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1500).collect::<Vec<_>>(), "k = {k}: subsets are not a partition");
    }
    println!("criterion 10 split combinatorics: pass (k=2 -> 2 sets, k=4 -> 6 sets, exact partitions)");
}

// ---------------------------------------------------------------------------
// criterion 11: split-data pipelines track the whole-data baseline
// ---------------------------------------------------------------------------

fn run_pipeline_cli(mode: &str, seed: u64, out: &Path) -> f64 {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_prunefuse"))
        .args([
            "pipeline",
            "--arch",
            "mlp:64,32,10",
            "--data",
            &digits_spec(),
            "--mode",
            mode,
            "--epochs",
            "15",
            "--finetune-epochs",
            "20",
            "--step-epochs",
            "2",
            "--seed",
            &seed.to_string(),
            "--out",
        ])
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success(), "pipeline {mode} seed {seed} failed");

    let stages = std::fs::read_to_string(out.join("stages.csv")).unwrap();
    let mut lines = stages.lines();
    assert_eq!(lines.next(), Some("stage,model_id,accuracy"), "stages.csv header");
    let last = lines.last().expect("stage rows");
    assert!(out.join("final.ifm").exists(), "final model not written");
    last.rsplit(',').next().unwrap().parse().unwrap()
}

#[test]
fn criterion_11_pipeline_trend() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut finals: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for seed in 0..3u64 {
        for mode in ["whole", "paf", "fap"] {
            let out = dir.path().join(format!("{mode}-{seed}"));
            finals.entry(mode).or_default().push(run_pipeline_cli(mode, seed, &out));
        }
    }
    let whole = median(finals["whole"].clone());
    let paf = median(finals["paf"].clone());
    let fap = median(finals["fap"].clone());
    assert!(whole - paf <= 0.02, "PaF median {paf:.4} trails whole-data {whole:.4} by > 2 points");
    assert!(whole - fap <= 0.02, "FaP median {fap:.4} trails whole-data {whole:.4} by > 2 points");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 1800.0, "took {secs:.0}s");
    println!(
        "criterion 11 pipeline trend: pass (3-seed medians: whole {whole:.4}, PaF {paf:.4}, FaP {fap:.4}; {secs:.0}s)"
    );
}

// ---------------------------------------------------------------------------
// criterion 12: landscape anchor cells match direct evaluation exactly
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_landscape_anchors() {
    let (_, test_data) = digits();
    let test_data = test_data.clone().with_example_shape(&[64]).unwrap();
    let mut origin = arch::mlp(64, &[16], 10).unwrap();
    arch::init_params(&mut origin, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let theta0 = vectorize(&origin);
    let a: Vec<f32> = theta0.iter().map(|&v| v + rng.gen_range(-0.3..0.3)).collect();
    let b: Vec<f32> = theta0.iter().map(|&v| v + rng.gen_range(-0.3..0.3)).collect();

    let grid = landscape_grid(&origin, &a, &b, 7, 0.25, &test_data).unwrap();
    let direct_origin = accuracy(&origin, &test_data).unwrap();
    let model_a = prunefuse_core::eval::devectorize(&origin, &a).unwrap();
    let model_b = prunefuse_core::eval::devectorize(&origin, &b).unwrap();
    let direct_a = accuracy(&model_a, &test_data).unwrap();
    let direct_b = accuracy(&model_b, &test_data).unwrap();
    assert_eq!(grid.anchors[0].2, direct_origin, "origin anchor");
    assert_eq!(grid.anchors[1].2, direct_a, "model A anchor");
    assert_eq!(grid.anchors[2].2, direct_b, "model B anchor");
    println!(
        "criterion 12 landscape anchors: pass (origin/A/B = {direct_origin:.4}/{direct_a:.4}/{direct_b:.4}, exact match)"
    );
}

// ---------------------------------------------------------------------------
// criterion 13: CLI runs are bitwise reproducible
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_prunefuse"))
        .args(args)
        .status()
        .unwrap();
    assert!(status.success(), "prunefuse {args:?} failed");
}

#[test]
fn criterion_13_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = digits_spec();
    let mut compared = 0usize;
    for run in ["a", "b"] {
        let out = dir.path().join(format!("pipe-{run}"));
        run_cli(&[
            "pipeline", "--arch", "mlp:64,16,10", "--data", &data, "--mode", "paf", "--epochs",
            "3", "--finetune-epochs", "2", "--steps", "2", "--seed", "5", "--threads", "1",
            "--out", out.to_str().unwrap(),
        ]);
        let model = dir.path().join(format!("model-{run}.ifm"));
        let trace = dir.path().join(format!("trace-{run}.csv"));
        run_cli(&[
            "train", "--arch", "mlp:64,16,10", "--data", &data, "--epochs", "3", "--seed", "5",
            "--threads", "1", "--out", model.to_str().unwrap(), "--trace", trace.to_str().unwrap(),
        ]);
    }
    for (a, b) in [
        (dir.path().join("pipe-a/final.ifm"), dir.path().join("pipe-b/final.ifm")),
        (dir.path().join("pipe-a/stages.csv"), dir.path().join("pipe-b/stages.csv")),
        (dir.path().join("model-a.ifm"), dir.path().join("model-b.ifm")),
        (dir.path().join("trace-a.csv"), dir.path().join("trace-b.csv")),
    ] {
        let ba = std::fs::read(&a).unwrap();
        let bb = std::fs::read(&b).unwrap();
        assert_eq!(ba, bb, "{} differs between identical runs", a.display());
        compared += 1;
    }
    println!("criterion 13 determinism: pass ({compared} artifacts byte-identical across repeat runs)");
}
