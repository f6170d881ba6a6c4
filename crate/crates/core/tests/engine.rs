//! Forward/backward engine checks against independent oracles.

use prunefuse_core::arch::{self, linear, GraphBuilder};
use prunefuse_core::graph::{
    backward, forward, loss_cross_entropy, LayerKind, Param,
};
use prunefuse_core::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn set_linear(kind: &mut LayerKind, w: &[f32], b: Option<&[f32]>) {
    if let LayerKind::Linear { weight, bias, .. } = kind {
        weight.data_mut().copy_from_slice(w);
        if let (Some(bt), Some(bv)) = (bias.as_mut(), b) {
            bt.data_mut().copy_from_slice(bv);
        }
    } else {
        panic!("not linear");
    }
}

#[test]
fn identity_linear_forward() {
    let mut b = GraphBuilder::new(vec![3]);
    let l = b.add(linear(3, 3, true), &[]);
    let mut model = b.finish(l).unwrap();
    set_linear(
        &mut model.nodes[0].kind,
        &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        Some(&[0.0; 3]),
    );
    let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = forward(&model, &x).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn relu_clamps_negatives() {
    let mut b = GraphBuilder::new(vec![3]);
    let l = b.add(linear(3, 3, false), &[]);
    let r = b.add(LayerKind::ReLU, &[l]);
    let mut model = b.finish(r).unwrap();
    set_linear(
        &mut model.nodes[0].kind,
        &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        None,
    );
    let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
    let y = forward(&model, &x).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
}

/// 2-layer random MLP vs straight-line matrix arithmetic.
#[test]
fn mlp_matches_straight_line_matmul() {
    let mut model = arch::mlp(4, &[5], 3).unwrap();
    arch::init_params(&mut model, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = Tensor::new(vec![2, 4], x.clone()).unwrap();
    let y = forward(&model, &batch).unwrap();

    // independent reimplementation
    let (w1, b1) = match &model.nodes[0].kind {
        LayerKind::Linear { weight, bias, .. } => (weight.clone(), bias.clone().unwrap()),
        _ => unreachable!(),
    };
    let (w2, b2) = match &model.nodes[2].kind {
        LayerKind::Linear { weight, bias, .. } => (weight.clone(), bias.clone().unwrap()),
        _ => unreachable!(),
    };
    for bi in 0..2 {
        let mut h = vec![0.0f32; 5];
        for o in 0..5 {
            let mut acc = b1.data()[o];
            for k in 0..4 {
                acc += w1.data()[o * 4 + k] * x[bi * 4 + k];
            }
            h[o] = acc.max(0.0);
        }
        for o in 0..3 {
            let mut acc = b2.data()[o];
            for k in 0..5 {
                acc += w2.data()[o * 5 + k] * h[k];
            }
            assert!((acc - y.at2(bi, o)).abs() <= 1e-6, "bi={bi} o={o}");
        }
    }
}

#[test]
fn cross_entropy_analytic_cases() {
    let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let l = loss_cross_entropy(&logits, &[0]).unwrap();
    assert!((l - (2.0f32).ln()).abs() < 1e-6);

    let logits = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
    let l = loss_cross_entropy(&logits, &[0]).unwrap();
    assert!(l.abs() < 1e-6);

    // random logits vs explicit softmax-then-log oracle
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vals: Vec<f32> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let logits = Tensor::new(vec![3, 4], vals.clone()).unwrap();
    let labels = [1usize, 3, 0];
    let l = loss_cross_entropy(&logits, &labels).unwrap();
    let mut want = 0.0f64;
    for bi in 0..3 {
        let row = &vals[bi * 4..(bi + 1) * 4];
        let denom: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
        let p = (row[labels[bi]] as f64).exp() / denom;
        want += -p.ln();
    }
    assert!((l as f64 - want / 3.0).abs() < 1e-5);

    assert!(loss_cross_entropy(&logits, &[0, 1, 9]).is_err());
}

#[test]
fn bias_gradient_is_softmax_minus_onehot() {
    // zero-weight output layer: logits are the bias, symmetric at zero
    let mut b = GraphBuilder::new(vec![2]);
    let l = b.add(linear(2, 3, true), &[]);
    let model = b.finish(l).unwrap();
    let batch = Tensor::new(vec![2, 2], vec![0.3, -0.4, 0.8, 0.1]).unwrap();
    let grads = backward(&model, &batch, &[0, 2]).unwrap();
    let db = &grads[&(0, Param::Bias)];
    // softmax of zero logits = 1/3 each; onehot mean over classes 0 and 2
    let want = [
        (1.0 / 3.0 - 1.0) / 2.0 + (1.0 / 3.0) / 2.0,
        (1.0 / 3.0) / 2.0 + (1.0 / 3.0) / 2.0,
        (1.0 / 3.0) / 2.0 + (1.0 / 3.0 - 1.0) / 2.0,
    ];
    for (g, w) in db.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-6);
    }
}

#[test]
fn dead_branch_gradient_is_zero() {
    // a hanging linear layer never reaches the loss
    let mut b = GraphBuilder::new(vec![2]);
    let l1 = b.add(linear(2, 3, true), &[]);
    let _dead = b.add(linear(3, 4, true), &[l1]);
    let mut model = b.finish(l1).unwrap();
    arch::init_params(&mut model, 3);
    let batch = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
    let grads = backward(&model, &batch, &[1]).unwrap();
    let gw = &grads[&(1, Param::Weight)];
    assert!(gw.data().iter().all(|&g| g == 0.0));
    let gw1 = &grads[&(0, Param::Weight)];
    assert!(gw1.data().iter().any(|&g| g != 0.0));
}

#[test]
fn batchnorm_inference_scalar_check() {
    let mut b = GraphBuilder::new(vec![1]);
    let l = b.add(linear(1, 1, true), &[]);
    let bn = b.add(arch::batchnorm(1), &[l]);
    let mut model = b.finish(bn).unwrap();
    set_linear(&mut model.nodes[0].kind, &[1.0], Some(&[0.0]));
    let x = 3.0f32;
    let want = if let LayerKind::BatchNorm {
        gamma,
        beta,
        running_mean,
        running_var,
        epsilon,
        ..
    } = &mut model.nodes[1].kind
    {
        gamma.data_mut()[0] = 2.0;
        beta.data_mut()[0] = 0.5;
        running_mean.data_mut()[0] = 1.0;
        running_var.data_mut()[0] = 4.0;
        2.0 * (x - 1.0) / (4.0 + *epsilon).sqrt() + 0.5
    } else {
        panic!();
    };
    let batch = Tensor::new(vec![1, 1], vec![x]).unwrap();
    let y = forward(&model, &batch).unwrap();
    assert!((y.data()[0] - want).abs() < 1e-6);
}

#[test]
fn forward_is_deterministic() {
    let mut model = arch::resnet_toy(1, 8, 4, 10).unwrap();
    arch::init_params(&mut model, 5);
    arch::randomize_bn(&mut model, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<f32> = (0..2 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = Tensor::new(vec![2, 1, 8, 8], x).unwrap();
    let a = forward(&model, &batch).unwrap();
    let b = forward(&model, &batch).unwrap();
    assert_eq!(a.data(), b.data());
}

fn finite_difference_check(mut model: prunefuse_core::graph::ModelGraph, batch: Tensor, labels: Vec<usize>) {
    use prunefuse_core::model_io::node_params_mut;
    let grads = backward(&model, &batch, &labels).unwrap();
    let h = 1e-3f32;
    let mut total = 0usize;
    let mut ok = 0usize;
    let node_ids: Vec<usize> = model.nodes.iter().map(|n| n.id).collect();
    for id in node_ids {
        let params: Vec<(Param, usize)> = node_params_mut(&mut model.nodes[id].kind)
            .into_iter()
            .filter(|(p, _)| !matches!(p, Param::RunningMean | Param::RunningVar))
            .map(|(p, t)| (p, t.len()))
            .collect();
        for (param, len) in params {
            for k in 0..len {
                let orig = {
                    let t = node_params_mut(&mut model.nodes[id].kind)
                        .into_iter()
                        .find(|(p, _)| *p == param)
                        .unwrap()
                        .1;
                    let o = t.data()[k];
                    t.data_mut()[k] = o + h;
                    o
                };
                let lp = loss_cross_entropy(&forward(&model, &batch).unwrap(), &labels).unwrap();
                {
                    let t = node_params_mut(&mut model.nodes[id].kind)
                        .into_iter()
                        .find(|(p, _)| *p == param)
                        .unwrap()
                        .1;
                    t.data_mut()[k] = orig - h;
                }
                let lm = loss_cross_entropy(&forward(&model, &batch).unwrap(), &labels).unwrap();
                {
                    let t = node_params_mut(&mut model.nodes[id].kind)
                        .into_iter()
                        .find(|(p, _)| *p == param)
                        .unwrap()
                        .1;
                    t.data_mut()[k] = orig;
                }
                let fd = ((lp - lm) as f64) / (2.0 * h as f64);
                let g = grads[&(id, param)].data()[k] as f64;
                total += 1;
                // absolute slack = central-difference noise floor for an
                // O(1) f32 loss at h = 1e-3
                let tol = 1e-3 * fd.abs().max(g.abs()) + 2e-4;
                if (fd - g).abs() <= tol {
                    ok += 1;
                }
            }
        }
    }
    let frac = ok as f64 / total as f64;
    assert!(
        frac >= 0.99,
        "finite differences agree on only {ok}/{total} parameters"
    );
}

#[test]
fn finite_differences_mlp() {
    let mut model = arch::mlp(6, &[5, 4], 3).unwrap();
    arch::init_params(&mut model, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x: Vec<f32> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    finite_difference_check(model, Tensor::new(vec![4, 6], x).unwrap(), vec![0, 1, 2, 0]);
}

#[test]
fn finite_differences_vgg_toy() {
    let mut model = arch::vgg_toy(1, 4, &[2, 3], 3).unwrap();
    arch::init_params(&mut model, 23);
    arch::randomize_bn(&mut model, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x: Vec<f32> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    finite_difference_check(model, Tensor::new(vec![3, 1, 4, 4], x).unwrap(), vec![0, 2, 1]);
}

#[test]
fn finite_differences_resnet_toy() {
    let mut model = arch::resnet_toy(1, 4, 3, 3).unwrap();
    arch::init_params(&mut model, 26);
    arch::randomize_bn(&mut model, 27);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let x: Vec<f32> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    finite_difference_check(model, Tensor::new(vec![3, 1, 4, 4], x).unwrap(), vec![1, 0, 2]);
}

#[test]
fn shape_mismatch_names_offending_edge() {
    let mut b = GraphBuilder::new(vec![3]);
    let l1 = b.add(linear(3, 4, true), &[]);
    let _l2 = b.add(linear(5, 2, true), &[l1]);
    let err = b.finish(1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("node 1"), "unexpected message: {msg}");
}
