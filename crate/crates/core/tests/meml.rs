mod common;

use common::meta::{explicit_attention, micro_net, outer_fd_error};

use fusion_core::data::Dataset;
use fusion_core::meml::{
    attention_aggregate, forward_fen, inner_update, meta_test_run, outer_update, Aggregation, Architecture, Backbone,
    MetaTestConfig, Model,
};
use fusion_core::tensor::{Optimizer, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn conv_model(classes: usize, seed: u64) -> Model {
    Model::new(Architecture::conv_default([1, 16, 16], classes), seed).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = common::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn attention_matches_explicit_weighted_sum() {
    let model = conv_model(3, 1);
    let r = random(&[3, model.feature_dim()], 2);
    let me = attention_aggregate(&model, &r).unwrap();
    let (a, agg) = explicit_attention(&model, &r);
    for (x, y) in me.coefficients.iter().zip(&a) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in me.aggregate.iter().zip(&agg) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn attention_degenerate_cases() {
    let model = conv_model(3, 3);
    let d = model.feature_dim();
    let one = random(&[1, d], 4);
    let me = attention_aggregate(&model, &one).unwrap();
    assert_eq!(me.coefficients, vec![1.0]);
    assert_eq!(me.aggregate, one.data().to_vec());

    let row = random(&[1, d], 5);
    let same = Tensor::stack(&[row.data(), row.data(), row.data(), row.data()], &[d]).unwrap();
    let me = attention_aggregate(&model, &same).unwrap();
    assert!(me.coefficients.iter().all(|a| (a - 0.25).abs() < 1e-15));
    for (x, y) in me.aggregate.iter().zip(row.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn attention_is_permutation_invariant(seed in 0u64..10_000, n in 1usize..8) {
        let model = Model::new(Architecture::mlp_default(6, 3), seed).unwrap();
        let r = random(&[n, model.feature_dim()], seed + 1);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % n);
        let a = attention_aggregate(&model, &r).unwrap();
        let b = attention_aggregate(&model, &r.select(&perm).unwrap()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((b.coefficients[i] - a.coefficients[p]).abs() < 1e-12);
        }
        for (x, y) in a.aggregate.iter().zip(&b.aggregate) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.coefficients.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn inner_update_leaves_theta_bitwise_and_zero_alpha_is_identity() {
    let mut model = conv_model(4, 6);
    let support = random(&[5, 1, 16, 16], 7);
    let before = model.clone();
    inner_update(&mut model, &support, 2, 0.0, Aggregation::Attention).unwrap();
    assert_eq!(model, before);
    inner_update(&mut model, &support, 2, 0.1, Aggregation::Attention).unwrap();
    assert_eq!(model.theta, before.theta);
    assert_ne!(model.w, before.w);
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn inner_step_matches_closed_form_logistic_update() {
    // Identity features and a linear two-class head: the logit gap is logistic in x.
    let arch = Architecture {
        backbone: Backbone::Mlp { input: 3, hidden: vec![] },
        attention_hidden: Some(2),
        cln_hidden: 0,
        classes: 2,
    };
    let mut model = Model::new(arch, 11).unwrap();
    let x = [0.3, -0.7, 0.45];
    let alpha = 0.25;
    for y in [0usize, 1] {
        let m0 = model.clone();
        let w = m0.w.tensors()[0].data();
        let b = m0.w.tensors()[1].data();
        let gap = (0..3).map(|k| x[k] * (w[k * 2 + 1] - w[k * 2])).sum::<f64>() + b[1] - b[0];
        let residual = sigmoid(gap) - y as f64;
        inner_update(&mut model, &Tensor::new(vec![1, 1, 1, 3], x.to_vec()).unwrap(), y, alpha, Aggregation::Attention).unwrap();
        let w1 = model.w.tensors()[0].data();
        let b1 = model.w.tensors()[1].data();
        for k in 0..3 {
            assert!((w1[k * 2 + 1] - (w[k * 2 + 1] - alpha * residual * x[k])).abs() < 1e-10);
            assert!((w1[k * 2] - (w[k * 2] + alpha * residual * x[k])).abs() < 1e-10);
        }
        assert!((b1[1] - (b[1] - alpha * residual)).abs() < 1e-10);
        // A single row gets weight 1 whatever rho is, so rho receives no gradient.
        assert_eq!(model.rho, m0.rho);
    }
}

#[test]
fn outer_gradient_matches_finite_differences() {
    let err = outer_fd_error();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn outer_update_with_zero_rate_keeps_phi() {
    let mut model = micro_net();
    let before = model.clone();
    let x = Tensor::new(vec![2, 1, 1, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    outer_update(&mut model, &x, &[0, 1], &mut Optimizer::adam(0.0), 1.0).unwrap();
    assert_eq!(model, before);
}

#[test]
fn saturated_query_barely_moves_parameters() {
    let mut model = micro_net();
    let b = model.w.tensors_mut()[1].data_mut();
    b[0] = 40.0;
    b[1] = -40.0;
    let before = model.clone();
    let x = Tensor::new(vec![1, 1, 1, 2], vec![0.2, 0.1]).unwrap();
    outer_update(&mut model, &x, &[0], &mut Optimizer::sgd(0.1), 1.0).unwrap();
    let moved: f64 = before
        .w
        .tensors()
        .iter()
        .chain(before.theta.tensors())
        .zip(model.w.tensors().iter().chain(model.theta.tensors()))
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    assert!(moved < 1e-20, "moved {moved}");
}

#[test]
fn meta_test_freezes_feature_extractor_and_attention() {
    let model = conv_model(5, 8);
    let images = random(&[24, 1, 16, 16], 9);
    let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
    let test = Dataset::new(images, labels, 3, "t").unwrap();
    let cfg = MetaTestConfig { shots_per_class: 3, epochs: 2, ..Default::default() };
    let (tuned, acc) = meta_test_run(&model, &test, 3, &cfg).unwrap();
    assert_eq!(tuned.theta, model.theta);
    assert_eq!(tuned.rho, model.rho);
    assert_eq!(tuned.arch.classes, 3);
    assert!((0.0..=100.0).contains(&acc));
    assert_eq!(forward_fen(&tuned, test.images()).unwrap(), forward_fen(&model, test.images()).unwrap());
}

#[test]
fn single_test_class_is_always_right() {
    let model = conv_model(5, 10);
    let test = Dataset::new(random(&[8, 1, 16, 16], 11), vec![0; 8], 1, "one").unwrap();
    let cfg = MetaTestConfig { shots_per_class: 2, ..Default::default() };
    assert_eq!(meta_test_run(&model, &test, 1, &cfg).unwrap().1, 100.0);
}
