mod common;

use common::{hand_metric_cases, record, reservoir_chi2_p};

use fusion_core::bench::{
    compute_metrics, train_er, train_meml_cl, train_naive, ClBenchmark, ClTrainConfig,
};
use fusion_core::data::Dataset;
use fusion_core::meml::{Architecture, Model};
use fusion_core::rng;
use fusion_core::tensor::Tensor;
use rand::Rng;

#[test]
fn reservoir_retention_is_uniform() {
    let p = reservoir_chi2_p(2000);
    assert!(p > 0.01, "p {p}");
}

#[test]
fn metrics_match_hand_computation() {
    for (acc, init, [fwt, bwt, forgetting]) in hand_metric_cases() {
        let m = compute_metrics(&record(acc.clone(), init)).unwrap();
        assert_eq!((m.fwt, m.bwt, m.forgetting), (fwt, bwt, forgetting), "{acc:?}");
    }
}

#[test]
fn forgetting_dominates_negative_bwt_when_diagonal_is_best() {
    let mut r = rng::stream(5, 0);
    for _ in 0..200 {
        let t = r.random_range(2..7);
        let mut acc = vec![vec![0.0; t]; t];
        for j in 0..t {
            acc[j][j] = r.random_range(50.0..100.0);
            for i in j + 1..t {
                acc[i][j] = r.random_range(0.0..acc[j][j]);
            }
        }
        let m = compute_metrics(&record(acc, vec![0.0; t])).unwrap();
        assert!(m.forgetting >= (-m.bwt).max(0.0) - 1e-12);
    }
}

#[test]
fn never_forgetting_run_has_zero_bwt() {
    let acc = vec![vec![95., 0.], vec![95., 97.]];
    let m = compute_metrics(&record(acc, vec![3., 4.])).unwrap();
    assert_eq!(m.bwt, 0.0);
    assert_eq!(m.forgetting, 0.0);
    assert!(compute_metrics(&record(vec![vec![1.0]], vec![])).is_err());
}

/// Four well-separated classes of random 1×2×2 images.
fn toy_bench() -> ClBenchmark {
    let make = |n: usize, seed: u64| {
        let mut r = rng::stream(seed, 0);
        let mut px = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 4;
            for k in 0..4 {
                px.push(if k == c { r.random_range(0.7..1.0) } else { r.random_range(0.0..0.2) });
            }
            labels.push(c);
        }
        Dataset::new(Tensor::new(vec![n, 1, 2, 2], px).unwrap(), labels, 4, "toy").unwrap()
    };
    ClBenchmark::new(make(80, 1), make(40, 2), 2).unwrap()
}

fn toy_model(seed: u64) -> Model {
    Model::new(Architecture { cln_hidden: 8, ..Architecture::mlp_default(4, 4) }, seed).unwrap()
}

#[test]
fn two_classes_per_task_give_two_inner_steps_per_batch() {
    let bench = toy_bench();
    // One batch per task, holding both of its classes.
    let cfg = ClTrainConfig { batch_size: 40, ..Default::default() };
    let rec = train_meml_cl(&bench, toy_model(0), &cfg).unwrap();
    assert_eq!(rec.outer_steps, 2);
    assert_eq!(rec.inner_steps, 4);
}

#[test]
fn single_class_tasks_without_buffer_step_once_each_way() {
    let bench = ClBenchmark::new(toy_bench().train, toy_bench().test, 1).unwrap();
    let cfg = ClTrainConfig { batch_size: 10, buffer_capacity: 0, ..Default::default() };
    let rec = train_meml_cl(&bench, toy_model(1), &cfg).unwrap();
    assert_eq!(rec.outer_steps, 8);
    assert_eq!(rec.inner_steps, 8);
}

#[test]
fn training_loops_are_reproducible_and_bounded() {
    let bench = toy_bench();
    let cfg = ClTrainConfig { batch_size: 5, buffer_capacity: 8, ..Default::default() };
    for train in [train_naive, train_er, train_meml_cl] {
        let a = train(&bench, toy_model(3), &cfg).unwrap();
        let b = train(&bench, toy_model(3), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.acc_matrix.iter().flatten().chain(&a.random_init_acc).all(|v| (0.0..=100.0).contains(v)));
    }
    let memlx = ClTrainConfig { memlx: true, ..cfg };
    let a = train_meml_cl(&bench, toy_model(3), &memlx).unwrap();
    assert_eq!(a, train_meml_cl(&bench, toy_model(3), &memlx).unwrap());
}

#[test]
fn csv_and_metrics_json_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let rec = record(vec![vec![90., 5.], vec![80., 90.]], vec![10., 10.]);
    rec.write_csv(dir.path().join("acc.csv")).unwrap();
    rec.write_metrics_json(dir.path().join("metrics.json")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("acc.csv")).unwrap();
    assert_eq!(csv, "after_task,task_0,task_1\ninit,10,10\n0,90,5\n1,80,90\n");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["bwt"], -10.0);
}
