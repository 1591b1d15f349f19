use fusion_core::cluster::{
    build_task_distribution, embed, kmeans, train_autoencoder, AutoencoderConfig, DistributionConfig, EmbeddingSet,
};
use fusion_core::data::{make_synthetic_fewshot, Dataset, SyntheticConfig};
use fusion_core::rng;
use fusion_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Best accuracy over every relabelling of `pred` (brute force, small k only).
fn best_permutation_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    fn perms(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }
    perms(k)
        .into_iter()
        .map(|map| pred.iter().zip(truth).filter(|(p, t)| map[**p] == **t).count())
        .max()
        .unwrap() as f64
        / pred.len() as f64
}

#[test]
fn gaussian_blobs_are_recovered_exactly() {
    let centers = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let noise = Normal::new(0.0, 0.01).unwrap();
    for seed in 0..5 {
        let mut r = rng::stream(seed, 99);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..40 {
                rows.push(center.iter().map(|x| x + noise.sample(&mut r)).collect());
                truth.push(c);
            }
        }
        let z = EmbeddingSet::from_rows(&rows).unwrap();
        let res = kmeans(&z, 3, 100, seed).unwrap();
        assert!(res.converged);
        assert_eq!(best_permutation_accuracy(&res.labels, &truth, 3), 1.0, "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn inertia_never_increases(seed in 0u64..10_000, n in 5usize..60, k in 1usize..6) {
        let mut r = rng::stream(seed, 0);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let z = EmbeddingSet::from_rows(&rows).unwrap();
        let res = kmeans(&z, k.min(n), 50, seed).unwrap();
        for w in res.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", res.inertia_history);
        }
        prop_assert_eq!(res.labels.len(), n);
    }

    #[test]
    fn episodes_respect_cluster_structure(seed in 0u64..10_000, sizes in prop::collection::vec(1usize..15, 2..8), q in 0usize..6) {
        let pl: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
        let cfg = DistributionConfig { query_random_count: q, ..Default::default() };
        let Ok(dist) = build_task_distribution(&pl, &cfg) else { return Ok(()) };
        if dist.clusters().len() < 2 && q > 0 {
            return Ok(());
        }
        // Off mode keeps the size of every cluster that reaches the minimum.
        let mut expected: Vec<usize> = sizes.iter().copied().filter(|&s| s >= 3).collect();
        let mut got = dist.cluster_sizes();
        expected.sort_unstable();
        got.sort_unstable();
        prop_assert_eq!(got, expected);

        let n = pl.len();
        let images = Tensor::new(vec![n, 1, 1, 2], (0..2 * n).map(|i| (i % 5) as f64 / 5.0).collect()).unwrap();
        let ds = Dataset::new(images, vec![0; n], 1, "toy").unwrap();
        let mut r = rng::stream(seed, 1);
        for _ in 0..5 {
            let t = dist.sample_task(&ds, &mut r).unwrap();
            let size = t.cluster_size;
            prop_assert_eq!(t.support.len(), (2 * size).div_ceil(3));
            prop_assert_eq!(t.query.len(), size - t.support.len() + q);
            prop_assert!(t.support.members.iter().all(|m| pl[m.index] == t.cluster_label));
            prop_assert!(t.support.labels.iter().all(|&l| l == t.cluster_label));
            let own = &t.query.members[..size - t.support.len()];
            prop_assert!(own.iter().all(|m| pl[m.index] == t.cluster_label));
            prop_assert!(own.iter().all(|m| !t.support.members.iter().any(|s| s.index == m.index)));
            let others = &t.query.members[size - t.support.len()..];
            prop_assert!(others.iter().all(|m| pl[m.index] != t.cluster_label));
            for (m, &l) in t.query.members.iter().zip(&t.query.labels) {
                prop_assert_eq!(pl[m.index], l);
            }
        }
    }
}

#[test]
fn autoencoder_halves_reconstruction_error_on_clean_data() {
    let ds = make_synthetic_fewshot(&SyntheticConfig {
        num_classes: 10,
        samples_per_class: (10, 10),
        noise_sigma: 0.0,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let cfg = AutoencoderConfig { epochs: 15, seed: 4, ..Default::default() };
    let trained = train_autoencoder(&ds, &cfg).unwrap();
    assert!(
        trained.final_loss() < 0.5 * trained.initial_loss,
        "{} vs {}",
        trained.final_loss(),
        trained.initial_loss
    );
    let z = embed(&trained.encoder, &ds).unwrap();
    assert_eq!(z.len(), ds.len());
    assert_eq!(z, embed(&trained.encoder, &ds).unwrap());
}
