use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::train::{forward_fen, inner_step_on_features, Aggregation};
use crate::data::Dataset;
use crate::error::{FusionError, Result};
use crate::rng::{self, streams};
use crate::tensor::{argmax_rows, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTestConfig {
    pub shots_per_class: usize,
    /// Numbers of sequentially learned classes to report.
    pub task_counts: Vec<usize>,
    pub lr: f64,
    /// Passes over the class sequence.
    pub epochs: usize,
    pub seed: u64,
    /// Original class ids, only used for the disjointness check; empty skips it.
    pub train_class_ids: Vec<usize>,
    pub test_class_ids: Vec<usize>,
}

impl Default for MetaTestConfig {
    fn default() -> Self {
        Self {
            shots_per_class: 5,
            task_counts: vec![2, 4, 6, 8, 10],
            lr: 0.03,
            epochs: 1,
            seed: 0,
            train_class_ids: Vec::new(),
            test_class_ids: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaTestPoint {
    pub tasks: usize,
    /// Percent correct on held-out samples of all classes seen so far.
    pub accuracy: f64,
}

/// Per-class shots and held-out samples, in presentation order.
struct Plan {
    order: Vec<usize>,
    shots: Vec<Vec<usize>>,
    held_out: Vec<Vec<usize>>,
}

fn plan(test: &Dataset, cfg: &MetaTestConfig, rng: &mut rng::FusionRng) -> Result<Plan> {
    let classes = test.class_count();
    let mut shots = Vec::with_capacity(classes);
    let mut held_out = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut idx = test.class_indices(c);
        if idx.len() <= cfg.shots_per_class {
            return Err(FusionError::Contract(format!(
                "class {c} has {} samples, needs more than {} shots",
                idx.len(),
                cfg.shots_per_class
            )));
        }
        idx.shuffle(rng);
        held_out.push(idx.split_off(cfg.shots_per_class));
        shots.push(idx);
    }
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(rng);
    Ok(Plan { order, shots, held_out })
}

/// Freezes the feature extractor and attention, replaces the output layer with
/// one sized to the test classes, and learns the first `tasks` classes of the
/// presentation order with one meta-example step per class and epoch.
/// Returns the fine-tuned model and its held-out accuracy.
pub fn meta_test_run(model: &Model, test: &Dataset, tasks: usize, cfg: &MetaTestConfig) -> Result<(Model, f64)> {
    let mut rng = rng::stream(cfg.seed, streams::META_TEST);
    let p = plan(test, cfg, &mut rng)?;
    let features = forward_fen(model, test.images())?;
    run_with_plan(model, test, &features, &p, tasks, cfg, &mut rng)
}

fn run_with_plan(
    model: &Model,
    test: &Dataset,
    features: &Tensor,
    p: &Plan,
    tasks: usize,
    cfg: &MetaTestConfig,
    rng: &mut rng::FusionRng,
) -> Result<(Model, f64)> {
    if tasks == 0 || tasks > p.order.len() {
        return Err(FusionError::Contract(format!("{tasks} tasks from {} test classes", p.order.len())));
    }
    let mut tuned = model.clone();
    tuned.reset_output_layer(test.class_count(), rng);
    let seen = &p.order[..tasks];
    for _ in 0..cfg.epochs {
        for &c in seen {
            let r = features.select(&p.shots[c])?;
            inner_step_on_features(&mut tuned, &r, c, cfg.lr, Aggregation::Attention, 1.0, false)?;
        }
    }
    let eval: Vec<usize> = seen.iter().flat_map(|&c| p.held_out[c].iter().copied()).collect();
    let logits = tuned.logits_from_features(&features.select(&eval)?)?;
    let correct = argmax_rows(&logits)
        .into_iter()
        .zip(&eval)
        .filter(|(pred, &i)| *pred == test.labels()[i])
        .count();
    Ok((tuned, 100.0 * correct as f64 / eval.len() as f64))
}

/// Accuracy after learning 1..=T test classes sequentially, for each requested count.
pub fn meta_test(model: &Model, test: &Dataset, cfg: &MetaTestConfig) -> Result<Vec<MetaTestPoint>> {
    if let Some(c) = cfg.test_class_ids.iter().find(|c| cfg.train_class_ids.contains(c)) {
        return Err(FusionError::Contract(format!("class {c} is in both train and test splits")));
    }
    let mut rng = rng::stream(cfg.seed, streams::META_TEST);
    let p = plan(test, cfg, &mut rng)?;
    let features = forward_fen(model, test.images())?;
    cfg.task_counts
        .iter()
        .map(|&tasks| {
            let (_, accuracy) = run_with_plan(model, test, &features, &p, tasks, cfg, &mut rng)?;
            Ok(MetaTestPoint { tasks, accuracy })
        })
        .collect()
}
