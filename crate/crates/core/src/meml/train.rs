use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Model, Trainable};
use crate::augment::{memlx_select, AugStrategy, AugmentConfig, SetLoss};
use crate::cluster::TaskDistribution;
use crate::data::Dataset;
use crate::error::{check_finite, FusionError, Result};
use crate::rng::{self, streams};
use crate::tensor::{Optimizer, Tape, Tensor};

/// How the support set drives the inner step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    /// One step on the attention-weighted meta-example.
    MetaExample,
    /// One step on the unweighted mean of the support features.
    Mean,
    /// One step on a single randomly chosen support sample.
    SingleSample,
    /// One step per support sample, in order.
    PerSample,
}

/// Which rows feed an aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    Attention,
    Mean,
    Row(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaExample {
    pub coefficients: Vec<f64>,
    pub aggregate: Vec<f64>,
}

/// Feature matrix for a batch of images.
pub fn forward_fen(model: &Model, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, Trainable::Nothing);
    let x = tape.constant(x);
    let f = model.features(&mut tape, &b, x)?;
    Ok(tape.tensor(f))
}

pub fn attention_aggregate(model: &Model, r: &Tensor) -> Result<MetaExample> {
    if r.ndim() != 2 || r.shape()[0] == 0 {
        return Err(FusionError::Dimension(format!("expected a non-empty n×d matrix, got {:?}", r.shape())));
    }
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, Trainable::Nothing);
    let rv = tape.constant(r);
    let (a, agg) = model.attend(&mut tape, &b, rv)?;
    Ok(MetaExample {
        coefficients: tape.value(a).to_vec(),
        aggregate: tape.value(agg).to_vec(),
    })
}

/// Single gradient step on the classifier loss of an aggregate of `features`.
/// Only the classifier moves when `train_rho` is false; theta never moves.
pub fn inner_step_on_features(
    model: &mut Model,
    features: &Tensor,
    label: usize,
    lr: f64,
    aggregation: Aggregation,
    weight: f64,
    train_rho: bool,
) -> Result<f64> {
    let n = features.shape()[0];
    if n == 0 {
        return Err(FusionError::Dimension("empty support set".into()));
    }
    let mut tape = Tape::new();
    let trainable = if train_rho { Trainable::Psi } else { Trainable::Head };
    let b = model.bind(&mut tape, trainable);
    let r = tape.constant(features);
    let agg = match aggregation {
        Aggregation::Attention => model.attend(&mut tape, &b, r)?.1,
        Aggregation::Mean => {
            let a = tape.constant(&Tensor::full(&[1, n], 1.0 / n as f64));
            tape.matmul(a, r)?
        }
        Aggregation::Row(i) => {
            if i >= n {
                return Err(FusionError::Index(format!("row {i} of {n}")));
            }
            let mut one_hot = Tensor::zeros(&[1, n]);
            one_hot.data_mut()[i] = 1.0;
            let a = tape.constant(&one_hot);
            tape.matmul(a, r)?
        }
    };
    let logits = model.classify(&mut tape, &b, agg)?;
    let loss = tape.cross_entropy(logits, &[label])?;
    let loss = tape.scale(loss, weight);
    let value = check_finite(tape.value(loss)[0], || "inner update".into())?;
    tape.backward(loss)?;
    if train_rho {
        let g = model.rho.collect_grads(&tape, &b.rho);
        Optimizer::sgd(lr).step(model.rho.iter_mut(), &g)?;
    }
    let g = model.w.collect_grads(&tape, &b.w);
    Optimizer::sgd(lr).step(model.w.iter_mut(), &g)?;
    Ok(value)
}

/// One inner step on psi from a support set that shares `label`.
pub fn inner_update(model: &mut Model, support: &Tensor, label: usize, alpha: f64, aggregation: Aggregation) -> Result<f64> {
    let r = forward_fen(model, support)?;
    inner_step_on_features(model, &r, label, alpha, aggregation, 1.0, true)
}

/// First-order outer step: query loss at the current (post-inner) parameters,
/// each query sample classified on its own features, one optimizer step on all partitions.
pub fn outer_update(model: &mut Model, query: &Tensor, labels: &[usize], opt: &mut Optimizer, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, Trainable::All);
    let x = tape.constant(query);
    let f = model.features(&mut tape, &b, x)?;
    let logits = model.classify(&mut tape, &b, f)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let loss = tape.scale(loss, weight);
    let value = check_finite(tape.value(loss)[0], || "outer update".into())?;
    tape.backward(loss)?;
    let mut grads = model.theta.collect_grads(&tape, &b.theta);
    grads.extend(model.rho.collect_grads(&tape, &b.rho));
    grads.extend(model.w.collect_grads(&tape, &b.w));
    opt.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// Meta-example loss of a support set, averaged over its label groups. Nothing is updated.
pub fn support_loss(model: &Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match groups.iter_mut().find(|g| g.0 == l) {
            Some(g) => g.1.push(i),
            None => groups.push((l, vec![i])),
        }
    }
    if groups.is_empty() {
        return Err(FusionError::Dimension("empty support set".into()));
    }
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, Trainable::Nothing);
    let x = tape.constant(images);
    let f = model.features(&mut tape, &b, x)?;
    let r = tape.tensor(f);
    let mut total = 0.0;
    for (label, idx) in &groups {
        let rows = tape.constant(&r.select(idx)?);
        let (_, agg) = model.attend(&mut tape, &b, rows)?;
        let logits = model.classify(&mut tape, &b, agg)?;
        let loss = tape.cross_entropy(logits, &[*label])?;
        total += tape.value(loss)[0];
    }
    Ok(total / groups.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaHyper {
    pub alpha: f64,
    pub beta: f64,
    pub steps: usize,
    pub memlx: bool,
    pub m: usize,
    pub inner_mode: InnerMode,
    /// Scales both losses of a task by the inverse relative size of its cluster.
    pub loss_weighting: bool,
    pub augment: AugmentConfig,
}

impl Default for MetaHyper {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1e-4,
            steps: 1000,
            memlx: false,
            m: 3,
            inner_mode: InnerMode::MetaExample,
            loss_weighting: false,
            augment: AugmentConfig::default(),
        }
    }
}

impl MetaHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(FusionError::Domain(format!("{name} = {v}")));
            }
        }
        if self.memlx && self.m == 0 {
            return Err(FusionError::Domain("memlx needs m ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub model: Model,
    /// Outer loss per step.
    pub trace: Vec<f64>,
    pub inner_steps: usize,
    pub outer_steps: usize,
    /// Strategy indices picked per step for support and query, when augmentation is on.
    pub memlx_choices: Vec<(usize, usize)>,
}

/// Sequential meta-training with meta-batch size 1.
pub fn meta_train(
    mut model: Model,
    distribution: &TaskDistribution,
    images: &Dataset,
    hyper: &MetaHyper,
    seed: u64,
) -> Result<MetaTrainOutcome> {
    hyper.validate()?;
    if model.arch.classes < distribution.label_count() {
        return Err(FusionError::Contract(format!(
            "classifier has {} outputs for {} pseudo-labels",
            model.arch.classes,
            distribution.label_count()
        )));
    }
    let mut task_rng = rng::stream(seed, streams::TASKS);
    let mut aug_rng = rng::stream(seed, streams::AUGMENT);
    let mut pick_rng = rng::stream(seed, streams::ABLATION);
    let strategies = AugStrategy::cycle(hyper.m);
    let mut opt = Optimizer::adam(hyper.beta);
    let mut out = MetaTrainOutcome {
        model: model.clone(),
        trace: Vec::with_capacity(hyper.steps),
        inner_steps: 0,
        outer_steps: 0,
        memlx_choices: Vec::new(),
    };
    for step in 0..hyper.steps {
        let ctx = |e: FusionError| e.in_context(format!("meta-train step {step}"));
        let task = distribution.sample_task(images, &mut task_rng)?;
        let (support, query) = if hyper.memlx {
            let sel = memlx_select(
                &model,
                &task.support,
                &task.query,
                &strategies,
                &hyper.augment,
                SetLoss::MetaExample,
                &mut aug_rng,
            )?;
            out.memlx_choices.push((sel.support_index, sel.query_index));
            (sel.support, sel.query)
        } else {
            (task.support.images, task.query.images)
        };
        let weight = if hyper.loss_weighting { distribution.balance_weight(task.cluster_size) } else { 1.0 };
        let r = forward_fen(&model, &support)?;
        let label = task.cluster_label;
        match hyper.inner_mode {
            InnerMode::MetaExample | InnerMode::Mean | InnerMode::SingleSample => {
                let agg = match hyper.inner_mode {
                    InnerMode::MetaExample => Aggregation::Attention,
                    InnerMode::Mean => Aggregation::Mean,
                    _ => Aggregation::Row(pick_rng.random_range(0..r.shape()[0])),
                };
                inner_step_on_features(&mut model, &r, label, hyper.alpha, agg, weight, true).map_err(ctx)?;
                out.inner_steps += 1;
            }
            InnerMode::PerSample => {
                for i in 0..r.shape()[0] {
                    let row = r.select(&[i])?;
                    inner_step_on_features(&mut model, &row, label, hyper.alpha, Aggregation::Row(0), weight, true)
                        .map_err(ctx)?;
                    out.inner_steps += 1;
                }
            }
        }
        let loss = outer_update(&mut model, &query, &task.query.labels, &mut opt, weight).map_err(ctx)?;
        out.outer_steps += 1;
        out.trace.push(loss);
    }
    out.model = model;
    Ok(out)
}

/// Writes `step,outer_loss` rows.
pub fn write_trace_csv(path: impl AsRef<std::path::Path>, trace: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("step,outer_loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, s).map_err(|e| FusionError::io(path, e))
}
