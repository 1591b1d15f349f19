use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::buffer::ReplayBuffer;
use super::metrics::CLRunRecord;
use crate::augment::{memlx_select, AugStrategy, AugmentConfig, SetLoss};
use crate::cluster::{Batch, Member};
use crate::data::{make_class_stream, ClassStream, Dataset};
use crate::error::{check_finite, FusionError, Result};
use crate::meml::{forward_fen, inner_step_on_features, Aggregation, Model, Trainable};
use crate::rng::{self, streams, FusionRng};
use crate::tensor::{argmax_rows, Optimizer, Tape, Tensor};

/// Train/test streams split into the same class-incremental tasks.
#[derive(Debug, Clone)]
pub struct ClBenchmark {
    pub train: Dataset,
    pub test: Dataset,
    pub train_stream: ClassStream,
    pub test_stream: ClassStream,
}

impl ClBenchmark {
    pub fn new(train: Dataset, test: Dataset, classes_per_task: usize) -> Result<Self> {
        if train.class_count() != test.class_count() || train.image_shape() != test.image_shape() {
            return Err(FusionError::Consistency("train and test sets describe different problems".into()));
        }
        let train_stream = make_class_stream(&train, classes_per_task)?;
        let test_stream = make_class_stream(&test, classes_per_task)?;
        Ok(Self { train, test, train_stream, test_stream })
    }

    pub fn task_count(&self) -> usize {
        self.train_stream.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClTrainConfig {
    pub epochs: usize,
    /// SGD rate for the naive and replay baselines.
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Inner rate of the meta-example step.
    pub alpha: f64,
    /// SGD rate of the outer step.
    pub beta: f64,
    pub memlx: bool,
    pub m: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for ClTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.1,
            batch_size: 10,
            buffer_capacity: 500,
            alpha: 0.03,
            beta: 0.1,
            memlx: false,
            m: 3,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Method {
    Naive,
    Replay,
    MetaExample,
}

/// Accuracy on each task's test samples with argmax over every class.
pub fn evaluate_class_il(model: &Model, bench: &ClBenchmark) -> Result<Vec<f64>> {
    bench
        .test_stream
        .tasks
        .iter()
        .map(|idx| {
            let x = bench.test.images().select(idx)?;
            let pred = model.predict(&x)?;
            let correct = pred.iter().zip(idx).filter(|(p, &i)| **p == bench.test.labels()[i]).count();
            Ok(100.0 * correct as f64 / idx.len() as f64)
        })
        .collect()
}

fn overall_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    let n = data.len();
    let chunk = 2000;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let logits = model.logits(&data.images().select(&idx)?)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&idx)
            .filter(|(p, &i)| **p == data.labels()[i])
            .count();
    }
    Ok(100.0 * correct as f64 / n as f64)
}

fn sgd_on_loss(model: &mut Model, x: &Tensor, y: &[usize], replay: Option<&(Tensor, Vec<usize>)>, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, Trainable::All);
    let xv = tape.constant(x);
    let f = model.features(&mut tape, &b, xv)?;
    let logits = model.classify(&mut tape, &b, f)?;
    let mut loss = tape.cross_entropy(logits, y)?;
    if let Some((bx, by)) = replay {
        let bxv = tape.constant(bx);
        let bf = model.features(&mut tape, &b, bxv)?;
        let bl = model.classify(&mut tape, &b, bf)?;
        let bloss = tape.cross_entropy(bl, by)?;
        loss = tape.add(loss, bloss)?;
    }
    let value = check_finite(tape.value(loss)[0], || "training loss".into())?;
    tape.backward(loss)?;
    let mut grads = model.theta.collect_grads(&tape, &b.theta);
    grads.extend(model.rho.collect_grads(&tape, &b.rho));
    grads.extend(model.w.collect_grads(&tape, &b.w));
    Optimizer::sgd(lr).step(model.params_mut(), &grads)?;
    Ok(value)
}

fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    Tensor::new(shape, data)
}

struct Counters {
    inner: usize,
    outer: usize,
}

#[allow(clippy::too_many_arguments)]
fn meta_example_step(
    model: &mut Model,
    x: &Tensor,
    y: &[usize],
    replay: Option<(Tensor, Vec<usize>)>,
    cfg: &ClTrainConfig,
    strategies: &[AugStrategy],
    aug_rng: &mut FusionRng,
    counters: &mut Counters,
) -> Result<()> {
    let (x, replay) = if cfg.memlx {
        let support = Batch { images: x.clone(), labels: y.to_vec(), members: vec![Member::plain(0); y.len()] };
        let query = match &replay {
            Some((bx, by)) => Batch { images: bx.clone(), labels: by.clone(), members: vec![Member::plain(0); by.len()] },
            None => support.clone(),
        };
        let sel = memlx_select(model, &support, &query, strategies, &cfg.augment, SetLoss::MetaExample, aug_rng)?;
        let replay = replay.map(|(_, by)| (sel.query, by));
        (sel.support, replay)
    } else {
        (x.clone(), replay)
    };
    let r = forward_fen(model, &x)?;
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        inner_step_on_features(model, &r.select(&idx)?, c, cfg.alpha, Aggregation::Attention, 1.0, true)?;
        counters.inner += 1;
    }
    let (ox, oy) = match replay {
        Some((bx, by)) => (concat(&x, &bx)?, [y, by.as_slice()].concat()),
        None => (x, y.to_vec()),
    };
    sgd_on_loss(model, &ox, &oy, None, cfg.beta)?;
    counters.outer += 1;
    Ok(())
}

fn run(bench: &ClBenchmark, mut model: Model, cfg: &ClTrainConfig, method: Method) -> Result<CLRunRecord> {
    if cfg.batch_size == 0 {
        return Err(FusionError::Domain("batch_size must be positive".into()));
    }
    let shape = bench.train.image_shape();
    let item_shape = [shape[0], shape[1], shape[2]];
    let random_init_acc = evaluate_class_il(&model, bench)?;
    let mut order_rng = rng::stream(cfg.seed, streams::CL_TRAIN);
    let mut buf_rng = rng::split(&mut order_rng);
    let mut aug_rng = rng::stream(cfg.seed, streams::AUGMENT);
    let strategies = AugStrategy::cycle(cfg.m);
    let capacity = if method == Method::Naive { 0 } else { cfg.buffer_capacity };
    let mut buffer = ReplayBuffer::new(capacity);
    let mut counters = Counters { inner: 0, outer: 0 };
    let mut acc_matrix = Vec::with_capacity(bench.task_count());
    for (t, task) in bench.train_stream.tasks.iter().enumerate() {
        let mut step = 0usize;
        for _ in 0..cfg.epochs {
            let mut order = task.clone();
            order.shuffle(&mut order_rng);
            for chunk in order.chunks(cfg.batch_size) {
                let ctx = |e: FusionError| e.in_context(format!("task {t} step {step}"));
                let x = bench.train.images().select(chunk)?;
                let y: Vec<usize> = chunk.iter().map(|&i| bench.train.labels()[i]).collect();
                let replay = buffer.sample(chunk.len(), &item_shape, &mut buf_rng)?;
                match method {
                    Method::Naive => {
                        sgd_on_loss(&mut model, &x, &y, None, cfg.lr).map_err(ctx)?;
                        counters.outer += 1;
                    }
                    Method::Replay => {
                        sgd_on_loss(&mut model, &x, &y, replay.as_ref(), cfg.lr).map_err(ctx)?;
                        counters.outer += 1;
                    }
                    Method::MetaExample => {
                        meta_example_step(&mut model, &x, &y, replay, cfg, &strategies, &mut aug_rng, &mut counters)
                            .map_err(ctx)?;
                    }
                }
                for (&i, &label) in chunk.iter().zip(&y) {
                    buffer.insert(bench.train.image(i), label, &mut buf_rng);
                }
                step += 1;
            }
        }
        acc_matrix.push(evaluate_class_il(&model, bench)?);
    }
    Ok(CLRunRecord {
        acc_matrix,
        random_init_acc,
        final_acc: overall_accuracy(&model, &bench.test)?,
        inner_steps: counters.inner,
        outer_steps: counters.outer,
    })
}

/// Plain SGD task after task.
pub fn train_naive(bench: &ClBenchmark, model: Model, cfg: &ClTrainConfig) -> Result<CLRunRecord> {
    run(bench, model, cfg, Method::Naive)
}

/// SGD on the current batch loss plus the loss of an equally sized reservoir sample.
pub fn train_er(bench: &ClBenchmark, model: Model, cfg: &ClTrainConfig) -> Result<CLRunRecord> {
    run(bench, model, cfg, Method::Replay)
}

/// Per batch: one meta-example inner step per class present, then one outer
/// SGD step on the batch together with a reservoir sample.
pub fn train_meml_cl(bench: &ClBenchmark, model: Model, cfg: &ClTrainConfig) -> Result<CLRunRecord> {
    run(bench, model, cfg, Method::MetaExample)
}
