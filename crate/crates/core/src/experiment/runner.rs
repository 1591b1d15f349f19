use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::{ClMethod, DataSource, ExperimentConfig, ExperimentKind};
use crate::augment::AugmentConfig;
use crate::bench::{compute_metrics, train_er, train_meml_cl, train_naive, ClBenchmark, ClTrainConfig};
use crate::cluster::{
    build_task_distribution, embed, kmeans, train_autoencoder, AutoencoderConfig, BalanceMode, DistributionConfig,
    KMeansResult, TaskDistribution,
};
use crate::data::{load_mnist_dir, make_class_stream, make_synthetic_fewshot, split_classes, ClassSplit, Dataset, SyntheticConfig};
use crate::error::{FusionError, Result};
use crate::meml::{
    meta_test, meta_train, write_checkpoint, write_trace_csv, Architecture, Backbone, InnerMode, MetaHyper,
    MetaTestConfig, MetaTestPoint, Model,
};

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub aggregate: Value,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| FusionError::io(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn summary(xs: &[f64]) -> Value {
    let (mean, std) = mean_std(xs);
    json!({ "mean": mean, "std": std, "per_seed": xs })
}

/// Checks referenced files and shapes without training. Returns report lines.
pub fn validate_resources(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let mut report = vec![
        format!("kind: {}", serde_json::to_value(cfg.kind)?.as_str().unwrap_or("?")),
        format!("seeds: {:?}", cfg.seeds),
        format!("out_dir: {}", cfg.out_dir),
    ];
    let image_shape = match cfg.data_source {
        DataSource::Mnist => {
            let dir = cfg.mnist_dir();
            for f in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
                if !dir.join(f).is_file() {
                    return Err(FusionError::config("data.dir", format!("{} is missing", dir.join(f).display())));
                }
            }
            report.push(format!("data: mnist at {}", dir.display()));
            [1, 28, 28]
        }
        DataSource::Synthetic => {
            let min_train = cfg.split_train_classes * cfg.data_samples_min;
            if cfg.kind != ExperimentKind::ClBench && cfg.cluster_k > min_train {
                return Err(FusionError::config(
                    "cluster.k",
                    format!("{} clusters may exceed the {min_train} guaranteed training samples", cfg.cluster_k),
                ));
            }
            report.push(format!("data: synthetic, {} classes", cfg.data_num_classes));
            [1, cfg.data_image_size, cfg.data_image_size]
        }
    };
    if cfg.kind == ExperimentKind::ClBench {
        if 10 % cfg.cl_classes_per_task != 0 {
            return Err(FusionError::config("cl.classes_per_task", "must divide the 10 MNIST classes"));
        }
        report.push(format!("methods: {:?}", cfg.cl_methods.iter().map(|m| m.name()).collect::<Vec<_>>()));
    } else {
        if cfg.data_source == DataSource::Mnist && cfg.split_train_classes + cfg.split_test_classes > 10 {
            return Err(FusionError::config("split.test_classes", "mnist has 10 classes"));
        }
        architecture(cfg, image_shape, cfg.cluster_k)
            .feature_dim()
            .map_err(|e| FusionError::config("model.strides", e.to_string()))?;
        report.push(format!("meta-train steps per variant and seed: {}", cfg.meta_steps));
    }
    Ok(report)
}

fn architecture(cfg: &ExperimentConfig, [c, h, w]: [usize; 3], classes: usize) -> Architecture {
    let mut arch = Architecture::conv_default([c, h, w], classes);
    if let Backbone::Conv { filters, kernel, strides, .. } = &mut arch.backbone {
        *filters = cfg.model_filters;
        *kernel = cfg.model_kernel;
        if let Some(s) = &cfg.model_strides {
            *strides = s.clone();
        }
    }
    arch.cln_hidden = cfg.model_cln_hidden;
    arch
}

fn hyper(cfg: &ExperimentConfig, memlx: bool, inner_mode: InnerMode, loss_weighting: bool) -> MetaHyper {
    MetaHyper {
        alpha: cfg.meta_alpha,
        beta: cfg.meta_beta,
        steps: cfg.meta_steps,
        memlx,
        m: cfg.meta_m,
        inner_mode,
        loss_weighting,
        augment: augment_config(cfg),
    }
}

fn augment_config(cfg: &ExperimentConfig) -> AugmentConfig {
    AugmentConfig {
        brightness: cfg.augment_brightness,
        contrast: cfg.augment_contrast,
        saturation: cfg.augment_saturation,
        hue: cfg.augment_hue,
        max_shift: cfg.augment_max_shift,
    }
}

/// Data split, embeddings and pseudo-labels for one seed.
struct Prepared {
    split: ClassSplit,
    clusters: KMeansResult,
    ae_losses: (f64, f64),
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let source = match cfg.data_source {
        DataSource::Synthetic => make_synthetic_fewshot(&SyntheticConfig {
            num_classes: cfg.data_num_classes,
            samples_per_class: (cfg.data_samples_min, cfg.data_samples_max),
            image_size: cfg.data_image_size,
            noise_sigma: cfg.data_noise_sigma,
            seed,
        })?,
        DataSource::Mnist => load_mnist_dir(cfg.mnist_dir())?.0,
    };
    let split = split_classes(&source, cfg.split_train_classes, 0, cfg.split_test_classes, seed)?;
    let ae = train_autoencoder(
        &split.train,
        &AutoencoderConfig {
            latent_dim: cfg.embed_latent_dim,
            hidden: cfg.embed_hidden,
            epochs: cfg.embed_epochs,
            lr: cfg.embed_lr,
            batch_size: cfg.embed_batch_size,
            seed,
        },
    )?;
    let z = embed(&ae.encoder, &split.train)?;
    let clusters = kmeans(&z, cfg.cluster_k, cfg.cluster_max_iters, seed)?;
    Ok(Prepared { split, clusters, ae_losses: (ae.initial_loss, ae.final_loss()) })
}

fn distribution(cfg: &ExperimentConfig, p: &Prepared, mode: BalanceMode, seed: u64) -> Result<TaskDistribution> {
    build_task_distribution(
        &p.clusters.labels,
        &DistributionConfig {
            min_cluster_size: cfg.tasks_min_cluster_size,
            query_random_count: cfg.tasks_query_random_count,
            mode,
            target_size: cfg.tasks_target_size,
            seed,
        },
    )
}

struct VariantResult {
    points: Vec<MetaTestPoint>,
    trailing_loss: f64,
    inner_steps: usize,
}

fn train_and_test(
    cfg: &ExperimentConfig,
    p: &Prepared,
    dist: &TaskDistribution,
    hyper: &MetaHyper,
    seed: u64,
    dir: &Path,
    tag: &str,
) -> Result<VariantResult> {
    let arch = architecture(cfg, p.split.train.image_shape(), cfg.cluster_k.max(dist.label_count()));
    let model = Model::new(arch, seed)?;
    let out = meta_train(model, dist, &p.split.train, hyper, seed)?;
    write_trace_csv(dir.join(format!("{tag}_trace.csv")), &out.trace)?;
    write_checkpoint(&out.model, dir.join(format!("{tag}_model.ckpt")))?;
    let test_cfg = MetaTestConfig {
        shots_per_class: cfg.test_shots,
        task_counts: cfg.test_task_counts.clone(),
        lr: cfg.test_lr,
        epochs: cfg.test_epochs,
        seed,
        train_class_ids: p.split.train_classes.clone(),
        test_class_ids: p.split.test_classes.clone(),
    };
    let points = meta_test(&out.model, &p.split.test, &test_cfg)?;
    let mut csv = String::from("tasks,accuracy\n");
    for pt in &points {
        csv.push_str(&format!("{},{}\n", pt.tasks, pt.accuracy));
    }
    write(&dir.join(format!("{tag}_meta_test.csv")), &csv)?;
    let tail = &out.trace[out.trace.len().saturating_sub(100)..];
    let trailing_loss = if tail.is_empty() { 0.0 } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    Ok(VariantResult { points, trailing_loss, inner_steps: out.inner_steps })
}

/// Per-variant results across seeds.
#[derive(Default)]
struct VariantTable {
    accuracy: BTreeMap<usize, Vec<f64>>,
    trailing_loss: Vec<f64>,
    inner_steps: Vec<usize>,
    extra: Vec<Value>,
}

impl VariantTable {
    fn push(&mut self, r: &VariantResult) {
        for pt in &r.points {
            self.accuracy.entry(pt.tasks).or_default().push(pt.accuracy);
        }
        self.trailing_loss.push(r.trailing_loss);
        self.inner_steps.push(r.inner_steps);
    }

    fn to_json(&self) -> Value {
        let meta_test: Vec<Value> = self
            .accuracy
            .iter()
            .map(|(t, xs)| {
                let mut v = summary(xs);
                v["tasks"] = json!(t);
                v
            })
            .collect();
        let mut v = json!({
            "meta_test": meta_test,
            "trailing_outer_loss": summary(&self.trailing_loss),
            "inner_steps": self.inner_steps,
        });
        if !self.extra.is_empty() {
            v["task_sizes"] = json!(self.extra);
        }
        v
    }
}

fn comparison_csv(tables: &BTreeMap<String, VariantTable>, order: &[&str]) -> String {
    let mut s = String::from("variant,tasks,mean_accuracy,std_accuracy\n");
    for name in order {
        if let Some(t) = tables.get(*name) {
            for (tasks, xs) in &t.accuracy {
                let (m, sd) = mean_std(xs);
                s.push_str(&format!("{name},{tasks},{m},{sd}\n"));
            }
        }
    }
    s
}

fn run_fusion(cfg: &ExperimentConfig, dir: &Path, progress: &mut dyn FnMut(&str)) -> Result<Value> {
    let variants: Vec<(&str, bool, InnerMode, BalanceMode, bool)> = match cfg.kind {
        ExperimentKind::FusionMeml => vec![("meml", false, cfg.meta_inner_mode, cfg.tasks_balance, cfg.meta_loss_weighting)],
        ExperimentKind::FusionMemlx => vec![("memlx", true, cfg.meta_inner_mode, cfg.tasks_balance, cfg.meta_loss_weighting)],
        ExperimentKind::AblationSingleVsMulti => vec![
            ("multi_update", false, InnerMode::PerSample, cfg.tasks_balance, false),
            ("single_sample", false, InnerMode::SingleSample, cfg.tasks_balance, false),
            ("mean_meta_example", false, InnerMode::Mean, cfg.tasks_balance, false),
            ("meml", false, InnerMode::MetaExample, cfg.tasks_balance, false),
        ],
        ExperimentKind::AblationBalancedVsUnbalanced => vec![
            ("off", false, InnerMode::MetaExample, BalanceMode::Off, false),
            ("threshold", false, InnerMode::MetaExample, BalanceMode::Threshold, false),
            ("augment", false, InnerMode::MetaExample, BalanceMode::Augment, false),
            ("loss_weighting", false, InnerMode::MetaExample, BalanceMode::Off, true),
        ],
        ExperimentKind::ClBench => unreachable!("handled by run_cl"),
    };
    let mut tables: BTreeMap<String, VariantTable> = BTreeMap::new();
    let mut seeds_json = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = |e: FusionError| e.in_context(format!("seed {seed}"));
        let sdir = dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&sdir).map_err(|e| FusionError::io(&sdir, e))?;
        let p = prepare(cfg, seed).map_err(ctx)?;
        let mut task_sizes = BTreeMap::new();
        for &(name, memlx, inner, mode, weighting) in &variants {
            let dist = distribution(cfg, &p, mode, seed)?;
            dist.write(sdir.join(format!("tasks_{name}.bin")))?;
            let h = hyper(cfg, memlx, inner, weighting);
            let r = train_and_test(cfg, &p, &dist, &h, seed, &sdir, name).map_err(ctx)?;
            progress(&format!(
                "seed {seed} {name}: accuracy {:?}",
                r.points.iter().map(|x| (x.tasks, (x.accuracy * 10.0).round() / 10.0)).collect::<Vec<_>>()
            ));
            let table = tables.entry(name.to_string()).or_default();
            table.push(&r);
            if cfg.kind == ExperimentKind::AblationBalancedVsUnbalanced {
                table.extra.push(json!(dist.cluster_sizes()));
            }
            task_sizes.insert(name.to_string(), json!(dist.cluster_sizes()));
        }
        let seed_summary = json!({
            "seed": seed,
            "autoencoder_mse": { "initial": p.ae_losses.0, "final": p.ae_losses.1 },
            "kmeans_sizes": p.clusters.cluster_sizes(),
            "kmeans_inertia": p.clusters.inertia(),
            "task_sizes": task_sizes,
            "train_classes": p.split.train_classes,
            "test_classes": p.split.test_classes,
        });
        write_json(&sdir.join("summary.json"), &seed_summary)?;
        seeds_json.push(seed);
    }
    if variants.len() > 1 {
        let order: Vec<&str> = variants.iter().map(|v| v.0).collect();
        write(&dir.join("comparison.csv"), &comparison_csv(&tables, &order))?;
    }
    let results: serde_json::Map<String, Value> = tables.iter().map(|(k, t)| (k.clone(), t.to_json())).collect();
    Ok(json!({ "seeds": seeds_json, "results": results }))
}

fn limit_tasks(train: &Dataset, classes_per_task: usize, limit: Option<usize>) -> Result<Dataset> {
    let Some(limit) = limit else { return Ok(train.clone()) };
    let stream = make_class_stream(train, classes_per_task)?;
    let mut keep: Vec<usize> = stream.tasks.iter().flat_map(|t| t.iter().take(limit).copied()).collect();
    keep.sort_unstable();
    train.subset(&keep, train.name().to_string())
}

fn run_cl(cfg: &ExperimentConfig, dir: &Path, progress: &mut dyn FnMut(&str)) -> Result<Value> {
    let (train, test) = load_mnist_dir(cfg.mnist_dir())?;
    let train = limit_tasks(&train, cfg.cl_classes_per_task, cfg.cl_train_limit)?;
    let bench = ClBenchmark::new(train, test, cfg.cl_classes_per_task)?;
    let input: usize = bench.train.image_shape().iter().product();
    let classes = bench.train.class_count();
    let mut metrics: BTreeMap<&str, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let sdir = dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&sdir).map_err(|e| FusionError::io(&sdir, e))?;
        let tc = ClTrainConfig {
            epochs: cfg.cl_epochs,
            lr: cfg.cl_lr,
            batch_size: cfg.cl_batch_size,
            buffer_capacity: cfg.cl_buffer,
            alpha: cfg.cl_alpha,
            beta: cfg.cl_beta,
            memlx: cfg.cl_memlx,
            m: cfg.meta_m,
            augment: augment_config(cfg),
            seed,
        };
        for &method in &cfg.cl_methods {
            let arch = Architecture {
                backbone: Backbone::Mlp { input, hidden: vec![cfg.cl_hidden] },
                attention_hidden: None,
                cln_hidden: cfg.cl_hidden,
                classes,
            };
            let model = Model::new(arch, seed)?;
            let rec = match method {
                ClMethod::Naive => train_naive(&bench, model, &tc),
                ClMethod::Er => train_er(&bench, model, &tc),
                ClMethod::MemlCl => train_meml_cl(&bench, model, &tc),
            }
            .map_err(|e| e.in_context(format!("seed {seed} {}", method.name())))?;
            rec.write_csv(sdir.join(format!("{}_acc.csv", method.name())))?;
            rec.write_metrics_json(sdir.join(format!("{}_metrics.json", method.name())))?;
            let m = compute_metrics(&rec)?;
            progress(&format!("seed {seed} {}: final accuracy {:.2}", method.name(), m.final_acc));
            let entry = metrics.entry(method.name()).or_default();
            for (k, v) in [("final_acc", m.final_acc), ("fwt", m.fwt), ("bwt", m.bwt), ("forgetting", m.forgetting)] {
                entry.entry(k).or_default().push(v);
            }
        }
    }
    let results: serde_json::Map<String, Value> = metrics
        .iter()
        .map(|(name, ms)| {
            let inner: serde_json::Map<String, Value> = ms.iter().map(|(k, xs)| (k.to_string(), summary(xs))).collect();
            (name.to_string(), Value::Object(inner))
        })
        .collect();
    Ok(json!({ "seeds": cfg.seeds, "results": results }))
}

/// Runs every seed, writing `config.resolved.json`, `manifest.json`,
/// `seed_<s>/` artefacts and `aggregate.json` under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<RunOutput> {
    cfg.validate()?;
    validate_resources(cfg)?;
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| FusionError::io(&dir, e))?;
    write(&dir.join("config.resolved.json"), &cfg.to_json()?)?;
    let kind = serde_json::to_value(cfg.kind)?;
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "package": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "kind": kind,
            "seeds": cfg.seeds,
        }),
    )?;
    let mut aggregate = match cfg.kind {
        ExperimentKind::ClBench => run_cl(cfg, &dir, progress)?,
        _ => run_fusion(cfg, &dir, progress)?,
    };
    aggregate["kind"] = kind;
    write_json(&dir.join("aggregate.json"), &aggregate)?;
    Ok(RunOutput { dir, aggregate })
}
