use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cluster::BalanceMode;
use crate::error::{FusionError, Result};
use crate::meml::InnerMode;

/// Environment variable naming the data root; defaults to `data`.
pub const DATA_DIR_ENV: &str = "FUSION_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    FusionMeml,
    FusionMemlx,
    ClBench,
    AblationSingleVsMulti,
    AblationBalancedVsUnbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated template classes.
    Synthetic,
    /// The four MNIST IDX files under `<data root>/<data.dir>`.
    Mnist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClMethod {
    Naive,
    Er,
    MemlCl,
}

impl ClMethod {
    pub fn name(self) -> &'static str {
        match self {
            ClMethod::Naive => "naive",
            ClMethod::Er => "er",
            ClMethod::MemlCl => "meml_cl",
        }
    }
}

/// Flat experiment configuration; every key is a dotted path in the JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out_dir: String,

    #[serde(rename = "data.source")]
    pub data_source: DataSource,
    #[serde(rename = "data.dir")]
    pub data_dir: String,
    #[serde(rename = "data.num_classes")]
    pub data_num_classes: usize,
    #[serde(rename = "data.samples_min")]
    pub data_samples_min: usize,
    #[serde(rename = "data.samples_max")]
    pub data_samples_max: usize,
    #[serde(rename = "data.image_size")]
    pub data_image_size: usize,
    #[serde(rename = "data.noise_sigma")]
    pub data_noise_sigma: f64,

    #[serde(rename = "split.train_classes")]
    pub split_train_classes: usize,
    #[serde(rename = "split.test_classes")]
    pub split_test_classes: usize,

    #[serde(rename = "embed.latent_dim")]
    pub embed_latent_dim: usize,
    #[serde(rename = "embed.hidden")]
    pub embed_hidden: usize,
    #[serde(rename = "embed.epochs")]
    pub embed_epochs: usize,
    #[serde(rename = "embed.lr")]
    pub embed_lr: f64,
    #[serde(rename = "embed.batch_size")]
    pub embed_batch_size: usize,

    #[serde(rename = "cluster.k")]
    pub cluster_k: usize,
    #[serde(rename = "cluster.max_iters")]
    pub cluster_max_iters: usize,

    #[serde(rename = "tasks.min_cluster_size")]
    pub tasks_min_cluster_size: usize,
    #[serde(rename = "tasks.query_random_count")]
    pub tasks_query_random_count: usize,
    #[serde(rename = "tasks.balance")]
    pub tasks_balance: BalanceMode,
    #[serde(rename = "tasks.target_size")]
    pub tasks_target_size: Option<usize>,

    #[serde(rename = "model.filters")]
    pub model_filters: usize,
    #[serde(rename = "model.kernel")]
    pub model_kernel: usize,
    #[serde(rename = "model.strides")]
    pub model_strides: Option<Vec<usize>>,
    #[serde(rename = "model.cln_hidden")]
    pub model_cln_hidden: usize,

    #[serde(rename = "meta.alpha")]
    pub meta_alpha: f64,
    #[serde(rename = "meta.beta")]
    pub meta_beta: f64,
    #[serde(rename = "meta.steps")]
    pub meta_steps: usize,
    #[serde(rename = "meta.m")]
    pub meta_m: usize,
    #[serde(rename = "meta.inner_mode")]
    pub meta_inner_mode: InnerMode,
    #[serde(rename = "meta.loss_weighting")]
    pub meta_loss_weighting: bool,

    #[serde(rename = "augment.brightness")]
    pub augment_brightness: f64,
    #[serde(rename = "augment.contrast")]
    pub augment_contrast: (f64, f64),
    #[serde(rename = "augment.saturation")]
    pub augment_saturation: (f64, f64),
    #[serde(rename = "augment.hue")]
    pub augment_hue: f64,
    #[serde(rename = "augment.max_shift")]
    pub augment_max_shift: u32,

    #[serde(rename = "test.shots")]
    pub test_shots: usize,
    #[serde(rename = "test.task_counts")]
    pub test_task_counts: Vec<usize>,
    #[serde(rename = "test.lr")]
    pub test_lr: f64,
    #[serde(rename = "test.epochs")]
    pub test_epochs: usize,

    #[serde(rename = "cl.classes_per_task")]
    pub cl_classes_per_task: usize,
    #[serde(rename = "cl.methods")]
    pub cl_methods: Vec<ClMethod>,
    #[serde(rename = "cl.epochs")]
    pub cl_epochs: usize,
    #[serde(rename = "cl.lr")]
    pub cl_lr: f64,
    #[serde(rename = "cl.batch_size")]
    pub cl_batch_size: usize,
    #[serde(rename = "cl.buffer")]
    pub cl_buffer: usize,
    #[serde(rename = "cl.alpha")]
    pub cl_alpha: f64,
    #[serde(rename = "cl.beta")]
    pub cl_beta: f64,
    #[serde(rename = "cl.memlx")]
    pub cl_memlx: bool,
    #[serde(rename = "cl.hidden")]
    pub cl_hidden: usize,
    /// Use only the first N training samples of each task.
    #[serde(rename = "cl.train_limit")]
    pub cl_train_limit: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::FusionMeml,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: "runs".into(),
            data_source: DataSource::Synthetic,
            data_dir: "mnist".into(),
            data_num_classes: 30,
            data_samples_min: 10,
            data_samples_max: 30,
            data_image_size: 16,
            data_noise_sigma: 0.0,
            split_train_classes: 20,
            split_test_classes: 10,
            embed_latent_dim: 16,
            embed_hidden: 128,
            embed_epochs: 20,
            embed_lr: 1e-3,
            embed_batch_size: 32,
            cluster_k: 20,
            cluster_max_iters: 100,
            tasks_min_cluster_size: 3,
            tasks_query_random_count: 10,
            tasks_balance: BalanceMode::Off,
            tasks_target_size: None,
            model_filters: 32,
            model_kernel: 3,
            model_strides: None,
            model_cln_hidden: 128,
            meta_alpha: 0.1,
            meta_beta: 1e-4,
            meta_steps: 2000,
            meta_m: 3,
            meta_inner_mode: InnerMode::MetaExample,
            meta_loss_weighting: false,
            augment_brightness: 0.2,
            augment_contrast: (0.8, 1.2),
            augment_saturation: (0.8, 1.2),
            augment_hue: 0.1,
            augment_max_shift: 2,
            test_shots: 5,
            test_task_counts: vec![2, 4, 6, 8, 10],
            test_lr: 0.03,
            test_epochs: 1,
            cl_classes_per_task: 2,
            cl_methods: vec![ClMethod::Naive, ClMethod::Er, ClMethod::MemlCl],
            cl_epochs: 1,
            cl_lr: 0.1,
            cl_batch_size: 10,
            cl_buffer: 500,
            cl_alpha: 0.03,
            cl_beta: 0.1,
            cl_memlx: false,
            cl_hidden: 100,
            cl_train_limit: None,
        }
    }
}

fn first_line(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.find(" at line") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

impl ExperimentConfig {
    /// Parses a flat JSON object; every problem is reported against the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| FusionError::config("<file>", format!("not valid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(FusionError::config("<file>", "top level must be a JSON object"));
        };
        if !map.contains_key("kind") {
            return Err(FusionError::config("kind", "required key is missing"));
        }
        let Value::Object(defaults) = serde_json::to_value(Self::default())? else {
            unreachable!("config serializes to an object");
        };
        for (key, v) in &map {
            if !defaults.contains_key(key) {
                return Err(FusionError::config(key.as_str(), "unknown key"));
            }
            let mut probe: Map<String, Value> = defaults.clone();
            probe.insert(key.clone(), v.clone());
            if let Err(e) = serde_json::from_value::<Self>(Value::Object(probe)) {
                return Err(FusionError::config(key.as_str(), first_line(&e)));
            }
        }
        let cfg: Self = serde_json::from_value(Value::Object(map))
            .map_err(|e| FusionError::config("<file>", first_line(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FusionError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Range and cross-key checks.
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, r: String| Err(FusionError::config(k, r));
        if self.seeds.is_empty() {
            return err("seeds", "must list at least one seed".into());
        }
        let rates = [
            ("embed.lr", self.embed_lr),
            ("meta.alpha", self.meta_alpha),
            ("meta.beta", self.meta_beta),
            ("test.lr", self.test_lr),
            ("cl.lr", self.cl_lr),
            ("cl.alpha", self.cl_alpha),
            ("cl.beta", self.cl_beta),
            ("data.noise_sigma", self.data_noise_sigma),
        ];
        for (k, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return err(k, format!("must be finite and ≥ 0, got {v}"));
            }
        }
        let positive = [
            ("embed.latent_dim", self.embed_latent_dim),
            ("embed.batch_size", self.embed_batch_size),
            ("embed.hidden", self.embed_hidden),
            ("cluster.k", self.cluster_k),
            ("cluster.max_iters", self.cluster_max_iters),
            ("model.filters", self.model_filters),
            ("model.kernel", self.model_kernel),
            ("split.train_classes", self.split_train_classes),
            ("split.test_classes", self.split_test_classes),
            ("cl.classes_per_task", self.cl_classes_per_task),
            ("cl.batch_size", self.cl_batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return err(k, "must be positive".into());
            }
        }
        if self.embed_latent_dim < 2 {
            return err("embed.latent_dim", "must be at least 2".into());
        }
        if self.tasks_min_cluster_size < 3 {
            return err("tasks.min_cluster_size", "must be at least 3".into());
        }
        if self.data_samples_min < 2 || self.data_samples_max < self.data_samples_min {
            return err("data.samples_min", "need 2 ≤ samples_min ≤ samples_max".into());
        }
        if self.data_source == DataSource::Synthetic
            && self.split_train_classes + self.split_test_classes > self.data_num_classes
        {
            return err(
                "split.test_classes",
                format!(
                    "{} + {} classes exceed data.num_classes {}",
                    self.split_train_classes, self.split_test_classes, self.data_num_classes
                ),
            );
        }
        if self.data_source == DataSource::Synthetic && self.test_shots >= self.data_samples_min {
            return err("test.shots", "must leave held-out samples in every class".into());
        }
        if self.test_task_counts.iter().any(|&t| t == 0 || t > self.split_test_classes) {
            return err("test.task_counts", format!("entries must be in 1..={}", self.split_test_classes));
        }
        if matches!(self.kind, ExperimentKind::FusionMemlx) && self.meta_m == 0 {
            return err("meta.m", "must be positive for augmentation".into());
        }
        if self.augment_contrast.0 > self.augment_contrast.1 || self.augment_contrast.0 < 0.0 {
            return err("augment.contrast", "need 0 ≤ min ≤ max".into());
        }
        if self.augment_saturation.0 > self.augment_saturation.1 || self.augment_saturation.0 < 0.0 {
            return err("augment.saturation", "need 0 ≤ min ≤ max".into());
        }
        if !(self.augment_brightness >= 0.0 && self.augment_hue >= 0.0) {
            return err("augment.brightness", "ranges must be non-negative".into());
        }
        if let Some(s) = &self.model_strides {
            if s.is_empty() || s.contains(&0) {
                return err("model.strides", "need at least one positive stride".into());
            }
        }
        if self.kind == ExperimentKind::ClBench {
            if self.data_source != DataSource::Mnist {
                return err("data.source", "cl_bench needs the mnist source".into());
            }
            if self.cl_methods.is_empty() {
                return err("cl.methods", "must list at least one method".into());
            }
            if self.cl_memlx && self.meta_m == 0 {
                return err("meta.m", "must be positive for augmentation".into());
            }
        }
        Ok(())
    }

    pub fn data_root() -> PathBuf {
        std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn mnist_dir(&self) -> PathBuf {
        Self::data_root().join(&self.data_dir)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
