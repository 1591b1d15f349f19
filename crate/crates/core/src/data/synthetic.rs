//! Desk-scale stand-in for a few-shot character dataset.
//!
//! Each class is a template drawn on a coarse 4×4 grid of cells, with cell
//! intensities jittered so templates are not purely binary. Samples add
//! Gaussian pixel noise to their template. All pixels are quantized to
//! `k/255` so a generated dataset survives an IDX round trip exactly.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{FusionError, Result};
use crate::rng;
use crate::tensor::Tensor;

const GRID: usize = 4;
const MIN_CELL_DISTANCE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    /// Inclusive range of samples per class.
    pub samples_per_class: (usize, usize),
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 30,
            samples_per_class: (10, 30),
            image_size: 16,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

fn quantize(p: f64) -> f64 {
    (p.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Template images, one per class, as flat `H·W` vectors.
pub fn templates(cfg: &SyntheticConfig, rng: &mut rng::FusionRng) -> Vec<Vec<f64>> {
    let size = cfg.image_size;
    let mut patterns: Vec<[bool; GRID * GRID]> = Vec::with_capacity(cfg.num_classes);
    let mut out = Vec::with_capacity(cfg.num_classes);
    while out.len() < cfg.num_classes {
        let mut cells = [false; GRID * GRID];
        cells.iter_mut().for_each(|c| *c = rng.random_bool(0.5));
        let levels: Vec<f64> = cells
            .iter()
            .map(|&on| {
                if on {
                    rng.random_range(0.6..1.0)
                } else {
                    rng.random_range(0.0..0.2)
                }
            })
            .collect();
        let far_enough = patterns.iter().all(|p| {
            p.iter().zip(&cells).filter(|(a, b)| a != b).count() >= MIN_CELL_DISTANCE
        });
        if !far_enough {
            continue;
        }
        patterns.push(cells);
        let img = (0..size * size)
            .map(|i| {
                let (y, x) = (i / size, i % size);
                quantize(levels[(y * GRID / size) * GRID + x * GRID / size])
            })
            .collect();
        out.push(img);
    }
    out
}

/// Generates a greyscale dataset of noisy class templates with per-class
/// counts drawn uniformly from `samples_per_class`. Samples are grouped by class.
pub fn make_synthetic_fewshot(cfg: &SyntheticConfig) -> Result<Dataset> {
    let (lo, hi) = cfg.samples_per_class;
    if lo < 2 || hi < lo {
        return Err(FusionError::Contract(format!(
            "samples per class range ({lo}, {hi}) needs 2 <= min <= max"
        )));
    }
    if cfg.num_classes == 0 || cfg.image_size < GRID {
        return Err(FusionError::Contract(format!(
            "need at least one class and image_size >= {GRID}"
        )));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(FusionError::Domain(format!("noise sigma {}", cfg.noise_sigma)));
    }
    let mut r = rng::stream(cfg.seed, rng::streams::DATA);
    let temps = templates(cfg, &mut r);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (class, t) in temps.iter().enumerate() {
        let count = r.random_range(lo..=hi);
        for _ in 0..count {
            if cfg.noise_sigma == 0.0 {
                pixels.extend_from_slice(t);
            } else {
                pixels.extend(t.iter().map(|&p| quantize(p + noise.sample(&mut r))));
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 1, cfg.image_size, cfg.image_size], pixels)?;
    Dataset::new(images, labels, cfg.num_classes, "synthetic-fewshot")
}
