//! Image transforms and worst-case (max-loss) augmentation selection.
//!
//! Images are flat `C·H·W` slices. Every transform preserves shape and keeps
//! pixels in `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::Batch;
use crate::error::{FusionError, Result};
use crate::meml::{support_loss, Model};
use crate::rng::FusionRng;
use crate::tensor::{Tape, Tensor};

pub fn horizontal_flip(img: &[f64], [c, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = img[row + w - 1 - x];
            }
        }
    }
    out
}

pub fn vertical_flip(img: &[f64], [c, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + h - 1 - y) * w;
            let dst = (ch * h + y) * w;
            out[dst..dst + w].copy_from_slice(&img[src..src + w]);
        }
    }
    out
}

/// Integer translation; vacated pixels become 0.
pub fn shift(img: &[f64], [c, h, w]: [usize; 3], dy: i32, dx: i32) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h as i32 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i32 {
                continue;
            }
            for x in 0..w as i32 {
                let sx = x - dx;
                if sx < 0 || sx >= w as i32 {
                    continue;
                }
                out[(ch * h + y as usize) * w + x as usize] =
                    img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// `clip(contrast·(x − mean) + mean + brightness, 0, 1)` with the mean over the whole image.
pub fn color_jitter(img: &[f64], brightness_delta: f64, contrast_factor: f64) -> Vec<f64> {
    let mean = img.iter().sum::<f64>() / img.len().max(1) as f64;
    img.iter()
        .map(|&x| (contrast_factor * (x - mean) + mean + brightness_delta).clamp(0.0, 1.0))
        .collect()
}

/// Blends each RGB pixel with its luma. Only meaningful for three channels.
fn saturate(img: &mut [f64], [c, h, w]: [usize; 3], factor: f64) {
    if c != 3 {
        return;
    }
    let plane = h * w;
    for i in 0..plane {
        let (r, g, b) = (img[i], img[plane + i], img[2 * plane + i]);
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        for ch in 0..3 {
            let v = &mut img[ch * plane + i];
            *v = (luma + factor * (*v - luma)).clamp(0.0, 1.0);
        }
    }
}

/// Rotates chroma in YIQ space by `angle` radians. Only meaningful for three channels.
fn rotate_hue(img: &mut [f64], [c, h, w]: [usize; 3], angle: f64) {
    if c != 3 {
        return;
    }
    let plane = h * w;
    let (s, co) = angle.sin_cos();
    for p in 0..plane {
        let (r, g, b) = (img[p], img[plane + p], img[2 * plane + p]);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let i = 0.596 * r - 0.274 * g - 0.322 * b;
        let q = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i2, q2) = (co * i - s * q, s * i + co * q);
        let rgb = [
            y + 0.956 * i2 + 0.621 * q2,
            y - 0.272 * i2 - 0.647 * q2,
            y - 1.106 * i2 + 1.703 * q2,
        ];
        for (ch, v) in rgb.into_iter().enumerate() {
            img[ch * plane + p] = v.clamp(0.0, 1.0);
        }
    }
}

/// Random translation of up to `±max_shift` pixels per axis, zero fill.
pub fn random_crop_pad(img: &[f64], shape: [usize; 3], max_shift: u32, rng: &mut FusionRng) -> Vec<f64> {
    let m = max_shift as i32;
    let dy = rng.random_range(-m..=m);
    let dx = rng.random_range(-m..=m);
    shift(img, shape, dy, dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub hue: f64,
    pub max_shift: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: (0.8, 1.2),
            saturation: (0.8, 1.2),
            hue: 0.1,
            max_shift: 2,
        }
    }
}

/// The three transform chains used to build augmented sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugStrategy {
    /// Vertical then horizontal flip.
    Flips = 1,
    /// Brightness/contrast jitter; saturation and hue on RGB input only.
    ColorJitter = 2,
    /// Random translation followed by a random zero-padded crop.
    ShiftCrop = 3,
}

impl AugStrategy {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(AugStrategy::Flips),
            2 => Ok(AugStrategy::ColorJitter),
            3 => Ok(AugStrategy::ShiftCrop),
            _ => Err(FusionError::Domain(format!("augmentation strategy {id}"))),
        }
    }

    /// Strategies for `m` augmented sets, cycling 1, 2, 3, 1, ...
    pub fn cycle(m: usize) -> Vec<AugStrategy> {
        [AugStrategy::Flips, AugStrategy::ColorJitter, AugStrategy::ShiftCrop]
            .into_iter()
            .cycle()
            .take(m)
            .collect()
    }

    pub fn describe(self) -> &'static str {
        match self {
            AugStrategy::Flips => "vertical flip + horizontal flip",
            AugStrategy::ColorJitter => "colour jitter (brightness, contrast, saturation, hue)",
            AugStrategy::ShiftCrop => "random affine translation + random crop",
        }
    }

    /// Applies the chain to one image.
    pub fn apply(self, img: &[f64], shape: [usize; 3], cfg: &AugmentConfig, rng: &mut FusionRng) -> Vec<f64> {
        match self {
            AugStrategy::Flips => horizontal_flip(&vertical_flip(img, shape), shape),
            AugStrategy::ColorJitter => {
                let delta = rng.random_range(-cfg.brightness..=cfg.brightness);
                let factor = rng.random_range(cfg.contrast.0..=cfg.contrast.1);
                let mut out = color_jitter(img, delta, factor);
                if shape[0] == 3 {
                    let sat = rng.random_range(cfg.saturation.0..=cfg.saturation.1);
                    let hue = rng.random_range(-cfg.hue..=cfg.hue) * std::f64::consts::TAU;
                    saturate(&mut out, shape, sat);
                    rotate_hue(&mut out, shape, hue);
                }
                out
            }
            AugStrategy::ShiftCrop => {
                let shifted = random_crop_pad(img, shape, cfg.max_shift, rng);
                random_crop_pad(&shifted, shape, cfg.max_shift, rng)
            }
        }
    }

    /// Applies the chain to every image of an `N×C×H×W` tensor.
    pub fn apply_batch(self, images: &Tensor, cfg: &AugmentConfig, rng: &mut FusionRng) -> Result<Tensor> {
        let s = images.shape();
        let shape = [s[1], s[2], s[3]];
        let mut data = Vec::with_capacity(images.numel());
        for i in 0..s[0] {
            data.extend(self.apply(images.item(i), shape, cfg, rng));
        }
        Tensor::new(s.to_vec(), data)
    }
}

/// How a candidate set's loss is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetLoss {
    /// One meta-example per label group through the attention path, losses averaged over groups.
    MetaExample,
    /// Each sample classified on its own features.
    PerSample,
}

/// Loss of `batch` under the current parameters; nothing is updated.
pub fn set_loss(model: &Model, images: &Tensor, labels: &[usize], kind: SetLoss) -> Result<f64> {
    match kind {
        SetLoss::MetaExample => support_loss(model, images, labels),
        SetLoss::PerSample => {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, crate::meml::Trainable::Nothing);
            let x = tape.constant(images);
            let feats = model.features(&mut tape, &bound, x)?;
            let logits = model.classify(&mut tape, &bound, feats)?;
            let loss = tape.cross_entropy(logits, labels)?;
            Ok(tape.value(loss)[0])
        }
    }
}

#[derive(Debug, Clone)]
pub struct MemlxSelection {
    pub support: Tensor,
    pub query: Tensor,
    pub support_index: usize,
    pub query_index: usize,
    pub support_losses: Vec<f64>,
    pub query_losses: Vec<f64>,
}

fn first_argmax(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l > losses[best] {
            best = i;
        }
    }
    best
}

/// Builds one augmented variant of each set per strategy and keeps, independently
/// for the support and the query side, the variant with the highest loss.
/// Ties go to the earliest strategy.
pub fn memlx_select(
    model: &Model,
    support: &Batch,
    query: &Batch,
    strategies: &[AugStrategy],
    cfg: &AugmentConfig,
    support_loss_kind: SetLoss,
    rng: &mut FusionRng,
) -> Result<MemlxSelection> {
    if strategies.is_empty() {
        return Err(FusionError::Contract("memlx needs at least one augmented set".into()));
    }
    let mut sup_variants = Vec::with_capacity(strategies.len());
    let mut qry_variants = Vec::with_capacity(strategies.len());
    for &s in strategies {
        sup_variants.push(s.apply_batch(&support.images, cfg, rng)?);
        qry_variants.push(s.apply_batch(&query.images, cfg, rng)?);
    }
    let support_losses = sup_variants
        .iter()
        .map(|v| set_loss(model, v, &support.labels, support_loss_kind))
        .collect::<Result<Vec<_>>>()?;
    let query_losses = qry_variants
        .iter()
        .map(|v| set_loss(model, v, &query.labels, SetLoss::PerSample))
        .collect::<Result<Vec<_>>>()?;
    let support_index = first_argmax(&support_losses);
    let query_index = first_argmax(&query_losses);
    Ok(MemlxSelection {
        support: sup_variants.swap_remove(support_index),
        query: qry_variants.swap_remove(query_index),
        support_index,
        query_index,
        support_losses,
        query_losses,
    })
}
