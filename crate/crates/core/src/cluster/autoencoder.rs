use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FusionError, Result};
use crate::rng::{self, streams, FusionRng};
use crate::tensor::{Optimizer, ParamSet, Tape, Tensor, Var, RELU_GAIN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: 128,
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// MLP encoder `pixels → hidden (relu) → latent`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    image_shape: [usize; 3],
    params: ParamSet,
}

impl Encoder {
    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn latent_dim(&self) -> usize {
        self.params.tensors()[2].shape()[1]
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn forward(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let x = tape.flatten(x)?;
        let h = tape.linear(x, vars[0], vars[1])?;
        let h = tape.relu(h);
        tape.linear(h, vars[2], vars[3])
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAutoencoder {
    pub encoder: Encoder,
    /// Full-dataset reconstruction MSE before the first update.
    pub initial_loss: f64,
    /// Full-dataset reconstruction MSE after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainedAutoencoder {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

fn decode(tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
    let h = tape.linear(z, vars[0], vars[1])?;
    let h = tape.relu(h);
    let out = tape.linear(h, vars[2], vars[3])?;
    Ok(tape.sigmoid(out))
}

fn reconstruction_loss(enc: &ParamSet, dec: &ParamSet, images: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let ev = enc.bind(&mut tape, false);
    let dv = dec.bind(&mut tape, false);
    let x = tape.constant(images);
    let z = Encoder::forward(&mut tape, &ev, x)?;
    let y = decode(&mut tape, &dv, z)?;
    let target = tape.flatten(x)?;
    let loss = tape.mse(y, target)?;
    Ok(tape.value(loss)[0])
}

/// Trains encoder and decoder on mean-squared reconstruction with Adam and returns the encoder.
pub fn train_autoencoder(dataset: &Dataset, cfg: &AutoencoderConfig) -> Result<TrainedAutoencoder> {
    if cfg.latent_dim < 2 {
        return Err(FusionError::Domain(format!("latent_dim {} < 2", cfg.latent_dim)));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(FusionError::Domain("batch_size and hidden must be positive".into()));
    }
    let image_shape = dataset.image_shape();
    let pixels: usize = image_shape.iter().product();
    let mut init = rng::stream(cfg.seed, streams::AUTOENCODER);
    let mut enc = ParamSet::new();
    enc.push_linear("enc1", pixels, cfg.hidden, RELU_GAIN, &mut init);
    enc.push_linear("enc2", cfg.hidden, cfg.latent_dim, 1.0, &mut init);
    let mut dec = ParamSet::new();
    dec.push_linear("dec1", cfg.latent_dim, cfg.hidden, RELU_GAIN, &mut init);
    dec.push_linear("dec2", cfg.hidden, pixels, 1.0, &mut init);

    let initial_loss = reconstruction_loss(&enc, &dec, dataset.images())?;
    let mut opt = Optimizer::adam(cfg.lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle: FusionRng = rng::split(&mut init);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.images().select(chunk)?;
            let mut tape = Tape::new();
            let ev = enc.bind(&mut tape, true);
            let dv = dec.bind(&mut tape, true);
            let x = tape.constant(&batch);
            let z = Encoder::forward(&mut tape, &ev, x)?;
            let y = decode(&mut tape, &dv, z)?;
            let target = tape.flatten(x)?;
            let loss = tape.mse(y, target)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(FusionError::Divergence {
                    context: format!("autoencoder epoch {epoch}"),
                    loss: value,
                });
            }
            tape.backward(loss)?;
            let mut grads = enc.collect_grads(&tape, &ev);
            grads.extend(dec.collect_grads(&tape, &dv));
            opt.step(enc.iter_mut().chain(dec.iter_mut()), &grads)?;
        }
        let epoch_loss = reconstruction_loss(&enc, &dec, dataset.images())?;
        if !epoch_loss.is_finite() {
            return Err(FusionError::Divergence {
                context: format!("autoencoder epoch {epoch}"),
                loss: epoch_loss,
            });
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainedAutoencoder {
        encoder: Encoder { image_shape, params: enc },
        initial_loss,
        epoch_losses,
    })
}

/// Embedding matrix with the dataset index of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: Tensor,
    indices: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor, indices: Vec<usize>) -> Result<Self> {
        if vectors.ndim() != 2 || vectors.shape()[1] < 2 {
            return Err(FusionError::Dimension(format!(
                "embeddings must be N×d with d ≥ 2, got {:?}",
                vectors.shape()
            )));
        }
        if indices.len() != vectors.shape()[0] {
            return Err(FusionError::Dimension(format!(
                "{} indices for {} rows",
                indices.len(),
                vectors.shape()[0]
            )));
        }
        if !vectors.is_finite() {
            return Err(FusionError::Domain("non-finite embedding".into()));
        }
        Ok(Self { vectors, indices })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, (0..rows.len()).collect())
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.item(i)
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Deterministic encoder pass over every sample.
pub fn embed(encoder: &Encoder, dataset: &Dataset) -> Result<EmbeddingSet> {
    if dataset.image_shape() != encoder.image_shape {
        return Err(FusionError::Dimension(format!(
            "encoder expects {:?}, dataset has {:?}",
            encoder.image_shape,
            dataset.image_shape()
        )));
    }
    let mut tape = Tape::new();
    let vars = encoder.params.bind(&mut tape, false);
    let x = tape.constant(dataset.images());
    let z = Encoder::forward(&mut tape, &vars, x)?;
    EmbeddingSet::new(tape.tensor(z), (0..dataset.len()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_dataset(value: f64) -> Dataset {
        let n = 12;
        let images = Tensor::full(&[n, 1, 4, 4], value);
        Dataset::new(images, vec![0; n], 1, "const").unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_encoder() {
        let ds = constant_dataset(0.5);
        let cfg = AutoencoderConfig { epochs: 0, hidden: 8, latent_dim: 2, ..Default::default() };
        let a = train_autoencoder(&ds, &cfg).unwrap();
        let b = train_autoencoder(&ds, &cfg).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert!(a.epoch_losses.is_empty());
        assert_eq!(a.final_loss(), a.initial_loss);
    }

    #[test]
    fn constant_images_are_reproduced() {
        let ds = constant_dataset(0.8);
        let cfg = AutoencoderConfig { epochs: 150, hidden: 8, latent_dim: 2, lr: 1e-2, ..Default::default() };
        let trained = train_autoencoder(&ds, &cfg).unwrap();
        assert!(trained.final_loss() < 1e-4, "mse {}", trained.final_loss());
    }

    #[test]
    fn latent_dim_below_two_is_rejected() {
        let cfg = AutoencoderConfig { latent_dim: 1, ..Default::default() };
        assert!(matches!(train_autoencoder(&constant_dataset(0.1), &cfg), Err(FusionError::Domain(_))));
    }

    #[test]
    fn embed_rows_follow_samples() {
        let ds = constant_dataset(0.3);
        let cfg = AutoencoderConfig { epochs: 0, hidden: 8, latent_dim: 3, ..Default::default() };
        let enc = train_autoencoder(&ds, &cfg).unwrap().encoder;
        let z = embed(&enc, &ds).unwrap();
        assert_eq!(z.len(), 12);
        assert_eq!(z.dim(), 3);
        assert_eq!(z.row(0), z.row(11));
        assert_eq!(z.indices()[5], 5);
    }
}
