use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::rng::{self, streams, FusionRng};
use crate::tensor::{argmax_rows, ParamSet, Tape, Tensor, Var, RELU_GAIN};

/// Feature extraction network layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    /// Valid 2-d convolutions, each followed by a channel bias and relu, then flatten.
    Conv {
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        kernel: usize,
        strides: Vec<usize>,
    },
    /// Flatten, then linear + relu per hidden width. No hidden layers means identity features.
    Mlp { input: usize, hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub backbone: Backbone,
    /// Width of the first attention layer; `None` uses the feature width.
    pub attention_hidden: Option<usize>,
    /// Hidden width of the classifier; 0 makes the classifier a single linear layer.
    pub cln_hidden: usize,
    pub classes: usize,
}

impl Architecture {
    /// Four 3×3 conv layers of 32 filters; strides keep the final map small.
    pub fn conv_default(image_shape: [usize; 3], classes: usize) -> Self {
        let [c, h, w] = image_shape;
        let strides = if h.min(w) >= 28 { vec![2, 1, 2, 1] } else { vec![1, 2, 1, 1] };
        Self {
            backbone: Backbone::Conv { channels: c, height: h, width: w, filters: 32, kernel: 3, strides },
            attention_hidden: None,
            cln_hidden: 128,
            classes,
        }
    }

    /// Two-layer perceptron of width 100 split as one FEN layer and a two-layer classifier.
    pub fn mlp_default(input: usize, classes: usize) -> Self {
        Self {
            backbone: Backbone::Mlp { input, hidden: vec![100] },
            attention_hidden: None,
            cln_hidden: 100,
            classes,
        }
    }

    pub fn feature_dim(&self) -> Result<usize> {
        match &self.backbone {
            Backbone::Conv { height, width, filters, kernel, strides, channels } => {
                if strides.is_empty() || *filters == 0 || *channels == 0 {
                    return Err(FusionError::Dimension("conv backbone needs layers, filters and channels".into()));
                }
                let (mut h, mut w) = (*height, *width);
                for &s in strides {
                    if *kernel > h || *kernel > w || s == 0 {
                        return Err(FusionError::Dimension(format!(
                            "kernel {kernel} stride {s} does not fit a {h}×{w} map"
                        )));
                    }
                    h = (h - kernel) / s + 1;
                    w = (w - kernel) / s + 1;
                }
                Ok(filters * h * w)
            }
            Backbone::Mlp { input, hidden } => Ok(*hidden.last().unwrap_or(input)),
        }
    }

    pub fn input_len(&self) -> usize {
        match &self.backbone {
            Backbone::Conv { channels, height, width, .. } => channels * height * width,
            Backbone::Mlp { input, .. } => *input,
        }
    }
}

/// Which partitions record gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Classifier only.
    Head,
    /// Attention and classifier.
    Psi,
    All,
}

/// Tape handles for the three partitions.
#[derive(Debug, Clone)]
pub struct Bound {
    pub theta: Vec<Var>,
    pub rho: Vec<Var>,
    pub w: Vec<Var>,
}

/// Feature extractor `theta`, attention `rho` and classifier `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub theta: ParamSet,
    pub rho: ParamSet,
    pub w: ParamSet,
}

impl Model {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, streams::MODEL_INIT);
        Self::with_rng(arch, &mut rng)
    }

    pub fn with_rng(arch: Architecture, rng: &mut FusionRng) -> Result<Self> {
        let d = arch.feature_dim()?;
        if arch.classes == 0 {
            return Err(FusionError::Dimension("classifier needs at least one class".into()));
        }
        let mut theta = ParamSet::new();
        match &arch.backbone {
            Backbone::Conv { channels, filters, kernel, strides, .. } => {
                let mut c = *channels;
                for i in 0..strides.len() {
                    theta.push_conv(&format!("conv{i}"), c, *filters, *kernel, RELU_GAIN, rng);
                    c = *filters;
                }
            }
            Backbone::Mlp { input, hidden } => {
                let mut fan_in = *input;
                for (i, &h) in hidden.iter().enumerate() {
                    theta.push_linear(&format!("fen{i}"), fan_in, h, RELU_GAIN, rng);
                    fan_in = h;
                }
            }
        }
        let ah = arch.attention_hidden.unwrap_or(d);
        let mut rho = ParamSet::new();
        rho.push_linear("att1", d, ah, 1.0, rng);
        rho.push_linear("att2", ah, 1, 1.0, rng);
        let mut model = Self { arch, theta, rho, w: ParamSet::new() };
        model.reset_head(rng);
        Ok(model)
    }

    /// Fresh classifier of the current architecture.
    pub fn reset_head(&mut self, rng: &mut FusionRng) {
        let d = self.arch.feature_dim().expect("validated at construction");
        let mut w = ParamSet::new();
        if self.arch.cln_hidden == 0 {
            w.push_linear("cln_out", d, self.arch.classes, 1.0, rng);
        } else {
            w.push_linear("cln_hidden", d, self.arch.cln_hidden, RELU_GAIN, rng);
            w.push_linear("cln_out", self.arch.cln_hidden, self.arch.classes, 1.0, rng);
        }
        self.w = w;
    }

    /// Replaces only the output layer with a fresh one of width `classes`.
    pub fn reset_output_layer(&mut self, classes: usize, rng: &mut FusionRng) {
        self.arch.classes = classes;
        let n = self.w.len();
        let fan_in = self.w.tensors()[n - 2].shape()[0];
        let mut w = ParamSet::new();
        for i in 0..n - 2 {
            w.push(self.w.names()[i].clone(), self.w.tensors()[i].clone());
        }
        w.push_linear("cln_out", fan_in, classes, 1.0, rng);
        self.w = w;
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim().expect("validated at construction")
    }

    pub fn numel(&self) -> usize {
        self.theta.numel() + self.rho.numel() + self.w.numel()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Bound {
        use Trainable::*;
        Bound {
            theta: self.theta.bind(tape, trainable == All),
            rho: self.rho.bind(tape, matches!(trainable, Psi | All)),
            w: self.w.bind(tape, trainable != Nothing),
        }
    }

    /// `N×…` input to `N×d` features.
    pub fn features(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        match &self.arch.backbone {
            Backbone::Conv { strides, .. } => {
                let mut h = x;
                for (i, &s) in strides.iter().enumerate() {
                    h = tape.conv2d(h, b.theta[2 * i], s)?;
                    h = tape.add_channel_bias(h, b.theta[2 * i + 1])?;
                    h = tape.relu(h);
                }
                tape.flatten(h)
            }
            Backbone::Mlp { hidden, .. } => {
                let mut h = tape.flatten(x)?;
                for i in 0..hidden.len() {
                    h = tape.linear(h, b.theta[2 * i], b.theta[2 * i + 1])?;
                    h = tape.relu(h);
                }
                Ok(h)
            }
        }
    }

    /// Attention coefficients `1×n` and the weighted aggregate `1×d` of `n×d` rows.
    pub fn attend(&self, tape: &mut Tape, b: &Bound, r: Var) -> Result<(Var, Var)> {
        let n = tape.shape(r)[0];
        let h = tape.linear(r, b.rho[0], b.rho[1])?;
        let h = tape.tanh(h);
        let scores = tape.linear(h, b.rho[2], b.rho[3])?;
        let scores = tape.reshape(scores, &[1, n])?;
        let a = tape.softmax_rows(scores)?;
        let agg = tape.matmul(a, r)?;
        Ok((a, agg))
    }

    /// Features to logits.
    pub fn classify(&self, tape: &mut Tape, b: &Bound, f: Var) -> Result<Var> {
        if b.w.len() == 2 {
            return tape.linear(f, b.w[0], b.w[1]);
        }
        let h = tape.linear(f, b.w[0], b.w[1])?;
        let h = tape.relu(h);
        tape.linear(h, b.w[2], b.w[3])
    }

    /// All parameters in partition order theta, rho, w.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.theta.iter_mut().chain(self.rho.iter_mut()).chain(self.w.iter_mut())
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, Trainable::Nothing);
        let x = tape.constant(images);
        let f = self.features(&mut tape, &b, x)?;
        let y = self.classify(&mut tape, &b, f)?;
        Ok(tape.tensor(y))
    }

    pub fn logits_from_features(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, Trainable::Nothing);
        let f = tape.constant(features);
        let y = self.classify(&mut tape, &b, f)?;
        Ok(tape.tensor(y))
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(images)?))
    }
}
