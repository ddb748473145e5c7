//! Transfer-learning aggregator: a one-hidden-layer perceptron over encoded
//! answer vectors, trained by full-batch gradient descent on mean binary
//! cross-entropy.
//!
//! Parameters are stored per layer as row-major `out x in` matrices. The flat
//! parameter order used by [`MlpModel::params`] and the gradient is
//! `W1, b1, W2, b2`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;
use crate::pipeline::{AnswerVector, Verdict};

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("training data is degenerate: {0}")]
    DegenerateData(String),
    #[error("loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("feature has length {found}, model expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Yes -> 1, No -> 0, Unparseable -> 0.5.
pub fn encode(av: &AnswerVector) -> Vec<f64> {
    av.verdicts
        .iter()
        .map(|v| match v {
            Verdict::Yes => 1.0,
            Verdict::No => 0.0,
            Verdict::Unparseable => 0.5,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            hidden: 16,
            lr: 0.05,
            epochs: 500,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activations {
    pub hidden: String,
    pub output: String,
}

impl Default for Activations {
    fn default() -> Self {
        Self {
            hidden: "relu".into(),
            output: "logistic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// `[inputs, hidden, 1]`.
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default)]
    pub activation: Activations,
    #[serde(default)]
    pub train_meta: Option<TrainMeta>,
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `logistic(z)` against `y`, computed from the logit.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

impl MlpModel {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            layer_sizes: vec![inputs, hidden, 1],
            weights: vec![vec![0.0; hidden * inputs], vec![0.0; hidden]],
            biases: vec![vec![0.0; hidden], vec![0.0]],
            activation: Activations::default(),
            train_meta: None,
        }
    }

    /// He-uniform hidden weights, Glorot-uniform output weights, small positive hidden bias.
    pub fn init(inputs: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(inputs, hidden);
        let a1 = (6.0 / inputs as f64).sqrt();
        m.weights[0].iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
        m.biases[0].iter_mut().for_each(|b| *b = 0.01);
        let a2 = (6.0 / (hidden as f64 + 1.0)).sqrt();
        m.weights[1].iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        m
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn hidden(&self) -> usize {
        self.layer_sizes[1]
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        let bad = |m: &str| Err(MlpError::InvalidModel(m.to_string()));
        if self.layer_sizes.len() != 3 || self.layer_sizes[2] != 1 || self.layer_sizes[0] == 0 || self.layer_sizes[1] == 0 {
            return bad("layer_sizes must be [inputs > 0, hidden > 0, 1]");
        }
        let (k, h) = (self.inputs(), self.hidden());
        if self.weights.len() != 2 || self.biases.len() != 2 {
            return bad("expected two layers of weights and biases");
        }
        if self.weights[0].len() != h * k || self.weights[1].len() != h {
            return bad("weight shapes disagree with layer_sizes");
        }
        if self.biases[0].len() != h || self.biases[1].len() != 1 {
            return bad("bias shapes disagree with layer_sizes");
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.activation != Activations::default() {
            return bad("only relu hidden / logistic output activations are supported");
        }
        Ok(())
    }

    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        let k = self.inputs();
        self.weights[0]
            .chunks_exact(k)
            .zip(&self.biases[0])
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }

    fn logit_from_pre(&self, pre: &[f64]) -> f64 {
        pre.iter().zip(&self.weights[1]).map(|(z, w)| z.max(0.0) * w).sum::<f64>() + self.biases[1][0]
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.logit_from_pre(&self.hidden_pre(x))
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        logistic(self.logit(x))
    }

    /// Flat parameters: W1, b1, W2, b2.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.weights[0]);
        p.extend_from_slice(&self.biases[0]);
        p.extend_from_slice(&self.weights[1]);
        p.extend_from_slice(&self.biases[1]);
        p
    }

    pub fn num_params(&self) -> usize {
        let (k, h) = (self.inputs(), self.hidden());
        h * k + h + h + 1
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params(), "parameter vector length");
        let (k, h) = (self.inputs(), self.hidden());
        let (w1, rest) = p.split_at(h * k);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        self.weights[0].copy_from_slice(w1);
        self.biases[0].copy_from_slice(b1);
        self.weights[1].copy_from_slice(w2);
        self.biases[1].copy_from_slice(b2);
    }

    /// Mean binary cross-entropy over the batch.
    pub fn loss(&self, batch: &Batch) -> f64 {
        let n = batch.len() as f64;
        batch
            .iter()
            .map(|(x, y)| bce_from_logit(self.logit(x), *y))
            .sum::<f64>()
            / n
    }

    /// Gradient of [`Self::loss`] in flat parameter order.
    pub fn gradient(&self, batch: &Batch) -> Vec<f64> {
        let (k, h) = (self.inputs(), self.hidden());
        let n = batch.len() as f64;
        let mut gw1 = vec![0.0; h * k];
        let mut gb1 = vec![0.0; h];
        let mut gw2 = vec![0.0; h];
        let mut gb2 = 0.0;
        for (x, y) in batch {
            let pre = self.hidden_pre(x);
            let delta_out = (logistic(self.logit_from_pre(&pre)) - y) / n;
            gb2 += delta_out;
            for j in 0..h {
                let act = pre[j].max(0.0);
                gw2[j] += delta_out * act;
                if pre[j] > 0.0 {
                    let delta_hidden = delta_out * self.weights[1][j];
                    gb1[j] += delta_hidden;
                    for (g, xi) in gw1[j * k..(j + 1) * k].iter_mut().zip(x.iter()) {
                        *g += delta_hidden * xi;
                    }
                }
            }
        }
        let mut g = gw1;
        g.extend(gb1);
        g.extend(gw2);
        g.push(gb2);
        g
    }

    pub fn save(&self, path: &Path) -> Result<(), MlpError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MlpError> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

/// (features, target in {0, 1}) pairs.
pub type Batch = Vec<(Vec<f64>, f64)>;

pub fn make_batch(features: &[Vec<f64>], labels: &[u8]) -> Batch {
    features.iter().cloned().zip(labels.iter().map(|&l| l as f64)).collect()
}

fn check_training_data(features: &[Vec<f64>], labels: &[u8]) -> Result<usize, MlpError> {
    if features.len() != labels.len() {
        return Err(MlpError::DegenerateData(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.len() < 2 {
        return Err(MlpError::DegenerateData("need at least two examples".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(MlpError::DegenerateData("labels must be 0 or 1".into()));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(MlpError::DegenerateData("only one class present".into()));
    }
    let k = features[0].len();
    if k == 0 || features.iter().any(|f| f.len() != k) {
        return Err(MlpError::DegenerateData("feature rows must share a non-zero length".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MlpError::DegenerateData("non-finite feature value".into()));
    }
    Ok(k)
}

/// Train and also return the loss before every update plus the final loss
/// (`epochs + 1` values).
pub fn train_with_history(features: &[Vec<f64>], labels: &[u8], hp: &Hyper) -> Result<(MlpModel, Vec<f64>), MlpError> {
    let k = check_training_data(features, labels)?;
    if hp.hidden == 0 || !(hp.lr > 0.0 && hp.lr.is_finite()) {
        return Err(MlpError::DegenerateData("hidden must be > 0 and lr a positive finite number".into()));
    }
    let batch = make_batch(features, labels);
    let mut model = MlpModel::init(k, hp.hidden, hp.seed);
    let mut params = model.params();
    let mut history = Vec::with_capacity(hp.epochs + 1);
    for epoch in 0..=hp.epochs {
        let loss = model.loss(&batch);
        if !loss.is_finite() {
            return Err(MlpError::NonFiniteLoss(epoch));
        }
        history.push(loss);
        if epoch == hp.epochs {
            break;
        }
        for (p, g) in params.iter_mut().zip(model.gradient(&batch)) {
            *p -= hp.lr * g;
        }
        model.set_params(&params);
    }
    model.train_meta = Some(TrainMeta {
        seed: hp.seed,
        epochs: hp.epochs,
        learning_rate: hp.lr,
        final_loss: *history.last().expect("at least one loss"),
    });
    Ok((model, history))
}

pub fn train(features: &[Vec<f64>], labels: &[u8], hp: &Hyper) -> Result<MlpModel, MlpError> {
    train_with_history(features, labels, hp).map(|(m, _)| m)
}

/// Score and thresholded label for one feature vector.
pub fn predict(model: &MlpModel, feature: &[f64], threshold: f64) -> Result<(Label, f64), MlpError> {
    if feature.len() != model.inputs() {
        return Err(MlpError::ShapeMismatch {
            expected: model.inputs(),
            found: feature.len(),
        });
    }
    let score = model.score(feature);
    Ok((Label::from_bool(score >= threshold), score))
}

pub fn accuracy(model: &MlpModel, features: &[Vec<f64>], labels: &[u8]) -> f64 {
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(x, &y)| (model.score(x) >= 0.5) == (y == 1))
        .count();
    correct as f64 / features.len().max(1) as f64
}

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a| + |n|, 1e-8)`: relative for ordinary gradients,
/// absolute-scaled for ones that are essentially zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central differences of `loss` at `params` with step `h`.
pub fn numeric_gradient(params: &[f64], mut loss: impl FnMut(&[f64]) -> f64, h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss(&p);
            p[i] = orig - h;
            let down = loss(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest [`relative_error`] between `analytic` and central differences of `loss`.
pub fn max_relative_error(params: &[f64], loss: impl FnMut(&[f64]) -> f64, analytic: &[f64]) -> f64 {
    numeric_gradient(params, loss, FD_STEP)
        .iter()
        .zip(analytic)
        .map(|(n, a)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Compare backprop against central finite differences over every parameter.
pub fn gradient_check(model: &MlpModel, batch: &Batch) -> f64 {
    let analytic = model.gradient(batch);
    let mut probe = model.clone();
    max_relative_error(
        &model.params(),
        |p| {
            probe.set_params(p);
            probe.loss(batch)
        },
        &analytic,
    )
}
