//! Tiny trainable velocity network with hand-written backprop.
//!
//! Architecture: `[x, t, sin 2πt, cos 2πt] → tanh → tanh → d`, with a learned
//! class embedding added to the first pre-activation. The embedding table has
//! one row per class plus a final "unconditional" row, so a single network
//! serves both conditional and unconditional queries.
//!
//! Training regresses `x1 - x0` at `x_t = t x1 + (1 - t) x0` with plain SGD,
//! while a decay-weighted parameter average is kept alongside. That average is
//! the smoothing that makes a trained field an imperfect, oversmoothed
//! approximation of the target.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Condition, VelocityField};
use crate::gmm::GaussianMixture;
use crate::rng::{self, Domain};

const TIME_FEATURES: usize = 3;
const CHECKPOINT_FORMAT: &str = "mgflow-mlp-v1";

/// Network weights. All tensors are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dim: usize,
    hidden: usize,
    n_classes: usize,
    /// `hidden × (dim + 3)`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `(n_classes + 1) × hidden`; the last row is unconditional.
    pub embed: Vec<f64>,
    /// `hidden × hidden`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// `dim × hidden`
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl MlpParams {
    /// All-zero parameters; the network then outputs zero everywhere.
    pub fn zeros(dim: usize, hidden: usize, n_classes: usize) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("network dim and hidden width must be positive"));
        }
        let input = dim + TIME_FEATURES;
        Ok(Self {
            dim,
            hidden,
            n_classes,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            embed: vec![0.0; (n_classes + 1) * hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w3: vec![0.0; dim * hidden],
            b3: vec![0.0; dim],
        })
    }

    /// Uniform in `±1/√fan_in` per layer, drawn from the `Init` stream of `seed`.
    pub fn init(dim: usize, hidden: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dim, hidden, n_classes)?;
        let mut rng = rng::substream(seed, Domain::Init, 0, 0);
        let mut fill = |v: &mut [f64], fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for x in v {
                *x = rng.random_range(-a..a);
            }
        };
        let input = dim + TIME_FEATURES;
        fill(&mut p.w1, input);
        fill(&mut p.b1, input);
        fill(&mut p.embed, input);
        fill(&mut p.w2, hidden);
        fill(&mut p.b2, hidden);
        fill(&mut p.w3, hidden);
        fill(&mut p.b3, hidden);
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn tensors(&self) -> [&Vec<f64>; 7] {
        [&self.w1, &self.b1, &self.embed, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [&mut self.w1, &mut self.b1, &mut self.embed, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }

    fn shapes(&self) -> [(&'static str, [usize; 2]); 7] {
        let (d, h) = (self.dim, self.hidden);
        [
            ("w1", [h, d + TIME_FEATURES]),
            ("b1", [h, 1]),
            ("embed", [self.n_classes + 1, h]),
            ("w2", [h, h]),
            ("b2", [h, 1]),
            ("w3", [d, h]),
            ("b3", [d, 1]),
        ]
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter `i` in the flat order `w1, b1, embed, w2, b2, w3, b3`.
    pub fn get(&self, mut i: usize) -> f64 {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, value: f64) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.dim == other.dim && self.hidden == other.hidden && self.n_classes == other.n_classes
    }

    /// `self -= lr * grad`
    fn sgd(&mut self, grad: &Self, lr: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(grad.tensors()) {
            for (p, g) in p.iter_mut().zip(g) {
                *p -= lr * g;
            }
        }
    }

    /// Moves `self` toward `params` by `1 - decay`. Exact copy at `decay = 0`
    /// and a fixed point when `self == params`.
    fn ema_toward(&mut self, params: &Self, decay: f64) {
        if decay == 0.0 {
            self.clone_from(params);
            return;
        }
        for (e, p) in self.tensors_mut().into_iter().zip(params.tensors()) {
            for (e, p) in e.iter_mut().zip(p) {
                *e += (1.0 - decay) * (p - *e);
            }
        }
    }

    fn embed_row(&self, c: Condition) -> Result<usize> {
        match c {
            None => Ok(self.n_classes),
            Some(k) if k < self.n_classes => Ok(k),
            Some(k) => {
                Err(Error::invalid(format!("class {k} out of range for a network with {} classes", self.n_classes)))
            }
        }
    }

    /// Velocity prediction at `(x, t, c)`.
    pub fn forward(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.forward_into(x, t, c, &mut out)?;
        Ok(out)
    }

    fn forward_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()> {
        if x.len() != self.dim || out.len() != self.dim {
            return Err(Error::UnsupportedDimension { got: x.len(), expected: self.dim });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        let row = self.embed_row(c)?;
        let acts = self.activations(x, t, row);
        out.copy_from_slice(&acts.out);
        Ok(())
    }

    fn activations(&self, x: &[f64], t: f64, row: usize) -> Activations {
        let (d, h) = (self.dim, self.hidden);
        let input_len = d + TIME_FEATURES;
        let mut input = Vec::with_capacity(input_len);
        input.extend_from_slice(x);
        input.extend_from_slice(&[t, (TAU * t).sin(), (TAU * t).cos()]);

        let emb = &self.embed[row * h..(row + 1) * h];
        let h1: Vec<f64> = (0..h)
            .map(|i| (dot(&self.w1[i * input_len..(i + 1) * input_len], &input) + self.b1[i] + emb[i]).tanh())
            .collect();
        let h2: Vec<f64> = (0..h).map(|i| (dot(&self.w2[i * h..(i + 1) * h], &h1) + self.b2[i]).tanh()).collect();
        let out = (0..d).map(|i| dot(&self.w3[i * h..(i + 1) * h], &h2) + self.b3[i]).collect();
        Activations { input, h1, h2, out, row }
    }

    /// Mean squared flow-matching error over `batch` and its gradient.
    pub fn loss_and_grad(&self, batch: &[FlowSample]) -> Result<(f64, MlpParams)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let (d, h) = (self.dim, self.hidden);
        let input_len = d + TIME_FEATURES;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = Self::zeros(d, h, self.n_classes)?;
        let mut loss = 0.0;
        let mut xt = vec![0.0; d];
        let mut d_out = vec![0.0; d];
        let mut d_a2 = vec![0.0; h];
        let mut d_a1 = vec![0.0; h];

        for s in batch {
            if s.x0.len() != d || s.x1.len() != d {
                return Err(Error::UnsupportedDimension { got: s.x0.len().max(s.x1.len()), expected: d });
            }
            for j in 0..d {
                xt[j] = s.t * s.x1[j] + (1.0 - s.t) * s.x0[j];
            }
            let a = self.activations(&xt, s.t, self.embed_row(s.c)?);

            for j in 0..d {
                let r = a.out[j] - (s.x1[j] - s.x0[j]);
                loss += r * r * scale;
                d_out[j] = 2.0 * r * scale;
            }
            for j in 0..d {
                grad.b3[j] += d_out[j];
                axpy(&mut grad.w3[j * h..(j + 1) * h], d_out[j], &a.h2);
            }
            d_a2.fill(0.0);
            for j in 0..d {
                axpy(&mut d_a2, d_out[j], &self.w3[j * h..(j + 1) * h]);
            }
            for i in 0..h {
                d_a2[i] *= 1.0 - a.h2[i] * a.h2[i];
            }
            d_a1.fill(0.0);
            for i in 0..h {
                grad.b2[i] += d_a2[i];
                axpy(&mut grad.w2[i * h..(i + 1) * h], d_a2[i], &a.h1);
                axpy(&mut d_a1, d_a2[i], &self.w2[i * h..(i + 1) * h]);
            }
            for i in 0..h {
                d_a1[i] *= 1.0 - a.h1[i] * a.h1[i];
            }
            let emb = &mut grad.embed[a.row * h..(a.row + 1) * h];
            for i in 0..h {
                grad.b1[i] += d_a1[i];
                emb[i] += d_a1[i];
                axpy(&mut grad.w1[i * input_len..(i + 1) * input_len], d_a1[i], &a.input);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite training loss".into()));
        }
        Ok((loss, grad))
    }
}

struct Activations {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
    row: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

impl VelocityField for MlpParams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()> {
        self.forward_into(x, t, c, out)
    }
}

/// One regression pair: noise `x0`, data `x1`, time and condition.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub c: Condition,
}

/// Training hyperparameters. Time is sampled uniformly on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Probability of replacing the label by the unconditional row.
    pub p_drop: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 256, steps: 20_000, p_drop: 0.1, ema_decay: 0.999, seed: 7, hidden: 64 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::invalid(format!("p_drop {} outside [0, 1]", self.p_drop)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: MlpParams,
    pub ema_params: MlpParams,
    /// Batch loss before each update.
    pub loss_curve: Vec<f64>,
}

/// Training batch for `step`, drawn from its own address so batches do not
/// depend on how many draws earlier steps consumed.
pub fn draw_batch(gmm: &GaussianMixture, cfg: &TrainConfig, step: usize) -> Vec<FlowSample> {
    let mut rng = rng::substream(cfg.seed, Domain::Train, 0, step as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let (x1, class) = gmm.sample(&mut rng, None);
            let x0 = rng::standard_normal(&mut rng, gmm.dim());
            let t = rng.random::<f64>();
            let c = if rng.random::<f64>() < cfg.p_drop { None } else { Some(class) };
            FlowSample { x0, x1, t, c }
        })
        .collect()
}

/// Flow-matching SGD from seeded initial weights.
pub fn train(gmm: &GaussianMixture, cfg: &TrainConfig) -> Result<Trained> {
    let init = MlpParams::init(gmm.dim(), cfg.hidden, gmm.n_classes(), cfg.seed)?;
    train_from(gmm, cfg, init)
}

/// Flow-matching SGD starting from `params`.
pub fn train_from(gmm: &GaussianMixture, cfg: &TrainConfig, mut params: MlpParams) -> Result<Trained> {
    cfg.validate()?;
    if params.dim() != gmm.dim() || params.n_classes() != gmm.n_classes() {
        return Err(Error::invalid("network shape does not match the mixture"));
    }
    let mut ema_params = params.clone();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(gmm, cfg, step);
        let (loss, grad) =
            params
                .loss_and_grad(&batch)
                .map_err(|e| if e.is_numeric() { Error::TrainingDiverged { step } } else { e })?;
        params.sgd(&grad, cfg.lr);
        if !params.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        ema_params.ema_toward(&params, cfg.ema_decay);
        loss_curve.push(loss);
    }
    Ok(Trained { params, ema_params, loss_curve })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorFile {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    dim: usize,
    hidden: usize,
    n_classes: usize,
    tensors: Vec<TensorFile>,
}

impl ParamsFile {
    fn from_params(p: &MlpParams) -> Self {
        let tensors = p
            .shapes()
            .iter()
            .zip(p.tensors())
            .map(|((name, shape), data)| TensorFile { name: name.to_string(), shape: *shape, data: data.clone() })
            .collect();
        Self { dim: p.dim, hidden: p.hidden, n_classes: p.n_classes, tensors }
    }

    fn into_params(self) -> Result<MlpParams> {
        let mut p =
            MlpParams::zeros(self.dim, self.hidden, self.n_classes).map_err(|e| Error::Config(e.to_string()))?;
        let expected = p.shapes();
        if self.tensors.len() != expected.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, expected {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((tensor, (name, shape)), slot) in self.tensors.into_iter().zip(expected).zip(p.tensors_mut()) {
            if tensor.name != name || tensor.shape != shape || tensor.data.len() != shape[0] * shape[1] {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} with {} values does not match expected {name} {shape:?}",
                    tensor.name,
                    tensor.shape,
                    tensor.data.len()
                )));
            }
            *slot = tensor.data;
        }
        if !p.is_finite() {
            return Err(Error::Config("checkpoint contains non-finite weights".into()));
        }
        Ok(p)
    }
}

/// Trained weights plus the configuration that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: MlpParams,
    pub ema_params: MlpParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    config: TrainConfig,
    params: ParamsFile,
    ema_params: ParamsFile,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            params: ParamsFile::from_params(&self.params),
            ema_params: ParamsFile::from_params(&self.ema_params),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unknown checkpoint format {:?}", file.format)));
        }
        let params = file.params.into_params()?;
        let ema_params = file.ema_params.into_params()?;
        if !params.same_shape(&ema_params) {
            return Err(Error::Config("checkpoint params and ema_params differ in shape".into()));
        }
        Ok(Self { config: file.config, params, ema_params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
