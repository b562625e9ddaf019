//! Differentiable softmax classifiers with analytic gradients.
//!
//! Two architectures are supported: a linear map and a one-hidden-layer
//! tanh MLP. Both expose logits, probabilities, cross-entropy loss, and
//! exact input/parameter gradients, which is everything gradient-based
//! attacks and SGD training need. Aggregate classifiers combine members by
//! taking the element-wise maximum or minimum of their logits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{apply_attack, AttackError, AttackKind, AttackSpec};
use crate::dataio::Dataset;
use crate::rng::{rng_from, substream};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("invalid model: {0}")]
    Invalid(String),

    #[error("model file {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Errors from the training loop, which layers model math and attack
/// generation.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Attack(#[from] AttackError),

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("training index set is empty")]
    EmptyIndexSet,
}

/// Anything that maps a feature vector to class logits and can pull a
/// gradient with respect to the logits back to the input.
///
/// `backprop_input` is the primitive every gradient consumer builds on:
/// the cross-entropy input gradient is the pullback of `p - onehot(y)`,
/// and logit-difference gradients (used by margin objectives) are the
/// pullback of a signed indicator vector.
pub trait Model {
    fn num_classes(&self) -> usize;
    fn dim(&self) -> usize;
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError>;
    fn backprop_input(&self, x: &[f64], dlogits: &[f64]) -> Result<Vec<f64>, ModelError>;

    /// Softmax of the logits; sums to one within 1e-9.
    fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Cross-entropy `-ln p_y(x)`, computed stably via log-sum-exp.
    fn loss(&self, x: &[f64], y: usize) -> Result<f64, ModelError> {
        let logits = self.logits(x)?;
        if y >= logits.len() {
            return Err(ModelError::InvalidLabel {
                label: y,
                num_classes: logits.len(),
            });
        }
        Ok(log_sum_exp(&logits) - logits[y])
    }

    /// Gradient of the loss with respect to the input.
    fn input_gradient(&self, x: &[f64], y: usize) -> Result<Vec<f64>, ModelError> {
        let mut d = self.probabilities(x)?;
        if y >= d.len() {
            return Err(ModelError::InvalidLabel {
                label: y,
                num_classes: d.len(),
            });
        }
        d[y] -= 1.0;
        self.backprop_input(x, &d)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Network shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Linear,
    Mlp1,
}

/// A linear or one-hidden-layer tanh classifier.
///
/// Parameters are stored row-major: for `Linear`, `w1` is `C x d`; for
/// `Mlp1`, `w1` is `hidden x d` and `w2` is `C x hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    kind: Arch,
    num_classes: usize,
    dim: usize,
    #[serde(default)]
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    w2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    b2: Vec<f64>,
}

impl Classifier {
    /// All-zero linear model: logits are identically zero.
    pub fn zeroed_linear(num_classes: usize, dim: usize) -> Self {
        Self {
            kind: Arch::Linear,
            num_classes,
            dim,
            hidden: 0,
            w1: vec![0.0; num_classes * dim],
            b1: vec![0.0; num_classes],
            w2: Vec::new(),
            b2: Vec::new(),
        }
    }

    /// All-zero one-hidden-layer model.
    pub fn zeroed_mlp1(num_classes: usize, dim: usize, hidden: usize) -> Self {
        Self {
            kind: Arch::Mlp1,
            num_classes,
            dim,
            hidden,
            w1: vec![0.0; hidden * dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; num_classes * hidden],
            b2: vec![0.0; num_classes],
        }
    }

    /// Linear model with explicit row-major weights and biases.
    pub fn linear(num_classes: usize, dim: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self, ModelError> {
        let m = Self {
            kind: Arch::Linear,
            num_classes,
            dim,
            hidden: 0,
            w1: w,
            b1: b,
            w2: Vec::new(),
            b2: Vec::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn kind(&self) -> Arch {
        self.kind
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Flattened parameter vector (w1, b1, w2, b2 in that order).
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.w1.clone();
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.extend_from_slice(&self.b2);
        p
    }

    /// Replace all parameters from a flattened vector.
    pub fn set_params(&mut self, params: &[f64]) -> Result<(), ModelError> {
        let want = self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len();
        if params.len() != want {
            return Err(ModelError::Invalid(format!(
                "expected {want} parameters, got {}",
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for slot in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *slot = it.next().unwrap();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (w1_len, b1_len, w2_len, b2_len) = match self.kind {
            Arch::Linear => (self.num_classes * self.dim, self.num_classes, 0, 0),
            Arch::Mlp1 => (
                self.hidden * self.dim,
                self.hidden,
                self.num_classes * self.hidden,
                self.num_classes,
            ),
        };
        if self.num_classes < 2 || self.dim < 1 {
            return Err(ModelError::Invalid(format!(
                "bad shape: {} classes, dim {}",
                self.num_classes, self.dim
            )));
        }
        if self.kind == Arch::Mlp1 && self.hidden < 1 {
            return Err(ModelError::Invalid("mlp1 needs hidden >= 1".into()));
        }
        if self.w1.len() != w1_len
            || self.b1.len() != b1_len
            || self.w2.len() != w2_len
            || self.b2.len() != b2_len
        {
            return Err(ModelError::Invalid("parameter array sizes do not match shape".into()));
        }
        if self.params().iter().any(|p| !p.is_finite()) {
            return Err(ModelError::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Pre-activation of the hidden layer (mlp1 only): `w1 x + b1`.
    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        matvec(&self.w1, self.hidden, self.dim, x, &self.b1)
    }

    /// Per-example parameter gradients of the cross-entropy loss, flattened
    /// in the same order as [`Classifier::params`].
    pub fn param_gradients(&self, x: &[f64], y: usize) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        if y >= self.num_classes {
            return Err(ModelError::InvalidLabel {
                label: y,
                num_classes: self.num_classes,
            });
        }
        let mut dlogits = self.probabilities(x)?;
        dlogits[y] -= 1.0;
        match self.kind {
            Arch::Linear => {
                let mut g = Vec::with_capacity(self.w1.len() + self.b1.len());
                for c in 0..self.num_classes {
                    for j in 0..self.dim {
                        g.push(dlogits[c] * x[j]);
                    }
                }
                g.extend_from_slice(&dlogits);
                Ok(g)
            }
            Arch::Mlp1 => {
                let a = self.hidden_pre(x);
                let h: Vec<f64> = a.iter().map(|&v| v.tanh()).collect();
                // da = (w2^T dlogits) .* (1 - h^2)
                let mut da = vec![0.0; self.hidden];
                for c in 0..self.num_classes {
                    for k in 0..self.hidden {
                        da[k] += self.w2[c * self.hidden + k] * dlogits[c];
                    }
                }
                for k in 0..self.hidden {
                    da[k] *= 1.0 - h[k] * h[k];
                }
                let mut g = Vec::with_capacity(self.params().len());
                for k in 0..self.hidden {
                    for j in 0..self.dim {
                        g.push(da[k] * x[j]);
                    }
                }
                g.extend_from_slice(&da);
                for c in 0..self.num_classes {
                    for k in 0..self.hidden {
                        g.push(dlogits[c] * h[k]);
                    }
                }
                g.extend_from_slice(&dlogits);
                Ok(g)
            }
        }
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut acc = b[r];
        let row = &w[r * cols..(r + 1) * cols];
        for (wj, xj) in row.iter().zip(x.iter()) {
            acc += wj * xj;
        }
        out.push(acc);
    }
    out
}

/// `w^T v` for a row-major `rows x cols` matrix.
fn matvec_t(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for (j, wj) in row.iter().enumerate() {
            out[j] += wj * v[r];
        }
    }
    out
}

impl Model for Classifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        Ok(match self.kind {
            Arch::Linear => matvec(&self.w1, self.num_classes, self.dim, x, &self.b1),
            Arch::Mlp1 => {
                let h: Vec<f64> = self.hidden_pre(x).iter().map(|&v| v.tanh()).collect();
                matvec(&self.w2, self.num_classes, self.hidden, &h, &self.b2)
            }
        })
    }

    fn backprop_input(&self, x: &[f64], dlogits: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        if dlogits.len() != self.num_classes {
            return Err(ModelError::DimensionMismatch {
                expected: self.num_classes,
                got: dlogits.len(),
            });
        }
        Ok(match self.kind {
            Arch::Linear => matvec_t(&self.w1, self.num_classes, self.dim, dlogits),
            Arch::Mlp1 => {
                let a = self.hidden_pre(x);
                let mut da = matvec_t(&self.w2, self.num_classes, self.hidden, dlogits);
                for (dk, ak) in da.iter_mut().zip(a.iter()) {
                    let t = ak.tanh();
                    *dk *= 1.0 - t * t;
                }
                matvec_t(&self.w1, self.hidden, self.dim, &da)
            }
        })
    }
}

/// Element-wise combination rule for [`AggregateClassifier`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    Max,
    Min,
}

/// Combines member classifiers by taking the element-wise maximum or
/// minimum of their logits; softmax is applied after aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateClassifier {
    members: Vec<Classifier>,
    mode: AggregateMode,
}

impl AggregateClassifier {
    pub fn new(members: Vec<Classifier>, mode: AggregateMode) -> Result<Self, ModelError> {
        let first = members
            .first()
            .ok_or_else(|| ModelError::Invalid("aggregate needs at least one member".into()))?;
        let (c, d) = (first.num_classes(), first.dim());
        for m in &members {
            if m.num_classes() != c || m.dim() != d {
                return Err(ModelError::Invalid(
                    "aggregate members must share num_classes and dim".into(),
                ));
            }
        }
        Ok(Self { members, mode })
    }

    pub fn mode(&self) -> AggregateMode {
        self.mode
    }

    pub fn members(&self) -> &[Classifier] {
        &self.members
    }

    /// Per-class winning member under the aggregation rule. Ties go to the
    /// earliest member, which keeps gradients deterministic.
    fn winners(&self, member_logits: &[Vec<f64>]) -> Vec<usize> {
        let c = self.members[0].num_classes();
        (0..c)
            .map(|class| {
                let mut best = 0usize;
                for (m, logits) in member_logits.iter().enumerate().skip(1) {
                    let better = match self.mode {
                        AggregateMode::Max => logits[class] > member_logits[best][class],
                        AggregateMode::Min => logits[class] < member_logits[best][class],
                    };
                    if better {
                        best = m;
                    }
                }
                best
            })
            .collect()
    }
}

impl Model for AggregateClassifier {
    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn dim(&self) -> usize {
        self.members[0].dim()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = self.members[0].logits(x)?;
        for m in &self.members[1..] {
            for (o, z) in out.iter_mut().zip(m.logits(x)?) {
                *o = match self.mode {
                    AggregateMode::Max => o.max(z),
                    AggregateMode::Min => o.min(z),
                };
            }
        }
        Ok(out)
    }

    fn backprop_input(&self, x: &[f64], dlogits: &[f64]) -> Result<Vec<f64>, ModelError> {
        if dlogits.len() != self.num_classes() {
            return Err(ModelError::DimensionMismatch {
                expected: self.num_classes(),
                got: dlogits.len(),
            });
        }
        let member_logits: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| m.logits(x))
            .collect::<Result<_, _>>()?;
        let winners = self.winners(&member_logits);
        // Route each class's upstream gradient to the member that produced
        // the aggregate logit for that class (subgradient of max/min).
        let mut dx = vec![0.0; self.dim()];
        for (m, member) in self.members.iter().enumerate() {
            let mut masked = vec![0.0; self.num_classes()];
            let mut any = false;
            for (class, &w) in winners.iter().enumerate() {
                if w == m && dlogits[class] != 0.0 {
                    masked[class] = dlogits[class];
                    any = true;
                }
            }
            if any {
                for (acc, g) in dx.iter_mut().zip(member.backprop_input(x, &masked)?) {
                    *acc += g;
                }
            }
        }
        Ok(dx)
    }
}

/// SGD settings. Learning rate decays geometrically per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub arch: Arch,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.1,
            lr_decay: 0.99,
            arch: Arch::Mlp1,
            hidden: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::InvalidConfig("lr_decay must be in (0,1]".into()));
        }
        if self.arch == Arch::Mlp1 && self.hidden < 1 {
            return Err(TrainError::InvalidConfig("hidden must be >= 1 for mlp1".into()));
        }
        Ok(())
    }
}

/// Train a classifier by mini-batch SGD on the indexed examples.
///
/// When an attack is given, every batch is replaced by its attacked version
/// against `target` (the fixed pre-trained model) before each gradient
/// step, and the attack is regenerated every epoch. Deterministic given the
/// config seed.
pub fn train(
    ds: &Dataset,
    indices: &[usize],
    attack: Option<&AttackSpec>,
    target: Option<&Classifier>,
    cfg: &TrainConfig,
) -> Result<Classifier, TrainError> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(TrainError::EmptyIndexSet);
    }
    if attack.is_some() && target.is_none() {
        return Err(TrainError::InvalidConfig(
            "adversarial training requires a target model for attack generation".into(),
        ));
    }
    for &i in indices {
        if i >= ds.len() {
            return Err(TrainError::InvalidConfig(format!(
                "index {i} out of range for dataset of {}",
                ds.len()
            )));
        }
    }

    let (c, d) = (ds.num_classes(), ds.dim());
    let mut model = match cfg.arch {
        Arch::Linear => Classifier::zeroed_linear(c, d),
        Arch::Mlp1 => Classifier::zeroed_mlp1(c, d, cfg.hidden),
    };

    // Weights start uniform in +-1/sqrt(fan_in); biases start at zero.
    let mut init_rng = rng_from(substream(cfg.seed, "init", 0));
    let mut params = model.params();
    let (w1_len, b1_len) = match cfg.arch {
        Arch::Linear => (c * d, c),
        Arch::Mlp1 => (cfg.hidden * d, cfg.hidden),
    };
    let w1_scale = 1.0 / (d as f64).sqrt();
    let w2_scale = 1.0 / (cfg.hidden.max(1) as f64).sqrt();
    for (i, p) in params.iter_mut().enumerate() {
        if i < w1_len {
            *p = (2.0 * init_rng.random::<f64>() - 1.0) * w1_scale;
        } else if i < w1_len + b1_len {
            *p = 0.0;
        } else if cfg.arch == Arch::Mlp1 && i < w1_len + b1_len + c * cfg.hidden {
            *p = (2.0 * init_rng.random::<f64>() - 1.0) * w2_scale;
        } else {
            *p = 0.0;
        }
    }
    model.set_params(&params)?;

    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = indices.to_vec();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng_from(substream(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; model.params().len()];
            for &i in batch {
                let ex = ds.example(i);
                let x = match attack {
                    Some(spec) if spec.kind != AttackKind::Clean => {
                        apply_attack(spec, target.unwrap(), &ex.features, ex.label)?
                    }
                    _ => ex.features.clone(),
                };
                let g = model.param_gradients(&x, ex.label)?;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            let scale = lr / batch.len() as f64;
            let mut params = model.params();
            for (p, g) in params.iter_mut().zip(grad.iter()) {
                *p -= scale * g;
            }
            model.set_params(&params)?;
        }
        lr *= cfg.lr_decay;
    }
    Ok(model)
}

/// Fraction of indexed examples whose argmax logit matches the label.
pub fn accuracy(model: &dyn Model, ds: &Dataset, indices: &[usize]) -> Result<f64, ModelError> {
    let mut hits = 0usize;
    for &i in indices {
        let ex = ds.example(i);
        let logits = model.logits(&ex.features)?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap();
        if pred == ex.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Save a classifier as JSON; floats round-trip losslessly.
pub fn save_model(model: &Classifier, path: &Path) -> Result<(), ModelError> {
    let json = serde_json::to_string_pretty(model).expect("model serialization cannot fail");
    std::fs::write(path, json).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Load a classifier written by [`save_model`].
pub fn load_model(path: &Path) -> Result<Classifier, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let model: Classifier = serde_json::from_str(&text).map_err(|e| ModelError::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    model.validate()?;
    Ok(model)
}
