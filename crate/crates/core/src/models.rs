//! Differentiable scorers with explicit forward/backward passes.
//!
//! A [`Scorer`] maps `R^k -> R`. It realizes the client `m`, the rejector `r`
//! and the expert `e`. Parameters are stored as one flat vector; for each dense
//! layer the `out x in` weight matrix (row-major) is followed by its `out` biases.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, stream};
use crate::scalar::{logistic, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// No non-linearity; a stack of such layers is still a linear map.
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Identity => z,
        }
    }

    fn deriv<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    Linear {
        input: usize,
    },
    /// Layer widths from input to output; the last width must be 1. The
    /// activation is applied after every hidden layer, never after the output.
    Mlp {
        widths: Vec<usize>,
        activation: Activation,
    },
}

impl Architecture {
    pub fn mlp(widths: &[usize], activation: Activation) -> Self {
        Architecture::Mlp {
            widths: widths.to_vec(),
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Linear { input } if *input == 0 => {
                Err(Error::config("architecture.input", "input width must be at least 1"))
            }
            Architecture::Linear { .. } => Ok(()),
            Architecture::Mlp { widths, .. } => {
                if widths.len() < 2 {
                    return Err(Error::config(
                        "architecture.widths",
                        "need at least input and output widths",
                    ));
                }
                if let Some(i) = widths.iter().position(|&w| w == 0) {
                    return Err(Error::config(
                        "architecture.widths",
                        format!("layer {i} has zero width"),
                    ));
                }
                if *widths.last().unwrap() != 1 {
                    return Err(Error::config("architecture.widths", "output width must be 1"));
                }
                Ok(())
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Linear { input } => *input,
            Architecture::Mlp { widths, .. } => widths[0],
        }
    }

    /// `(fan_in, fan_out)` per dense layer.
    fn layers(&self) -> Vec<(usize, usize)> {
        match self {
            Architecture::Linear { input } => vec![(*input, 1)],
            Architecture::Mlp { widths, .. } => widths.windows(2).map(|w| (w[0], w[1])).collect(),
        }
    }

    fn activation(&self) -> Activation {
        match self {
            Architecture::Linear { .. } => Activation::Identity,
            Architecture::Mlp { activation, .. } => *activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Parametric differentiable map `R^k -> R`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "ScorerRecord<T>", into = "ScorerRecord<T>", bound = "T: Scalar")]
pub struct Scorer<T> {
    architecture: Architecture,
    params: Vec<T>,
    // Identifies the exact parameter state a tape was recorded against.
    stamp: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ScorerRecord<T> {
    architecture: Architecture,
    parameters: Vec<T>,
}

impl<T: Scalar> From<ScorerRecord<T>> for Scorer<T> {
    fn from(r: ScorerRecord<T>) -> Self {
        Scorer {
            architecture: r.architecture,
            params: r.parameters,
            stamp: fresh_stamp(),
        }
    }
}

impl<T: Scalar> From<Scorer<T>> for ScorerRecord<T> {
    fn from(s: Scorer<T>) -> Self {
        ScorerRecord {
            architecture: s.architecture,
            parameters: s.params,
        }
    }
}

impl<T: PartialEq> PartialEq for Scorer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.architecture == other.architecture && self.params == other.params
    }
}

/// Activations recorded by [`Scorer::forward`], sufficient for an exact backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    stamp: u64,
    // inputs[l] is the input to layer l; pre[l] its pre-activation output.
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Smallest `|pre-activation|` over hidden units, or `None` without hidden
    /// layers. Finite differences are unreliable when this is near a ReLU kink.
    pub fn distance_to_kink(&self) -> Option<T> {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flatten()
            .map(|v| v.abs())
            .reduce(|a, b| a.min(b))
    }
}

impl<T: Scalar> Scorer<T> {
    /// Central-difference gradient of the score with respect to every parameter.
    pub fn numeric_param_grad(&self, x: &[T], h: T) -> Result<Vec<T>> {
        let mut probe = self.clone();
        let mut grad = Vec::with_capacity(self.params.len());
        for i in 0..self.params.len() {
            let orig = probe.params[i];
            probe.params[i] = orig + h;
            let up = probe.score(x)?;
            probe.params[i] = orig - h;
            let down = probe.score(x)?;
            probe.params[i] = orig;
            grad.push((up - down) / (h + h));
        }
        Ok(grad)
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = rng_for(seed, stream::INIT);
        let mut params = Vec::with_capacity(architecture.param_count());
        for (fan_in, fan_out) in architecture.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-bound..=bound))));
            params.extend(std::iter::repeat_n(T::zero(), fan_out));
        }
        Ok(Self {
            architecture,
            params,
            stamp: fresh_stamp(),
        })
    }

    pub fn from_params(architecture: Architecture, params: Vec<T>) -> Result<Self> {
        architecture.validate()?;
        if params.len() != architecture.param_count() {
            return Err(Error::contract(format!(
                "architecture needs {} parameters, got {}",
                architecture.param_count(),
                params.len()
            )));
        }
        Ok(Self {
            architecture,
            params,
            stamp: fresh_stamp(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "input has dimension {}, scorer expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Score only, without recording a tape.
    pub fn score(&self, x: &[T]) -> Result<T> {
        self.check_input(x)?;
        let act = self.architecture.activation();
        let layers = self.architecture.layers();
        let last = layers.len() - 1;
        let mut offset = 0;
        let mut a = x.to_vec();
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let (w, b) = self.params[offset..offset + fan_in * fan_out + fan_out].split_at(fan_in * fan_out);
            a = (0..fan_out)
                .map(|o| {
                    let z = dot(&w[o * fan_in..(o + 1) * fan_in], &a) + b[o];
                    if l == last {
                        z
                    } else {
                        act.apply(z)
                    }
                })
                .collect();
            offset += fan_in * fan_out + fan_out;
        }
        Ok(a[0])
    }

    pub fn forward(&self, x: &[T]) -> Result<(T, Tape<T>)> {
        self.check_input(x)?;
        let act = self.architecture.activation();
        let layers = self.architecture.layers();
        let last = layers.len() - 1;
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut a = x.to_vec();
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let (w, b) = self.params[offset..offset + fan_in * fan_out + fan_out].split_at(fan_in * fan_out);
            let z: Vec<T> = (0..fan_out)
                .map(|o| dot(&w[o * fan_in..(o + 1) * fan_in], &a) + b[o])
                .collect();
            let next = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| act.apply(v)).collect()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
            offset += fan_in * fan_out + fan_out;
        }
        let score = a[0];
        if !score.is_finite() {
            return Err(Error::contract("scorer produced a non-finite score"));
        }
        Ok((
            score,
            Tape {
                stamp: self.stamp,
                inputs,
                pre,
            },
        ))
    }

    /// Gradient of the score with respect to the parameters, scaled by `upstream`.
    pub fn backward(&self, tape: &Tape<T>, upstream: T) -> Result<Vec<T>> {
        if tape.stamp != self.stamp {
            return Err(Error::contract("tape was recorded against different parameters"));
        }
        let act = self.architecture.activation();
        let layers = self.architecture.layers();
        let mut grad = vec![T::zero(); self.params.len()];
        let mut offsets = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for &(fan_in, fan_out) in &layers {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }

        let mut delta = vec![upstream];
        for l in (0..layers.len()).rev() {
            let (fan_in, fan_out) = layers[l];
            let base = offsets[l];
            let input = &tape.inputs[l];
            for o in 0..fan_out {
                let row = base + o * fan_in;
                for i in 0..fan_in {
                    grad[row + i] = delta[o] * input[i];
                }
                grad[base + fan_in * fan_out + o] = delta[o];
            }
            if l > 0 {
                let w = &self.params[base..base + fan_in * fan_out];
                let prev_pre = &tape.pre[l - 1];
                delta = (0..fan_in)
                    .map(|i| {
                        let back = (0..fan_out).fold(T::zero(), |acc, o| acc + w[o * fan_in + i] * delta[o]);
                        back * act.deriv(prev_pre[i])
                    })
                    .collect();
            }
        }
        Ok(grad)
    }

    /// `params <- params - lr * gradient`.
    pub fn sgd_step(&mut self, gradient: &[T], lr: T) -> Result<()> {
        if gradient.len() != self.params.len() {
            return Err(Error::contract(format!(
                "gradient has length {}, scorer has {} parameters",
                gradient.len(),
                self.params.len()
            )));
        }
        if !(lr > T::zero()) {
            return Err(Error::contract("learning rate must be positive"));
        }
        for (p, &g) in self.params.iter_mut().zip(gradient) {
            *p = *p - lr * g;
        }
        self.stamp = fresh_stamp();
        Ok(())
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Anything that maps an input to a real score.
pub trait ScoreFn<T> {
    fn score(&self, x: &[T]) -> Result<T>;
}

impl<T: Scalar> ScoreFn<T> for Scorer<T> {
    fn score(&self, x: &[T]) -> Result<T> {
        Scorer::score(self, x)
    }
}

/// Pre-trained legacy client. Its parameters are immutable once frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
#[serde(transparent)]
pub struct FixedClient<T> {
    scorer: Scorer<T>,
}

impl<T: Scalar> FixedClient<T> {
    pub fn freeze(scorer: Scorer<T>) -> Self {
        Self { scorer }
    }

    pub fn scorer(&self) -> &Scorer<T> {
        &self.scorer
    }

    pub fn score(&self, x: &[T]) -> Result<T> {
        self.scorer.score(x)
    }

    /// `q(x)` estimate: logistic of the client score.
    pub fn confidence(&self, x: &[T]) -> Result<T> {
        Ok(logistic(self.score(x)?))
    }
}

impl<T: Scalar> ScoreFn<T> for FixedClient<T> {
    fn score(&self, x: &[T]) -> Result<T> {
        FixedClient::score(self, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct SgdConfig<T> {
    pub learning_rate: T,
    pub epochs: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl<T: Scalar> SgdConfig<T> {
    pub fn new(learning_rate: T, epochs: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            learning_rate,
            epochs,
            batch_size,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > T::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be a positive finite number"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// On-disk model record: architecture, parameters, seed and free-form training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub architecture: Architecture,
    pub parameters: Vec<T>,
    pub seed: u64,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn of(scorer: &Scorer<T>, seed: u64) -> Self {
        Self {
            architecture: scorer.architecture.clone(),
            parameters: scorer.params.clone(),
            seed,
            metadata: Default::default(),
        }
    }

    pub fn to_scorer(&self) -> Result<Scorer<T>> {
        Scorer::from_params(self.architecture.clone(), self.parameters.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
