//! Labeled data, synthetic Gaussian-mixture tasks with closed-form posteriors,
//! and CSV ingestion.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, stream};
use crate::scalar::{logistic, Scalar};
use crate::{Error, Result};

/// Binary label in `{-1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Label {
    Neg,
    Pos,
}

impl Label {
    pub fn from_sign(positive: bool) -> Self {
        if positive {
            Label::Pos
        } else {
            Label::Neg
        }
    }

    /// `+1` or `-1` in the scalar type.
    pub fn sign<T: Scalar>(self) -> T {
        match self {
            Label::Pos => T::one(),
            Label::Neg => -T::one(),
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Label::Pos => 1,
            Label::Neg => -1,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Label::Pos => Label::Neg,
            Label::Neg => Label::Pos,
        }
    }
}

impl TryFrom<i8> for Label {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Label::Pos),
            -1 => Ok(Label::Neg),
            other => Err(format!("label must be -1 or 1, got {other}")),
        }
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        l.as_i8()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_i8())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample<T> {
    pub x: Vec<T>,
    pub y: Label,
}

/// Nonempty ordered collection of samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    samples: Vec<LabeledSample<T>>,
    dim: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<LabeledSample<T>>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::contract("dataset must be nonempty"))?;
        let dim = first.x.len();
        if dim == 0 {
            return Err(Error::contract("feature dimension must be at least 1"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != dim {
                return Err(Error::contract(format!(
                    "sample {i} has dimension {}, expected {dim}",
                    s.x.len()
                )));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("sample {i} has a non-finite feature")));
            }
        }
        Ok(Self { samples, dim })
    }

    pub fn samples(&self) -> &[LabeledSample<T>] {
        &self.samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledSample<T>> {
        self.samples.iter()
    }

    pub fn positive_fraction(&self) -> f64 {
        let pos = self.samples.iter().filter(|s| s.y == Label::Pos).count();
        pos as f64 / self.len() as f64
    }

    /// Writes the dataset as CSV with header `f0,...,f{k-1},y`. Reals use the
    /// shortest decimal form that parses back to the identical value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let header: Vec<String> = (0..self.dim)
            .map(|i| format!("f{i}"))
            .chain(std::iter::once("y".to_string()))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        for s in &self.samples {
            let mut line = String::new();
            for v in &s.x {
                line.push_str(&v.to_string());
                line.push(',');
            }
            line.push_str(&s.y.to_string());
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl<'a, T> IntoIterator for &'a Dataset<T> {
    type Item = &'a LabeledSample<T>;
    type IntoIter = std::slice::Iter<'a, LabeledSample<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

/// Reads a dataset written in the `f0,...,f{k-1},y` format. Row order is preserved.
pub fn load_csv<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let ingest = |line: u64, reason: String| Error::Ingest {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let headers = reader.headers().map_err(|e| ingest(1, e.to_string()))?.clone();
    let k = headers
        .len()
        .checked_sub(1)
        .filter(|&k| k > 0)
        .ok_or_else(|| ingest(1, "header needs at least one feature column and `y`".into()))?;
    for (i, h) in headers.iter().enumerate() {
        let expected = if i == k { "y".to_string() } else { format!("f{i}") };
        if h.trim() != expected {
            return Err(ingest(1, format!("header column {i} is `{h}`, expected `{expected}`")));
        }
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            ingest(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != k + 1 {
            return Err(ingest(
                line,
                format!("expected {} fields, found {}", k + 1, record.len()),
            ));
        }
        let mut x = Vec::with_capacity(k);
        for (i, cell) in record.iter().take(k).enumerate() {
            let v: T = cell
                .trim()
                .parse()
                .map_err(|_| ingest(line, format!("column f{i}: `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(ingest(line, format!("column f{i}: `{cell}` is not finite")));
            }
            x.push(v);
        }
        let cell = record[k].trim();
        let y = match cell.parse::<f64>() {
            Ok(1.0) => Label::Pos,
            Ok(-1.0) => Label::Neg,
            _ => return Err(ingest(line, format!("label `{cell}` is not -1 or 1"))),
        };
        samples.push(LabeledSample { x, y });
    }
    if samples.is_empty() {
        return Err(ingest(1, "file has no data rows".into()));
    }
    Dataset::new(samples)
}

/// Shuffled disjoint partition into sizes `ceil(fraction * n)` and the remainder.
pub fn split<T: Scalar>(ds: &Dataset<T>, fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("fraction", format!("must lie in (0, 1), got {fraction}")));
    }
    let n = ds.len();
    let first = ((fraction * n as f64).ceil() as usize).min(n);
    if first == 0 || first == n {
        return Err(Error::config(
            "fraction",
            format!("splitting {n} samples at {fraction} leaves an empty partition"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, stream::SPLIT));
    let pick = |ids: &[usize]| ids.iter().map(|&i| ds.samples[i].clone()).collect::<Vec<_>>();
    Ok((Dataset::new(pick(&idx[..first]))?, Dataset::new(pick(&idx[first..]))?))
}

/// Plain-data description of a two-component Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureParams<T> {
    pub prior_pos: T,
    pub mean_pos: Vec<T>,
    pub mean_neg: Vec<T>,
    pub cov_pos: Vec<Vec<T>>,
    pub cov_neg: Vec<Vec<T>>,
}

/// Class-conditional Gaussian component with its Cholesky factor cached.
#[derive(Debug, Clone, PartialEq)]
struct Component<T> {
    mean: Vec<T>,
    chol: Vec<Vec<T>>,
    half_log_det: T,
}

impl<T: Scalar> Component<T> {
    fn new(mean: Vec<T>, cov: &[Vec<T>], name: &str) -> Result<Self> {
        let k = mean.len();
        if cov.len() != k || cov.iter().any(|row| row.len() != k) {
            return Err(Error::config(name, format!("covariance must be {k}x{k}")));
        }
        let tol = T::lit(1e-12);
        for i in 0..k {
            for j in 0..i {
                let scale = T::one().max(cov[i][j].abs());
                if (cov[i][j] - cov[j][i]).abs() > tol * scale {
                    return Err(Error::config(name, "covariance is not symmetric"));
                }
            }
        }
        let chol = cholesky(cov).ok_or_else(|| Error::config(name, "covariance is not positive definite"))?;
        let half_log_det = (0..k).fold(T::zero(), |acc, i| acc + chol[i][i].ln());
        Ok(Self {
            mean,
            chol,
            half_log_det,
        })
    }

    /// Log density without the `-(k/2) ln(2 pi)` constant, which cancels in ratios.
    fn log_density_unnormalized(&self, x: &[T]) -> T {
        // Solve L z = x - mean by forward substitution; quadratic form is |z|^2.
        let k = self.mean.len();
        let mut z = vec![T::zero(); k];
        for i in 0..k {
            let mut acc = x[i] - self.mean[i];
            for j in 0..i {
                acc = acc - self.chol[i][j] * z[j];
            }
            z[i] = acc / self.chol[i][i];
        }
        let quad = z.iter().fold(T::zero(), |acc, &v| acc + v * v);
        -T::lit(0.5) * quad - self.half_log_det
    }

    fn draw(&self, rng: &mut crate::rng::Rng) -> Vec<T> {
        let k = self.mean.len();
        let z: Vec<T> = (0..k).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        (0..k)
            .map(|i| (0..=i).fold(self.mean[i], |acc, j| acc + self.chol[i][j] * z[j]))
            .collect()
    }
}

fn cholesky<T: Scalar>(a: &[Vec<T>]) -> Option<Vec<Vec<T>>> {
    let k = a.len();
    let mut l = vec![vec![T::zero(); k]; k];
    for i in 0..k {
        for j in 0..=i {
            let mut sum = a[i][j];
            for p in 0..j {
                sum = sum - l[i][p] * l[j][p];
            }
            if i == j {
                if !(sum > T::zero()) || !sum.is_finite() {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

/// Two-class Gaussian mixture with known regression function `eta(x) = P(Y=1 | X=x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianMixtureParams<T>", into = "GaussianMixtureParams<T>")]
#[serde(bound = "T: Scalar")]
pub struct GaussianMixtureTask<T> {
    prior_pos: T,
    pos: Component<T>,
    neg: Component<T>,
    cov_pos: Vec<Vec<T>>,
    cov_neg: Vec<Vec<T>>,
}

impl<T: Scalar> TryFrom<GaussianMixtureParams<T>> for GaussianMixtureTask<T> {
    type Error = Error;

    fn try_from(p: GaussianMixtureParams<T>) -> Result<Self> {
        GaussianMixtureTask::new(p)
    }
}

impl<T: Scalar> From<GaussianMixtureTask<T>> for GaussianMixtureParams<T> {
    fn from(t: GaussianMixtureTask<T>) -> Self {
        t.params()
    }
}

impl<T: Scalar> GaussianMixtureTask<T> {
    pub fn new(p: GaussianMixtureParams<T>) -> Result<Self> {
        if !(p.prior_pos > T::zero() && p.prior_pos < T::one()) {
            return Err(Error::config("prior_pos", "must lie strictly inside (0, 1)"));
        }
        let k = p.mean_pos.len();
        if k == 0 {
            return Err(Error::config("mean_pos", "dimension must be at least 1"));
        }
        if p.mean_neg.len() != k {
            return Err(Error::config("mean_neg", format!("expected dimension {k}")));
        }
        if p.mean_pos.iter().chain(&p.mean_neg).any(|v| !v.is_finite()) {
            return Err(Error::config("mean_pos", "means must be finite"));
        }
        Ok(Self {
            prior_pos: p.prior_pos,
            pos: Component::new(p.mean_pos, &p.cov_pos, "cov_pos")?,
            neg: Component::new(p.mean_neg, &p.cov_neg, "cov_neg")?,
            cov_pos: p.cov_pos,
            cov_neg: p.cov_neg,
        })
    }

    /// Isotropic unit-covariance task with the given class means.
    pub fn isotropic(prior_pos: T, mean_pos: Vec<T>, mean_neg: Vec<T>) -> Result<Self> {
        let k = mean_pos.len();
        let eye = identity(k);
        Self::new(GaussianMixtureParams {
            prior_pos,
            mean_pos,
            mean_neg,
            cov_pos: eye.clone(),
            cov_neg: eye,
        })
    }

    /// Desk-scale default: `k = 2`, means `(+1, 0)` / `(-1, 0)`, unit covariance, balanced.
    pub fn desk_default() -> Self {
        Self::isotropic(T::lit(0.5), vec![T::one(), T::zero()], vec![-T::one(), T::zero()])
            .expect("default task is valid")
    }

    pub fn params(&self) -> GaussianMixtureParams<T> {
        GaussianMixtureParams {
            prior_pos: self.prior_pos,
            mean_pos: self.pos.mean.clone(),
            mean_neg: self.neg.mean.clone(),
            cov_pos: self.cov_pos.clone(),
            cov_neg: self.cov_neg.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.pos.mean.len()
    }

    pub fn prior_pos(&self) -> T {
        self.prior_pos
    }

    /// Log posterior odds `ln(pi N+(x)) - ln((1-pi) N-(x))`.
    pub fn log_odds(&self, x: &[T]) -> Result<T> {
        if x.len() != self.dim() {
            return Err(Error::contract(format!(
                "input has dimension {}, task has {}",
                x.len(),
                self.dim()
            )));
        }
        let prior = self.prior_pos.ln() - (T::one() - self.prior_pos).ln();
        Ok(prior + self.pos.log_density_unnormalized(x) - self.neg.log_density_unnormalized(x))
    }

    /// `eta(x) = P(Y = 1 | X = x)`.
    ///
    /// Evaluated as the logistic of the log-density difference, so it stays defined
    /// far from both means where the raw densities underflow. If the log odds are
    /// themselves undefined (NaN), the prior is returned.
    pub fn posterior_eta(&self, x: &[T]) -> Result<T> {
        let z = self.log_odds(x)?;
        Ok(if z.is_nan() { self.prior_pos } else { logistic(z) })
    }

    /// `1 - eta(x)`, evaluated directly rather than by subtraction.
    pub fn posterior_eta_complement(&self, x: &[T]) -> Result<T> {
        let z = self.log_odds(x)?;
        Ok(if z.is_nan() {
            T::one() - self.prior_pos
        } else {
            logistic(-z)
        })
    }

    /// Draws one labeled sample.
    pub fn draw(&self, rng: &mut crate::rng::Rng) -> LabeledSample<T> {
        let u: f64 = rng.random();
        let y = Label::from_sign(u < self.prior_pos.to_f64_lossy());
        let x = match y {
            Label::Pos => self.pos.draw(rng),
            Label::Neg => self.neg.draw(rng),
        };
        LabeledSample { x, y }
    }
}

fn identity<T: Scalar>(k: usize) -> Vec<Vec<T>> {
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { T::one() } else { T::zero() }).collect())
        .collect()
}

/// Draws `n` i.i.d. samples; deterministic given `seed`.
pub fn sample_task<T: Scalar>(task: &GaussianMixtureTask<T>, n: usize, seed: u64) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::config("n", "sample count must be at least 1"));
    }
    let mut rng = rng_for(seed, stream::SAMPLE);
    Dataset::new((0..n).map(|_| task.draw(&mut rng)).collect())
}
