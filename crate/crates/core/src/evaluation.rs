//! Inference rule, evaluation metrics, baseline rejectors, cost sweeps and the
//! generalization-gap rate diagnostic.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_task, Dataset, GaussianMixtureTask, Label};
use crate::losses::{generalized_loss, is_correct, CalibrationSpec, CostSpec};
use crate::models::{Architecture, FixedClient, ScoreFn, Scorer, SgdConfig};
use crate::rng::{derive_seed, rng_for, stream};
use crate::scalar::{logistic, Scalar};
use crate::training::{train_help, HelpSystem};
use crate::{Error, Result};

/// Output of the inference rule. `label` is `None` when the answering scorer
/// returns exactly zero, which counts as a mistake for either class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub label: Option<Label>,
    pub deferred: bool,
}

fn label_of<T: Scalar>(score: T) -> Option<Label> {
    if score > T::zero() {
        Some(Label::Pos)
    } else if score < T::zero() {
        Some(Label::Neg)
    } else {
        None
    }
}

/// Rejector first: `r(x) <= 0` answers with the expert, otherwise with the
/// client. The client is evaluated only when the sample is kept.
pub fn predict_with<T, C, R, E>(client: &C, rejector: &R, expert: &E, x: &[T]) -> Result<Prediction>
where
    T: Scalar,
    C: ScoreFn<T> + ?Sized,
    R: ScoreFn<T> + ?Sized,
    E: ScoreFn<T> + ?Sized,
{
    if rejector.score(x)? <= T::zero() {
        Ok(Prediction {
            label: label_of(expert.score(x)?),
            deferred: true,
        })
    } else {
        Ok(Prediction {
            label: label_of(client.score(x)?),
            deferred: false,
        })
    }
}

impl<T: Scalar> HelpSystem<T> {
    pub fn predict(&self, x: &[T]) -> Result<Prediction> {
        predict_with(&self.client, &self.rejector, &self.expert, x)
    }
}

/// Dataset-level metrics. Coverage is the deferred fraction. Cross-partition
/// accuracies are `None` when their partition is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EvalReport<T> {
    pub accuracy: T,
    pub coverage: T,
    pub generalized_risk: T,
    pub client_acc_on_kept: Option<T>,
    pub client_acc_on_deferred: Option<T>,
    pub expert_acc_on_kept: Option<T>,
    pub expert_acc_on_deferred: Option<T>,
    pub n: usize,
}

impl<T: Scalar> EvalReport<T> {
    pub const CSV_HEADER: &'static str = "accuracy,coverage,generalized_risk,client_acc_on_kept,client_acc_on_deferred,expert_acc_on_kept,expert_acc_on_deferred,n";

    /// Fields in [`Self::CSV_HEADER`] order; absent values are empty cells.
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<T>| v.map(|v| v.to_string()).unwrap_or_default();
        vec![
            self.accuracy.to_string(),
            self.coverage.to_string(),
            self.generalized_risk.to_string(),
            opt(self.client_acc_on_kept),
            opt(self.client_acc_on_deferred),
            opt(self.expert_acc_on_kept),
            opt(self.expert_acc_on_deferred),
            self.n.to_string(),
        ]
    }

    /// `expert_acc_on_deferred - client_acc_on_deferred`, if anything was deferred.
    pub fn deferred_gap(&self) -> Option<T> {
        Some(self.expert_acc_on_deferred? - self.client_acc_on_deferred?)
    }
}

/// Evaluates all three scorers on every sample and aggregates with the system's costs.
pub fn evaluate<T: Scalar>(sys: &HelpSystem<T>, ds: &Dataset<T>) -> Result<EvalReport<T>> {
    evaluate_with_costs(sys, ds, &sys.costs)
}

pub fn evaluate_with_costs<T: Scalar>(
    sys: &HelpSystem<T>,
    ds: &Dataset<T>,
    costs: &CostSpec<T>,
) -> Result<EvalReport<T>> {
    let mut loss = T::zero();
    let (mut correct, mut deferred) = (0usize, 0usize);
    let (mut client_kept, mut client_def, mut expert_kept, mut expert_def) = (0usize, 0usize, 0usize, 0usize);
    for s in ds {
        let r = sys.rejector.score(&s.x)?;
        let m = sys.client.score(&s.x)?;
        let e = sys.expert.score(&s.x)?;
        loss = loss + generalized_loss(m, e, r, s.y, costs);
        let (m_ok, e_ok) = (is_correct(m, s.y), is_correct(e, s.y));
        if r <= T::zero() {
            deferred += 1;
            correct += usize::from(e_ok);
            client_def += usize::from(m_ok);
            expert_def += usize::from(e_ok);
        } else {
            correct += usize::from(m_ok);
            client_kept += usize::from(m_ok);
            expert_kept += usize::from(e_ok);
        }
    }
    let n = ds.len();
    let kept = n - deferred;
    let frac = |num: usize, den: usize| (den > 0).then(|| T::lit(num as f64) / T::lit(den as f64));
    Ok(EvalReport {
        accuracy: T::lit(correct as f64) / T::lit(n as f64),
        coverage: T::lit(deferred as f64) / T::lit(n as f64),
        generalized_risk: loss / T::lit(n as f64),
        client_acc_on_kept: frac(client_kept, kept),
        client_acc_on_deferred: frac(client_def, deferred),
        expert_acc_on_kept: frac(expert_kept, kept),
        expert_acc_on_deferred: frac(expert_def, deferred),
        n,
    })
}

/// Accuracy of a single scorer on its own.
pub fn accuracy<T: Scalar, S: ScoreFn<T> + ?Sized>(scorer: &S, ds: &Dataset<T>) -> Result<T> {
    let mut correct = 0usize;
    for s in ds {
        correct += usize::from(is_correct(scorer.score(&s.x)?, s.y));
    }
    Ok(T::lit(correct as f64) / T::lit(ds.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Learn2helpJoint,
    Learn2helpRejectorOnly,
    ConfidenceSigmoid,
    ConfidenceDistance,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Learn2helpJoint,
        Method::Learn2helpRejectorOnly,
        Method::ConfidenceSigmoid,
        Method::ConfidenceDistance,
        Method::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Learn2helpJoint => "learn2help_joint",
            Method::Learn2helpRejectorOnly => "learn2help_rejector_only",
            Method::ConfidenceSigmoid => "confidence_sigmoid",
            Method::ConfidenceDistance => "confidence_distance",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One point of an accuracy/coverage curve. `knob` is the cost, threshold or
/// rate that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CurvePoint<T> {
    pub method: Method,
    pub knob: T,
    pub coverage: T,
    pub accuracy: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceVariant {
    /// Defer when `|q(x) - 1/2| < t`.
    Sigmoid,
    /// Defer when `q(x) (1 - q(x)) > t`.
    Distance,
}

struct Cached<T> {
    q: T,
    client_ok: bool,
    expert_ok: bool,
}

fn cache<T: Scalar>(client: &FixedClient<T>, expert: &Scorer<T>, ds: &Dataset<T>) -> Result<Vec<Cached<T>>> {
    ds.iter()
        .map(|s| {
            let m = client.score(&s.x)?;
            Ok(Cached {
                q: logistic(m),
                client_ok: is_correct(m, s.y),
                expert_ok: is_correct(expert.score(&s.x)?, s.y),
            })
        })
        .collect()
}

fn curve_point<T: Scalar>(method: Method, knob: T, rows: &[Cached<T>], defer: impl Fn(usize) -> bool) -> CurvePoint<T> {
    let (mut deferred, mut correct) = (0usize, 0usize);
    for (i, c) in rows.iter().enumerate() {
        if defer(i) {
            deferred += 1;
            correct += usize::from(c.expert_ok);
        } else {
            correct += usize::from(c.client_ok);
        }
    }
    let n = T::lit(rows.len() as f64);
    CurvePoint {
        method,
        knob,
        coverage: T::lit(deferred as f64) / n,
        accuracy: T::lit(correct as f64) / n,
    }
}

/// Deferral by thresholding the client's own confidence.
pub fn confidence_baseline_curve<T: Scalar>(
    client: &FixedClient<T>,
    expert: &Scorer<T>,
    ds: &Dataset<T>,
    thresholds: &[T],
    variant: ConfidenceVariant,
) -> Result<Vec<CurvePoint<T>>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::contract("thresholds must be sorted ascending"));
    }
    let rows = cache(client, expert, ds)?;
    let half = T::lit(0.5);
    Ok(thresholds
        .iter()
        .map(|&t| match variant {
            ConfidenceVariant::Sigmoid => {
                curve_point(Method::ConfidenceSigmoid, t, &rows, |i| (rows[i].q - half).abs() < t)
            }
            ConfidenceVariant::Distance => curve_point(Method::ConfidenceDistance, t, &rows, |i| {
                rows[i].q * (T::one() - rows[i].q) > t
            }),
        })
        .collect())
}

/// Defers each sample independently with probability `rate`. One uniform draw
/// per sample is shared by all rates, so coverage is monotone in the rate.
pub fn random_baseline_curve<T: Scalar>(
    client: &FixedClient<T>,
    expert: &Scorer<T>,
    ds: &Dataset<T>,
    rates: &[T],
    seed: u64,
) -> Result<Vec<CurvePoint<T>>> {
    if rates.iter().any(|&r| !(r >= T::zero() && r <= T::one())) {
        return Err(Error::contract("rates must lie in [0, 1]"));
    }
    let rows = cache(client, expert, ds)?;
    let mut rng = rng_for(seed, stream::BASELINE);
    let draws: Vec<f64> = (0..rows.len()).map(|_| rng.random::<f64>()).collect();
    Ok(rates
        .iter()
        .map(|&rate| {
            let p = rate.to_f64_lossy();
            curve_point(Method::Random, rate, &rows, |i| draws[i] < p)
        })
        .collect())
}

/// Everything a training run needs besides the cost weights.
#[derive(Debug, Clone)]
pub struct RunSetup<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub client: FixedClient<T>,
    pub rejector_arch: Architecture,
    pub expert_arch: Architecture,
    pub calib: CalibrationSpec<T>,
    pub cfg: SgdConfig<T>,
}

impl<T: Scalar> RunSetup<T> {
    /// Fresh rejector and expert initialized from `seed`, trained jointly.
    pub fn train_joint(&self, costs: &CostSpec<T>, seed: u64) -> Result<HelpSystem<T>> {
        let rejector = Scorer::init(self.rejector_arch.clone(), derive_seed(seed, 0))?;
        let expert = Scorer::init(self.expert_arch.clone(), derive_seed(seed, 1))?;
        let cfg = SgdConfig {
            seed,
            ..self.cfg.clone()
        };
        Ok(train_help(&self.train, &self.client, rejector, expert, costs, &self.calib, &cfg)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SweepRow<T> {
    pub ce: T,
    pub seed: u64,
    pub report: EvalReport<T>,
}

impl<T: Scalar> SweepRow<T> {
    pub fn curve_point(&self) -> CurvePoint<T> {
        CurvePoint {
            method: Method::Learn2helpJoint,
            knob: self.ce,
            coverage: self.report.coverage,
            accuracy: self.report.accuracy,
        }
    }
}

/// One joint training run per `ce` (with `c1` fixed), each with its own seed
/// derived from `base_seed`, evaluated on the test set. Runs execute in
/// parallel; rows come back in `ce_values` order.
pub fn cost_sweep<T: Scalar>(setup: &RunSetup<T>, ce_values: &[T], c1: T, base_seed: u64) -> Result<Vec<SweepRow<T>>> {
    if ce_values.is_empty() {
        return Err(Error::config("ce_values", "must be nonempty"));
    }
    ce_values
        .par_iter()
        .enumerate()
        .map(|(i, &ce)| {
            let costs = CostSpec::new(c1, ce)?;
            let seed = derive_seed(base_seed, i as u64);
            let sys = setup.train_joint(&costs, seed)?;
            Ok(SweepRow {
                ce,
                seed,
                report: evaluate(&sys, &setup.test)?,
            })
        })
        .collect()
}

/// Linear interpolation of accuracy at `coverage` along a curve sorted by
/// coverage; `None` outside the curve's coverage range.
pub fn interpolate_accuracy<T: Scalar>(curve: &[CurvePoint<T>], coverage: T) -> Option<T> {
    let mut pts: Vec<(T, T)> = curve.iter().map(|p| (p.coverage, p.accuracy)).collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let (first, last) = (pts.first()?.0, pts.last()?.0);
    if coverage < first || coverage > last {
        return None;
    }
    for w in pts.windows(2) {
        let ((c0, a0), (c1, a1)) = (w[0], w[1]);
        if coverage >= c0 && coverage <= c1 {
            if c1 == c0 {
                return Some(a0.max(a1));
            }
            let t = (coverage - c0) / (c1 - c0);
            return Some(a0 + t * (a1 - a0));
        }
    }
    // single point curve
    Some(pts[0].1)
}

/// Accuracy difference `a - b` on a coverage grid restricted to the range both
/// curves cover and to `[lo, hi]`.
pub fn matched_coverage_gaps<T: Scalar>(
    a: &[CurvePoint<T>],
    b: &[CurvePoint<T>],
    lo: T,
    hi: T,
    step: T,
) -> Vec<(T, T)> {
    let mut out = Vec::new();
    let mut c = lo;
    while c <= hi + step * T::lit(1e-9) {
        if let (Some(x), Some(y)) = (interpolate_accuracy(a, c), interpolate_accuracy(b, c)) {
            out.push((c, x - y));
        }
        c = c + step;
    }
    out
}

/// Writes curves as CSV with header `method,knob,coverage,accuracy`.
pub fn write_curves_csv<T: Scalar>(points: &[CurvePoint<T>], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "method,knob,coverage,accuracy").map_err(io)?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.method, p.knob, p.coverage, p.accuracy).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Mean absolute train/held-out risk gap at one sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GapPoint<T> {
    pub n: usize,
    pub mean_gap: T,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SlopeReport<T> {
    pub slope: T,
    pub points: Vec<GapPoint<T>>,
}

/// Mean gaps at or below this are rounding noise of identical risks and are
/// excluded from the fit.
pub const ZERO_GAP: f64 = 1e-12;

/// Generic form of [`risk_gap_slope`]: `sample(n, seed)` draws a training set,
/// `train(ds, seed)` fits a system on it, and the gap is measured against
/// `holdout`. Returns the least-squares slope of `ln(gap)` against `ln(n)`.
pub fn risk_gap_slope_with<T, S, F>(
    n_values: &[usize],
    repeats: usize,
    holdout: &Dataset<T>,
    seed: u64,
    sample: S,
    train: F,
) -> Result<SlopeReport<T>>
where
    T: Scalar,
    S: Fn(usize, u64) -> Result<Dataset<T>> + Sync,
    F: Fn(&Dataset<T>, u64) -> Result<HelpSystem<T>> + Sync,
{
    if n_values.len() < 3 || n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "n_values",
            "need at least 3 strictly increasing sample sizes",
        ));
    }
    if repeats < 3 {
        return Err(Error::config("repeats", "must be at least 3"));
    }
    let jobs: Vec<(usize, usize)> = (0..n_values.len())
        .flat_map(|i| (0..repeats).map(move |rep| (i, rep)))
        .collect();
    let gaps: Vec<T> = jobs
        .par_iter()
        .map(|&(i, rep)| {
            let run_seed = derive_seed(seed, (i * repeats + rep) as u64);
            let train_set = sample(n_values[i], run_seed)?;
            let sys = train(&train_set, run_seed)?;
            let empirical = evaluate(&sys, &train_set)?.generalized_risk;
            let held_out = evaluate(&sys, holdout)?.generalized_risk;
            Ok((empirical - held_out).abs())
        })
        .collect::<Result<_>>()?;

    let points: Vec<GapPoint<T>> = n_values
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let chunk = &gaps[i * repeats..(i + 1) * repeats];
            let mean_gap = chunk.iter().fold(T::zero(), |a, &g| a + g) / T::lit(repeats as f64);
            GapPoint {
                n,
                mean_gap,
                excluded: !(mean_gap > T::lit(ZERO_GAP)),
            }
        })
        .collect();
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| !p.excluded)
        .map(|p| ((p.n as f64).ln(), p.mean_gap.to_f64_lossy().ln()))
        .collect();
    if used.len() < 3 {
        return Err(Error::Degenerate {
            what: "risk gap slope".into(),
            reason: format!(
                "{} of {} sample sizes had a zero gap and were excluded; fewer than 3 remain",
                points.len() - used.len(),
                points.len()
            ),
        });
    }
    Ok(SlopeReport {
        slope: T::lit(least_squares_slope(&used)),
        points,
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Trains the joint system at each sample size drawn from `task` and measures the
/// train/held-out risk gap against a held-out sample of `n_holdout` draws.
pub fn risk_gap_slope<T: Scalar>(
    task: &GaussianMixtureTask<T>,
    setup: &RunSetup<T>,
    costs: &CostSpec<T>,
    n_values: &[usize],
    repeats: usize,
    n_holdout: usize,
    seed: u64,
) -> Result<SlopeReport<T>> {
    let holdout = sample_task(task, n_holdout, derive_seed(seed, u64::MAX))?;
    risk_gap_slope_with(
        n_values,
        repeats,
        &holdout,
        seed,
        |n, s| sample_task(task, n, s),
        |ds, s| {
            let local = RunSetup {
                train: ds.clone(),
                ..setup.clone()
            };
            local.train_joint(costs, s)
        },
    )
}
