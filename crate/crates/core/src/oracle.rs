//! Ground truth on tasks with a known regression function: Bayes-optimal rules,
//! the conditional expected surrogate, its closed-form stationary point, and an
//! independent numerical minimizer used to check the calibration rule.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{GaussianMixtureTask, Label};
use crate::losses::{client_error_prob, select_alpha, CalibrationSpec, CostSpec};
use crate::models::FixedClient;
use crate::rng::{rng_for, stream};
use crate::scalar::{clamped_exp, clamped_exp_deriv, ordered_sum, Scalar, EXP_CLAMP};
use crate::{Error, Result};

/// Conditional law at a single input: `eta = P(Y=1|x)`, `q = P(M=1|x)` and the
/// client error probability `p_err = q + eta - 2 q eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConditionalPoint<T> {
    pub eta: T,
    pub q: T,
    pub p_err: T,
    pub costs: CostSpec<T>,
}

impl<T: Scalar> ConditionalPoint<T> {
    pub fn new(eta: T, q: T, costs: CostSpec<T>) -> Result<Self> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !unit(eta) || !unit(q) {
            return Err(Error::contract("eta and q must lie in [0, 1]"));
        }
        Ok(Self {
            eta,
            q,
            p_err: client_error_prob(q, eta),
            costs,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Local,
    Defer,
}

/// `sign(eta - 1/2)`, with the tie `eta = 1/2` resolved to `-1`.
pub fn bayes_expert<T: Scalar>(eta: T) -> Label {
    Label::from_sign(eta > T::lit(0.5))
}

/// `c1 (1/2 - |eta - 1/2|) - p_err + ce`; defer iff the value is `<= 0`.
pub fn bayes_rejector<T: Scalar>(eta: T, p_err: T, costs: &CostSpec<T>) -> T {
    let half = T::lit(0.5);
    costs.c1 * (half - (eta - half).abs()) - p_err + costs.ce
}

/// Compares the posterior cost of answering locally with that of deferring.
/// Ties defer.
pub fn posterior_cost_compare<T: Scalar>(point: &ConditionalPoint<T>) -> Decision {
    let local = point.p_err;
    let defer = point.costs.c1 * point.eta.min(T::one() - point.eta) + point.costs.ce;
    if defer <= local {
        Decision::Defer
    } else {
        Decision::Local
    }
}

/// Conditional generalized risk of the Bayes pair at a point: the cheaper of the
/// two posterior costs.
pub fn bayes_conditional_risk<T: Scalar>(point: &ConditionalPoint<T>) -> T {
    if bayes_rejector(point.eta, point.p_err, &point.costs) <= T::zero() {
        let expert_err = match bayes_expert(point.eta) {
            Label::Pos => T::one() - point.eta,
            Label::Neg => point.eta,
        };
        point.costs.c1 * expert_err + point.costs.ce
    } else {
        point.p_err
    }
}

/// `E_{y|x} E_{m|x,y}` of the surrogate, expanded over the four `(Y, M)` cells.
pub fn conditional_expected_surrogate<T: Scalar>(point: &ConditionalPoint<T>, alpha: T, beta: T, e: T, r: T) -> T {
    let (eta, q) = (point.eta, point.q);
    let (c1, ce) = (point.costs.c1, point.costs.ce);
    let hb = beta * T::lit(0.5);
    let one = T::one();
    let expert_pos = c1 * clamped_exp(hb * (-e - r));
    let expert_neg = c1 * clamped_exp(hb * (e - r));
    let defer = ce * clamped_exp(-r);
    let client = clamped_exp(alpha * r);
    // (Y=+1, M=+1), (Y=-1, M=+1), (Y=-1, M=-1), (Y=+1, M=-1)
    eta * q * (expert_pos + defer)
        + (one - eta) * q * (client + expert_neg + defer)
        + (one - eta) * (one - q) * (expert_neg + defer)
        + eta * (one - q) * (client + expert_pos + defer)
}

/// Gradient of [`conditional_expected_surrogate`] in `(e, r)`.
pub fn conditional_expected_surrogate_grad<T: Scalar>(
    point: &ConditionalPoint<T>,
    alpha: T,
    beta: T,
    e: T,
    r: T,
) -> (T, T) {
    let (eta, p) = (point.eta, point.p_err);
    let (c1, ce) = (point.costs.c1, point.costs.ce);
    let hb = beta * T::lit(0.5);
    let one = T::one();
    let dpos = c1 * clamped_exp_deriv(hb * (-e - r));
    let dneg = c1 * clamped_exp_deriv(hb * (e - r));
    let d_e = hb * (-eta * dpos + (one - eta) * dneg);
    let d_r =
        -hb * (eta * dpos + (one - eta) * dneg) - ce * clamped_exp_deriv(-r) + p * alpha * clamped_exp_deriv(alpha * r);
    (d_e, d_r)
}

/// `e* = ln(eta / (1 - eta)) / beta`, with the log-odds clamped to `[-30, 30]`
/// so that `eta` in `{0, 1}` maps to `-30/beta` and `30/beta`.
pub fn closed_form_estar<T: Scalar>(eta: T, beta: T) -> T {
    let c = T::lit(EXP_CLAMP);
    let logit = (eta.ln() - (T::one() - eta).ln()).max(-c).min(c);
    logit / beta
}

/// `r* = ln((2 c1 sqrt(eta(1-eta)) + ce) / (alpha p_err)) / (alpha + 1)` for
/// `beta = 2`. The log argument is clamped to `[e^-30, e^30]`; in particular
/// `p_err = 0` yields `30 / (alpha + 1)` (always keep local).
pub fn closed_form_rstar<T: Scalar>(eta: T, p_err: T, costs: &CostSpec<T>, alpha: T) -> T {
    let c = T::lit(EXP_CLAMP);
    let num = T::lit(2.0) * costs.c1 * (eta * (T::one() - eta)).sqrt() + costs.ce;
    let den = alpha * p_err;
    let log_arg = if den <= T::zero() {
        c
    } else if num <= T::zero() {
        -c
    } else {
        (num.ln() - den.ln()).max(-c).min(c)
    };
    log_arg / (alpha + T::one())
}

/// Search box for [`brute_min_conditional`].
pub const BRUTE_BOX: f64 = 15.0;
const COARSE_STEP: f64 = 0.5;

/// Minimizes the conditional expected surrogate numerically: a coarse grid over
/// `[-15, 15]^2`, then exact coordinate descent (bisection on each partial
/// derivative) until a sweep moves neither coordinate by more than `1e-12`.
pub fn brute_min_conditional<T: Scalar>(point: &ConditionalPoint<T>, alpha: T, beta: T) -> (T, T) {
    let objective = |e: T, r: T| conditional_expected_surrogate(point, alpha, beta, e, r);
    let steps = (2.0 * BRUTE_BOX / COARSE_STEP).round() as usize;
    let at = |i: usize| T::lit(-BRUTE_BOX + COARSE_STEP * i as f64);

    let mut best = (T::zero(), T::zero(), T::infinity());
    for i in 0..=steps {
        for j in 0..=steps {
            let v = objective(at(i), at(j));
            if v < best.2 {
                best = (at(i), at(j), v);
            }
        }
    }

    let (mut e, mut r) = (best.0, best.1);
    let lo = T::lit(-BRUTE_BOX);
    let hi = T::lit(BRUTE_BOX);
    for _ in 0..200 {
        let e_new = line_min(
            |v| conditional_expected_surrogate_grad(point, alpha, beta, v, r).0,
            e,
            lo,
            hi,
        );
        let r_new = line_min(
            |v| conditional_expected_surrogate_grad(point, alpha, beta, e_new, v).1,
            r,
            lo,
            hi,
        );
        let moved = (e_new - e).abs().max((r_new - r).abs());
        e = e_new;
        r = r_new;
        if moved <= T::lit(1e-12) {
            break;
        }
    }
    (e, r)
}

/// Minimizer of a convex 1-D function on `[lo, hi]` given its derivative, starting
/// near `start`: expands a bracket until the derivative changes sign, then bisects.
fn line_min<T: Scalar, G: Fn(T) -> T>(deriv: G, start: T, lo: T, hi: T) -> T {
    let mut step = T::lit(COARSE_STEP);
    let mut a = (start - step).max(lo);
    let mut b = (start + step).min(hi);
    while deriv(a) > T::zero() {
        if a <= lo {
            return lo;
        }
        step = step + step;
        a = (start - step).max(lo);
    }
    step = T::lit(COARSE_STEP);
    while deriv(b) < T::zero() {
        if b >= hi {
            return hi;
        }
        step = step + step;
        b = (start + step).min(hi);
    }
    for _ in 0..200 {
        let mid = (a + b) * T::lit(0.5);
        if mid <= a || mid >= b {
            break;
        }
        if deriv(mid) < T::zero() {
            a = mid;
        } else {
            b = mid;
        }
    }
    (a + b) * T::lit(0.5)
}

/// Monte-Carlo estimate of the generalized risk of the Bayes pair on a synthetic
/// task. `eta` comes from the task's closed-form posterior and the client's
/// confidence is taken as `q`. Each draw contributes its exact conditional risk
/// (expectation over `Y` and `M` given `x`).
pub fn bayes_risk_mc<T: Scalar>(
    task: &GaussianMixtureTask<T>,
    client: &FixedClient<T>,
    costs: &CostSpec<T>,
    n_mc: usize,
    seed: u64,
) -> Result<T> {
    Ok(bayes_risk_mc_with_se(task, client, costs, n_mc, seed)?.0)
}

/// As [`bayes_risk_mc`], also returning the estimator's standard error.
pub fn bayes_risk_mc_with_se<T: Scalar>(
    task: &GaussianMixtureTask<T>,
    client: &FixedClient<T>,
    costs: &CostSpec<T>,
    n_mc: usize,
    seed: u64,
) -> Result<(T, T)> {
    if n_mc == 0 {
        return Err(Error::config("n_mc", "must be at least 1"));
    }
    let mut rng = rng_for(seed, stream::SAMPLE);
    let mut values = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let s = task.draw(&mut rng);
        let eta = task.posterior_eta(&s.x)?;
        let q = client.confidence(&s.x)?;
        values.push(bayes_conditional_risk(&ConditionalPoint::new(eta, q, *costs)?));
    }
    let n = T::lit(n_mc as f64);
    let mean = ordered_sum(values.iter().copied()) / n;
    let var = ordered_sum(values.iter().map(|&v| (v - mean) * (v - mean))) / n;
    Ok((mean, (var / n).sqrt()))
}

/// One row of the calibration sign-consistency sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GridRow<T> {
    pub eta: T,
    pub q: T,
    pub c1: T,
    pub ce: T,
    pub alpha: T,
    pub e_min: T,
    pub r_min: T,
    pub e_bayes_sign: i8,
    pub r_bayes_value: T,
    /// Inside the boundary band, where strict signs are not checked.
    pub boundary: bool,
    pub consistent: bool,
}

/// Points within this distance of a Bayes decision boundary are not sign-checked.
pub const BOUNDARY_BAND: f64 = 1e-3;

/// Minimizes the conditional surrogate at `point` with `alpha` from the
/// calibration rule (using the exact `p_err`) and `beta = 2`, and compares
/// minimizer signs with the Bayes rules.
pub fn check_point<T: Scalar>(point: &ConditionalPoint<T>, calib: &CalibrationSpec<T>) -> GridRow<T> {
    let alpha = select_alpha(point.p_err, &point.costs, calib);
    let beta = calib.beta();
    let (e_min, r_min) = brute_min_conditional(point, alpha, beta);
    let e_bayes = bayes_expert(point.eta);
    let r_bayes = bayes_rejector(point.eta, point.p_err, &point.costs);
    let band = T::lit(BOUNDARY_BAND);
    let boundary = r_bayes.abs() < band || (point.eta - T::lit(0.5)).abs() < band;
    let e_ok = (e_min > T::zero()) == (e_bayes == Label::Pos) && e_min != T::zero();
    let r_ok = if r_bayes > T::zero() {
        r_min > T::zero()
    } else {
        r_min <= T::zero()
    };
    GridRow {
        eta: point.eta,
        q: point.q,
        c1: point.costs.c1,
        ce: point.costs.ce,
        alpha,
        e_min,
        r_min,
        e_bayes_sign: e_bayes.as_i8(),
        r_bayes_value: r_bayes,
        boundary,
        consistent: e_ok && r_ok,
    }
}

/// Evaluates [`check_point`] over the Cartesian grid, in parallel, returning rows
/// in `(costs, eta, q)` order.
pub fn sign_consistency_grid<T: Scalar>(
    etas: &[T],
    qs: &[T],
    costs: &[CostSpec<T>],
    calib: &CalibrationSpec<T>,
) -> Result<Vec<GridRow<T>>> {
    let mut points = Vec::with_capacity(etas.len() * qs.len() * costs.len());
    for c in costs {
        for &eta in etas {
            for &q in qs {
                points.push(ConditionalPoint::new(eta, q, *c)?);
            }
        }
    }
    Ok(points.par_iter().map(|p| check_point(p, calib)).collect())
}

/// Rows that break sign consistency outside the boundary band.
pub fn violations<T: Scalar>(rows: &[GridRow<T>]) -> Vec<GridRow<T>> {
    rows.iter().filter(|r| !r.boundary && !r.consistent).copied().collect()
}

/// `{step, 2 step, ..., 1 - step}` or, with `include_ends`, `{0, step, ..., 1}`.
pub fn unit_grid<T: Scalar>(divisions: usize, include_ends: bool) -> Vec<T> {
    let range: Box<dyn Iterator<Item = usize>> = if include_ends {
        Box::new(0..=divisions)
    } else {
        Box::new(1..divisions)
    };
    range.map(|i| T::lit(i as f64 / divisions as f64)).collect()
}

/// Writes grid rows as CSV.
pub fn write_grid_csv<T: Scalar>(rows: &[GridRow<T>], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "eta,q,c1,ce,alpha,e_min,r_min,e_bayes_sign,r_bayes_value,consistent_flag,boundary"
    )
    .map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.eta,
            r.q,
            r.c1,
            r.ce,
            r.alpha,
            r.e_min,
            r.r_min,
            r.e_bayes_sign,
            r.r_bayes_value,
            u8::from(r.consistent),
            u8::from(r.boundary)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
