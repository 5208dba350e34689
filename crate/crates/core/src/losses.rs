//! Generalized 0-1 loss, its calibrated exponential surrogate, per-sample
//! calibration-exponent selection, and the client error-probability estimates.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::models::FixedClient;
use crate::scalar::{clamped_exp, clamped_exp_deriv, logistic, Scalar};
use crate::{Error, Result};

/// Cost weights: `c1` scales an expert mistake, `ce` is charged on every deferral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct CostSpec<T> {
    pub c1: T,
    pub ce: T,
}

impl<T: Scalar> CostSpec<T> {
    pub fn new(c1: T, ce: T) -> Result<Self> {
        let c = Self { c1, ce };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > T::zero()) || !self.c1.is_finite() {
            return Err(Error::config("costs.c1", "must be positive and finite"));
        }
        if !(self.ce >= T::zero()) || !self.ce.is_finite() {
            return Err(Error::config("costs.ce", "must be nonnegative and finite"));
        }
        Ok(())
    }
}

/// Exponent hyperparameters for the three-case calibration rule. `beta` is always 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct CalibrationSpec<T> {
    pub alpha1: T,
    pub alpha2: T,
}

impl<T: Scalar> CalibrationSpec<T> {
    pub const BETA: f64 = 2.0;

    pub fn new(alpha1: T, alpha2: T) -> Result<Self> {
        let c = Self { alpha1, alpha2 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > T::zero() && self.alpha1 <= T::one()) {
            return Err(Error::config("calibration.alpha1", "must lie in (0, 1]"));
        }
        if !(self.alpha2 > T::one()) || !self.alpha2.is_finite() {
            return Err(Error::config("calibration.alpha2", "must be finite and greater than 1"));
        }
        Ok(())
    }

    pub fn beta(&self) -> T {
        T::lit(Self::BETA)
    }
}

/// Prediction of a score is correct only when `score * y > 0`; a zero score is
/// wrong for either label.
#[inline]
pub fn is_correct<T: Scalar>(score: T, y: Label) -> bool {
    score * y.sign::<T>() > T::zero()
}

/// Generalized 0-1 loss. `r > 0` keeps the sample local; `r <= 0` defers it.
///
/// Takes exactly the values `0`, `1`, `ce` and `c1 + ce`.
pub fn generalized_loss<T: Scalar>(m_score: T, e_score: T, r_score: T, y: Label, costs: &CostSpec<T>) -> T {
    if r_score > T::zero() {
        if is_correct(m_score, y) {
            T::zero()
        } else {
            T::one()
        }
    } else if is_correct(e_score, y) {
        costs.ce
    } else {
        costs.c1 + costs.ce
    }
}

/// Exponential surrogate:
/// `c1 exp((beta/2)(-e y - r)) + ce exp(-r) + 1[m wrong] exp(alpha r)`,
/// with every exponent clamped to `[-30, 30]`.
pub fn surrogate_loss<T: Scalar>(
    m_wrong: bool,
    e_score: T,
    r_score: T,
    y: Label,
    costs: &CostSpec<T>,
    alpha: T,
    beta: T,
) -> T {
    let half_beta = beta * T::lit(0.5);
    let yv = y.sign::<T>();
    let mut loss = costs.c1 * clamped_exp(half_beta * (-e_score * yv - r_score)) + costs.ce * clamped_exp(-r_score);
    if m_wrong {
        loss = loss + clamped_exp(alpha * r_score);
    }
    loss
}

/// Exact partial derivatives `(dL/de, dL/dr)` of the clamped surrogate.
pub fn surrogate_partials<T: Scalar>(
    m_wrong: bool,
    e_score: T,
    r_score: T,
    y: Label,
    costs: &CostSpec<T>,
    alpha: T,
    beta: T,
) -> (T, T) {
    let half_beta = beta * T::lit(0.5);
    let yv = y.sign::<T>();
    let expert_term = costs.c1 * clamped_exp_deriv(half_beta * (-e_score * yv - r_score));
    let d_e = -expert_term * half_beta * yv;
    let mut d_r = -expert_term * half_beta - costs.ce * clamped_exp_deriv(-r_score);
    if m_wrong {
        d_r = d_r + alpha * clamped_exp_deriv(alpha * r_score);
    }
    (d_e, d_r)
}

/// Lower bound on the estimated error probability inside the middle-band formula.
pub const P_FLOOR: f64 = 1e-6;

/// `4 c1 P - 4 c1 ce - 4 P^2 + 8 ce P - 4 ce^2`, expanded as written in the
/// calibration rule.
pub fn alpha_discriminant<T: Scalar>(p: T, costs: &CostSpec<T>) -> T {
    let four = T::lit(4.0);
    let (c1, ce) = (costs.c1, costs.ce);
    four * c1 * p - four * c1 * ce - four * p * p + T::lit(8.0) * ce * p - four * ce * ce
}

/// Per-sample calibration exponent from the client error probability `p_hat`:
/// `alpha1` when `p_hat <= ce`, `alpha2` when `p_hat > ce + c1/2`, and the
/// unique consistent value `(ce + sqrt(disc)) / p_hat` in between.
pub fn select_alpha<T: Scalar>(p_hat: T, costs: &CostSpec<T>, calib: &CalibrationSpec<T>) -> T {
    if p_hat <= costs.ce {
        calib.alpha1
    } else if p_hat > costs.ce + costs.c1 * T::lit(0.5) {
        calib.alpha2
    } else {
        let p = p_hat.max(T::lit(P_FLOOR));
        let disc = alpha_discriminant(p, costs).max(T::zero());
        (costs.ce + disc.sqrt()) / p
    }
}

/// Estimate of `P(M != Y | X = x)` from the client score and the true label.
pub fn estimate_px_from_score<T: Scalar>(m_score: T, y: Label) -> T {
    match y {
        Label::Pos => T::one() - logistic(m_score),
        Label::Neg => logistic(m_score),
    }
}

pub fn estimate_px<T: Scalar>(client: &FixedClient<T>, x: &[T], y: Label) -> Result<T> {
    Ok(estimate_px_from_score(client.score(x)?, y))
}

/// `P(M != Y | X = x) = q + eta - 2 q eta` when `M` and `Y` are conditionally
/// independent given `x`.
pub fn client_error_prob<T: Scalar>(q: T, eta: T) -> T {
    q + eta - T::lit(2.0) * q * eta
}
