//! Client pre-training and the joint rejector/expert training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledSample};
use crate::evaluation::evaluate;
use crate::losses::{
    estimate_px_from_score, is_correct, select_alpha, surrogate_loss, surrogate_partials, CalibrationSpec, CostSpec,
};
use crate::models::{Architecture, FixedClient, Scorer, SgdConfig};
use crate::rng::{rng_for, stream};
use crate::scalar::{clamped_exp, clamped_exp_deriv, Scalar};
use crate::{Error, Result};

/// The three decision functions: frozen client `m`, rejector `r`, expert `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct HelpSystem<T> {
    pub client: FixedClient<T>,
    pub rejector: Scorer<T>,
    pub expert: Scorer<T>,
    pub costs: CostSpec<T>,
}

impl<T: Scalar> HelpSystem<T> {
    pub fn new(client: FixedClient<T>, rejector: Scorer<T>, expert: Scorer<T>, costs: CostSpec<T>) -> Result<Self> {
        let k = client.scorer().input_dim();
        if rejector.input_dim() != k || expert.input_dim() != k {
            return Err(Error::contract(format!(
                "input dimensions differ: client {k}, rejector {}, expert {}",
                rejector.input_dim(),
                expert.input_dim()
            )));
        }
        costs.validate()?;
        Ok(Self {
            client,
            rejector,
            expert,
            costs,
        })
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EpochLog<T> {
    pub epoch: usize,
    /// Mean surrogate over the epoch, each sample scored before its own update.
    pub mean_surrogate: T,
    /// Generalized risk on the full training set with end-of-epoch parameters.
    pub train_risk: T,
    pub coverage: T,
}

fn check_input<T: Scalar>(ds: &Dataset<T>, scorer: &Scorer<T>, what: &str) -> Result<()> {
    if scorer.input_dim() != ds.dim() {
        return Err(Error::contract(format!(
            "{what} expects dimension {}, dataset has {}",
            scorer.input_dim(),
            ds.dim()
        )));
    }
    Ok(())
}

/// Visits the dataset in reshuffled mini-batches for `cfg.epochs` epochs.
fn for_each_batch<T: Scalar, F>(ds: &Dataset<T>, cfg: &SgdConfig<T>, mut step: F) -> Result<()>
where
    F: FnMut(usize, &[&LabeledSample<T>]) -> Result<()>,
{
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, stream::SHUFFLE);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledSample<T>> = chunk.iter().map(|&i| &ds.samples()[i]).collect();
            step(epoch, &batch)?;
        }
    }
    Ok(())
}

/// Trains `scorer` on the exponential margin loss `exp(-y s)` (exponent clamped).
fn train_margin<T: Scalar>(ds: &Dataset<T>, mut scorer: Scorer<T>, cfg: &SgdConfig<T>) -> Result<Scorer<T>> {
    check_input(ds, &scorer, "scorer")?;
    let inv_batch = |b: usize| T::one() / T::lit(b as f64);
    for_each_batch(ds, cfg, |_, batch| {
        let mut grad = vec![T::zero(); scorer.param_count()];
        for s in batch {
            let (score, tape) = scorer.forward(&s.x)?;
            let y = s.y.sign::<T>();
            let upstream = -y * clamped_exp_deriv(-y * score);
            accumulate(&mut grad, &scorer.backward(&tape, upstream)?);
        }
        scale(&mut grad, inv_batch(batch.len()));
        scorer.sgd_step(&grad, cfg.learning_rate)
    })?;
    Ok(scorer)
}

fn accumulate<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a = *a + v;
    }
}

fn scale<T: Scalar>(v: &mut [T], s: T) {
    if s != T::one() {
        for a in v.iter_mut() {
            *a = *a * s;
        }
    }
}

/// Mean exponential margin loss of a scorer over a dataset.
pub fn margin_loss<T: Scalar>(ds: &Dataset<T>, scorer: &Scorer<T>) -> Result<T> {
    let mut total = T::zero();
    for s in ds {
        total = total + clamped_exp(-s.y.sign::<T>() * scorer.score(&s.x)?);
    }
    Ok(total / T::lit(ds.len() as f64))
}

/// Pre-trains the client with `cfg.seed` driving both initialization and
/// shuffling, then freezes it.
pub fn train_client<T: Scalar>(ds: &Dataset<T>, arch: &Architecture, cfg: &SgdConfig<T>) -> Result<FixedClient<T>> {
    cfg.validate()?;
    let init = Scorer::init(arch.clone(), cfg.seed)?;
    Ok(FixedClient::freeze(train_margin(ds, init, cfg)?))
}

/// Trains an expert on its own over all samples (the separately-trained arm).
pub fn train_expert_alone<T: Scalar>(ds: &Dataset<T>, arch: &Architecture, cfg: &SgdConfig<T>) -> Result<Scorer<T>> {
    cfg.validate()?;
    let init = Scorer::init(arch.clone(), cfg.seed)?;
    train_margin(ds, init, cfg)
}

/// Which scorers the surrogate loop updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trainable {
    RejectorAndExpert,
    RejectorOnly,
}

fn surrogate_loop<T: Scalar>(
    ds: &Dataset<T>,
    mut system: HelpSystem<T>,
    calib: &CalibrationSpec<T>,
    cfg: &SgdConfig<T>,
    trainable: Trainable,
) -> Result<(HelpSystem<T>, Vec<EpochLog<T>>)> {
    check_input(ds, system.client.scorer(), "client")?;
    calib.validate()?;
    system.costs.validate()?;
    let costs = system.costs;
    let beta = calib.beta();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut epoch_loss = T::zero();
    let mut current_epoch = 0;

    let close_epoch = |epoch: usize, loss_sum: T, system: &HelpSystem<T>, log: &mut Vec<EpochLog<T>>| -> Result<()> {
        let report = evaluate(system, ds)?;
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_surrogate: loss_sum / T::lit(ds.len() as f64),
            train_risk: report.generalized_risk,
            coverage: report.coverage,
        });
        Ok(())
    };

    {
        let system = &mut system;
        let log = &mut log;
        for_each_batch(ds, cfg, |epoch, batch| {
            if epoch != current_epoch {
                close_epoch(current_epoch, epoch_loss, system, log)?;
                current_epoch = epoch;
                epoch_loss = T::zero();
            }
            let mut grad_r = vec![T::zero(); system.rejector.param_count()];
            let mut grad_e = vec![T::zero(); system.expert.param_count()];
            for s in batch {
                let m_score = system.client.score(&s.x)?;
                let m_wrong = !is_correct(m_score, s.y);
                let p_hat = estimate_px_from_score(m_score, s.y);
                let alpha = select_alpha(p_hat, &costs, calib);
                let (r_score, r_tape) = system.rejector.forward(&s.x)?;
                let (e_score, e_tape) = system.expert.forward(&s.x)?;
                epoch_loss = epoch_loss + surrogate_loss(m_wrong, e_score, r_score, s.y, &costs, alpha, beta);
                let (d_e, d_r) = surrogate_partials(m_wrong, e_score, r_score, s.y, &costs, alpha, beta);
                accumulate(&mut grad_r, &system.rejector.backward(&r_tape, d_r)?);
                if trainable == Trainable::RejectorAndExpert {
                    accumulate(&mut grad_e, &system.expert.backward(&e_tape, d_e)?);
                }
            }
            let inv = T::one() / T::lit(batch.len() as f64);
            scale(&mut grad_r, inv);
            system.rejector.sgd_step(&grad_r, cfg.learning_rate)?;
            if trainable == Trainable::RejectorAndExpert {
                scale(&mut grad_e, inv);
                system.expert.sgd_step(&grad_e, cfg.learning_rate)?;
            }
            Ok(())
        })?;
    }
    close_epoch(current_epoch, epoch_loss, &system, &mut log)?;
    Ok((system, log))
}

/// Jointly trains rejector and expert against a frozen client with the
/// calibrated surrogate. For each sample: estimate the client error probability
/// from its score and the label, pick the calibration exponent, take the
/// surrogate gradient through both scorers, and step.
pub fn train_help<T: Scalar>(
    ds: &Dataset<T>,
    client: &FixedClient<T>,
    rejector: Scorer<T>,
    expert: Scorer<T>,
    costs: &CostSpec<T>,
    calib: &CalibrationSpec<T>,
    cfg: &SgdConfig<T>,
) -> Result<(HelpSystem<T>, Vec<EpochLog<T>>)> {
    let system = HelpSystem::new(client.clone(), rejector, expert, *costs)?;
    surrogate_loop(ds, system, calib, cfg, Trainable::RejectorAndExpert)
}

/// Same loop as [`train_help`] with the expert held fixed.
pub fn train_rejector_only<T: Scalar>(
    ds: &Dataset<T>,
    client: &FixedClient<T>,
    expert: &Scorer<T>,
    rejector: Scorer<T>,
    costs: &CostSpec<T>,
    calib: &CalibrationSpec<T>,
    cfg: &SgdConfig<T>,
) -> Result<(HelpSystem<T>, Vec<EpochLog<T>>)> {
    let system = HelpSystem::new(client.clone(), rejector, expert.clone(), *costs)?;
    surrogate_loop(ds, system, calib, cfg, Trainable::RejectorOnly)
}
