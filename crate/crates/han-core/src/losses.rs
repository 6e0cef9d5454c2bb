//! Objective terms: class-balanced pixel cross-entropy, per-branch adversarial
//! losses, their weighted totals, the branch weight schedules and the
//! single-branch scaling constant c.

use thiserror::Error;

use crate::model::BranchScores;
use crate::tensor::{Result as TensorResult, Tensor, TensorError};

/// Probabilities are clamped into [PROB_EPS, 1 - PROB_EPS] before every log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("lambda_w needs at least one target image")]
    EmptyTargets,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSchedule {
    Fixed,
    Decayed,
}

impl WeightSchedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(WeightSchedule::Fixed),
            "decayed" => Some(WeightSchedule::Decayed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightSchedule::Fixed => "fixed",
            WeightSchedule::Decayed => "decayed",
        }
    }
}

/// Branch weights for a given epoch. Fixed: (0.5, 0.5, 0.5, 1.0).
/// Decayed: the first three start at 1 and decay by 0.9 per epoch down to a
/// floor of 0.5; the last branch always carries weight 1.
pub fn branch_weight_schedule(mode: WeightSchedule, epoch: u64) -> [f64; 4] {
    match mode {
        WeightSchedule::Fixed => [0.5, 0.5, 0.5, 1.0],
        WeightSchedule::Decayed => {
            let w = 0.9f64.powi(epoch as i32).max(0.5);
            [w, w, w, 1.0]
        }
    }
}

/// Scaling constant for the single-branch ablation:
/// c = (lambda_1 + lambda_2 + lambda_3 + lambda_4) / lambda_4.
pub fn san_scale_c(lambda: [f64; 4]) -> f64 {
    (lambda[0] + lambda[1] + lambda[2] + lambda[3]) / lambda[3]
}

/// Class-balance weight over the full training-target set:
/// lambda_w = 1 - #(pixels >= 0.5) / max(1, #(pixels < 0.5)).
pub fn compute_lambda_w<'a, I>(targets: I) -> Result<f64, LossError>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut positive: u64 = 0;
    let mut negative: u64 = 0;
    let mut any = false;
    for t in targets {
        any = true;
        for &v in t.data().iter() {
            if v >= 0.5 {
                positive += 1;
            } else {
                negative += 1;
            }
        }
    }
    if !any {
        return Err(LossError::EmptyTargets);
    }
    Ok(1.0 - positive as f64 / (negative.max(1)) as f64)
}

/// Weighted per-pixel binary cross-entropy on T3 logits:
/// mean over pixels of -t * lambda_w * log(sigma) - (1 - t) * log(1 - sigma),
/// with sigma clamped away from 0 and 1.
pub fn pixel_loss(t3_logits: &Tensor, target: &Tensor, lambda_w: f64) -> TensorResult<Tensor> {
    if t3_logits.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch(
            t3_logits.shape().to_vec(),
            target.shape().to_vec(),
        ));
    }
    let p = t3_logits.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = p.log()?;
    let log_1mp = p.neg().add_scalar(1.0).log()?;
    let pos = target.mul_scalar(lambda_w).mul(&log_p)?;
    let neg = target.neg().add_scalar(1.0).mul(&log_1mp)?;
    Ok(pos.add(&neg)?.mean_all().neg())
}

fn clamped_log_mean(scores: &Tensor) -> TensorResult<Tensor> {
    Ok(scores.clamp(PROB_EPS, 1.0 - PROB_EPS)?.log()?.mean_all())
}

/// Both sides of every branch's adversarial game.
/// dis_i = -E[log D_i(real)] + E[log D_i(fake)] (sign as modelled; with
/// `classic_dis_loss` the fake term becomes -E[log(1 - D_i(fake))]).
/// gen_i = -E[log D_i(fake)].
pub fn branch_adversarial_losses(
    real: &BranchScores,
    fake: &BranchScores,
    classic_dis_loss: bool,
) -> TensorResult<([Tensor; 4], [Tensor; 4])> {
    let mut dis = Vec::with_capacity(4);
    let mut gen = Vec::with_capacity(4);
    for i in 0..4 {
        let real_term = clamped_log_mean(&real.0[i])?.neg();
        let fake_term = if classic_dis_loss {
            clamped_log_mean(&fake.0[i].neg().add_scalar(1.0))?.neg()
        } else {
            clamped_log_mean(&fake.0[i])?
        };
        dis.push(real_term.add(&fake_term)?);
        gen.push(clamped_log_mean(&fake.0[i])?.neg());
    }
    Ok((dis.try_into().unwrap(), gen.try_into().unwrap()))
}

/// Generator side only, for the phase that never sees real images.
pub fn generator_branch_losses(fake: &BranchScores) -> TensorResult<[Tensor; 4]> {
    let mut gen = Vec::with_capacity(4);
    for i in 0..4 {
        gen.push(clamped_log_mean(&fake.0[i])?.neg());
    }
    Ok(gen.try_into().unwrap())
}

/// Weighted sum of the four branch losses.
pub fn total_adversarial(losses: &[Tensor; 4], lambda: [f64; 4]) -> TensorResult<Tensor> {
    let mut total = losses[0].mul_scalar(lambda[0]);
    for i in 1..4 {
        total = total.add(&losses[i].mul_scalar(lambda[i]))?;
    }
    Ok(total)
}

/// lambda_p * pixel + lambda_a * total_adversarial.
pub fn total_loss(
    pixel: &Tensor,
    total_adv: &Tensor,
    lambda_p: f64,
    lambda_a: f64,
) -> TensorResult<Tensor> {
    pixel.mul_scalar(lambda_p).add(&total_adv.mul_scalar(lambda_a))
}
