//! Diversity objectives for the generator and logit-matching losses for the clone.
//!
//! Each loss has a plain evaluation on tensors (used for metrics and tests)
//! and a taped version used for training. Both go through the same
//! definitions below.

use serde::{Deserialize, Serialize};
use steallab_autodiff::{Tape, Tensor, Var, LOG_CLAMP};

use crate::error::{Error, Result};
use crate::oracle::{check_distribution_rows, softmax_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityVariant {
    /// Negative entropy of the batch-mean posterior.
    #[default]
    Batch,
    /// Mean over samples of each posterior's negative entropy.
    Sample,
    /// Negative entropy of the argmax-label histogram.
    Label,
}

/// How the label-level loss is differentiated; the forward value is the
/// hard-label quantity either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelGradient {
    /// Hard label frequencies forward, identity onto the soft batch means backward.
    #[default]
    StraightThrough,
    /// Gradient of the batch-level loss, value replaced by the hard-label loss.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloneLoss {
    #[default]
    L1,
    L2,
    Kl,
}

/// `Σ a ln a` with `a` clamped before the logarithm, so empty classes add zero.
pub fn neg_entropy(dist: &[f64]) -> f64 {
    dist.iter().map(|&a| a * a.max(LOG_CLAMP).ln()).sum()
}

fn column_mean(p: &Tensor) -> Vec<f64> {
    let (n, k) = (p.shape()[0], p.shape()[1]);
    let mut mean = vec![0.0; k];
    for row in p.data().chunks(k) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Class frequencies of the row-wise argmax (lowest index on ties).
pub fn label_frequencies(p: &Tensor) -> Vec<f64> {
    let (n, k) = (p.shape()[0], p.shape()[1]);
    let mut freq = vec![0.0; k];
    for label in p.argmax_rows() {
        freq[label] += 1.0;
    }
    freq.iter_mut().for_each(|f| *f /= n as f64);
    freq
}

pub fn diversity_batch(probs: &Tensor) -> Result<f64> {
    check_distribution_rows(probs)?;
    Ok(neg_entropy(&column_mean(probs)))
}

pub fn diversity_sample(probs: &Tensor) -> Result<f64> {
    check_distribution_rows(probs)?;
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    Ok(probs.data().chunks(k).map(neg_entropy).sum::<f64>() / n as f64)
}

pub fn diversity_label(probs: &Tensor) -> Result<f64> {
    check_distribution_rows(probs)?;
    Ok(neg_entropy(&label_frequencies(probs)))
}

pub fn diversity_value(variant: DiversityVariant, probs: &Tensor) -> Result<f64> {
    match variant {
        DiversityVariant::Batch => diversity_batch(probs),
        DiversityVariant::Sample => diversity_sample(probs),
        DiversityVariant::Label => diversity_label(probs),
    }
}

fn taped_neg_entropy(tape: &mut Tape, dist: Var) -> Result<Var> {
    let logd = tape.log(dist)?;
    let terms = tape.mul(dist, logd)?;
    Ok(tape.sum(terms)?)
}

/// Taped diversity loss of clone posteriors `probs` (N, K).
pub fn diversity_loss(tape: &mut Tape, probs: Var, variant: DiversityVariant, label_grad: LabelGradient) -> Result<Var> {
    check_distribution_rows(tape.value(probs))?;
    match variant {
        DiversityVariant::Batch => {
            let alpha = tape.mean_rows(probs)?;
            taped_neg_entropy(tape, alpha)
        }
        DiversityVariant::Sample => {
            let n = tape.value(probs).shape()[0];
            let total = taped_neg_entropy(tape, probs)?;
            Ok(tape.scale(total, 1.0 / n as f64)?)
        }
        DiversityVariant::Label => {
            let hard = label_frequencies(tape.value(probs));
            let alpha = tape.mean_rows(probs)?;
            match label_grad {
                LabelGradient::StraightThrough => {
                    let st = tape.with_value(alpha, Tensor::from_vec(hard))?;
                    taped_neg_entropy(tape, st)
                }
                LabelGradient::Soft => {
                    let soft = taped_neg_entropy(tape, alpha)?;
                    Ok(tape.with_value(soft, Tensor::scalar(neg_entropy(&hard)))?)
                }
            }
        }
    }
}

fn check_pair(victim: &Tensor, clone: &Tensor) -> Result<()> {
    if victim.shape() != clone.shape() || victim.ndim() != 2 {
        return Err(steallab_autodiff::AutodiffError::Shape {
            op: "clone_loss",
            detail: format!("victim {:?} vs clone {:?}", victim.shape(), clone.shape()),
        }
        .into());
    }
    Ok(())
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// `(1/N) Σ_j Σ_k p ln p` for the softmax of each victim row.
fn victim_neg_entropy(victim: &Tensor) -> f64 {
    let (n, k) = (victim.shape()[0], victim.shape()[1]);
    let total: f64 = victim
        .data()
        .chunks(k)
        .map(|row| {
            log_softmax_row(row)
                .iter()
                .map(|&lp| if lp.exp() > 0.0 { lp.exp() * lp } else { 0.0 })
                .sum::<f64>()
        })
        .sum();
    total / n as f64
}

/// Plain evaluation of the clone loss on victim pseudo-logits and clone logits.
pub fn clone_loss_value(variant: CloneLoss, victim: &Tensor, clone: &Tensor) -> Result<f64> {
    check_pair(victim, clone)?;
    let (n, k) = (victim.shape()[0], victim.shape()[1]);
    let per_row: f64 = match variant {
        CloneLoss::L1 => victim.data().iter().zip(clone.data()).map(|(v, c)| (v - c).abs()).sum(),
        CloneLoss::L2 => victim.data().iter().zip(clone.data()).map(|(v, c)| (v - c).powi(2)).sum(),
        CloneLoss::Kl => victim
            .data()
            .chunks(k)
            .zip(clone.data().chunks(k))
            .map(|(vr, cr)| {
                let (lp, lq) = (log_softmax_row(vr), log_softmax_row(cr));
                lp.iter()
                    .zip(&lq)
                    .map(|(a, b)| if a.exp() > 0.0 { a.exp() * (a - b) } else { 0.0 })
                    .sum::<f64>()
            })
            .sum(),
    };
    Ok(per_row / n as f64)
}

/// Taped clone loss; `victim` pseudo-logits are constants.
pub fn clone_loss(tape: &mut Tape, variant: CloneLoss, victim: &Tensor, clone_logits: Var) -> Result<Var> {
    check_pair(victim, tape.value(clone_logits))?;
    let n = victim.shape()[0] as f64;
    match variant {
        CloneLoss::L1 | CloneLoss::L2 => {
            let v = tape.constant(victim.clone());
            let d = tape.sub(v, clone_logits)?;
            let e = if variant == CloneLoss::L1 {
                tape.abs(d)?
            } else {
                tape.square(d)?
            };
            let s = tape.sum(e)?;
            Ok(tape.scale(s, 1.0 / n)?)
        }
        CloneLoss::Kl => {
            let p = tape.constant(softmax_rows(victim));
            let lq = tape.log_softmax(clone_logits)?;
            let cross = tape.mul(p, lq)?;
            let s = tape.sum(cross)?;
            let s = tape.scale(s, -1.0 / n)?;
            Ok(tape.add_scalar(s, victim_neg_entropy(victim))?)
        }
    }
}

impl std::str::FromStr for DiversityVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "sample" => Ok(Self::Sample),
            "label" => Ok(Self::Label),
            _ => Err(Error::config("diversity", format!("unknown variant `{s}`"))),
        }
    }
}

impl std::str::FromStr for CloneLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "kl" => Ok(Self::Kl),
            _ => Err(Error::config("clone_loss", format!("unknown variant `{s}`"))),
        }
    }
}
