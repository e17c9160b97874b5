//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::Parameter;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Entries sampled per parameter tensor (all entries if the tensor is smaller).
    pub entries_per_param: usize,
    /// Denominator floor of the relative error, so near-zero gradients compare absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            entries_per_param: 16,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares backward-pass gradients of `forward` against central differences
/// on a random subset of trainable parameter entries.
///
/// `forward` must build the scalar loss on the tape it is given and be
/// deterministic in the parameter values.
pub fn grad_check<F>(params: &mut [Parameter], mut forward: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Parameter]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        tolerance: opts.tolerance,
        failures: Vec::new(),
    };
    let mut eval = |params: &[Parameter]| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = forward(&mut tape, params)?;
        tape.value(loss).item()
    };
    for pi in 0..params.len() {
        if !params[pi].trainable {
            continue;
        }
        let n = params[pi].numel();
        let picks: Vec<usize> = if n <= opts.entries_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.entries_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let name = params[pi].name.clone();
        for idx in picks {
            let analytic = grads.param(&name).map_or(0.0, |g| g.data()[idx]);
            let orig = params[pi].tensor.data()[idx];
            params[pi].tensor.data_mut()[idx] = orig + opts.step;
            let plus = eval(params)?;
            params[pi].tensor.data_mut()[idx] = orig - opts.step;
            let minus = eval(params)?;
            params[pi].tensor.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel = relative_error(analytic, numeric, opts.abs_floor);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > opts.tolerance {
                report.failures.push(GradMismatch {
                    param: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_model_has_zero_error() {
        let mut params = vec![Parameter::new("w", Tensor::zeros(&[3]))];
        let report = grad_check(
            &mut params,
            |tape, ps| {
                let w = tape.param(&ps[0]);
                tape.sum(w)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // with_value hides x² behind a different forward value, so analytic and
        // numeric disagree.
        let mut params = vec![Parameter::new("w", Tensor::scalar(1.5))];
        let report = grad_check(
            &mut params,
            |tape, ps| {
                let w = tape.param(&ps[0]);
                let sq = tape.square(w)?;
                let v = tape.value(w).data()[0];
                tape.with_value(sq, Tensor::scalar(v * v * v))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures[0].param, "w");
    }
}
