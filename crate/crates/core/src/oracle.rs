//! Black-box access to a victim classifier.
//!
//! [`VictimOracle`] owns the victim and answers only with softmax posteriors.
//! Every answered sample is charged to a [`QueryLedger`]; a batch that does
//! not fit in the remaining budget is refused whole.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use steallab_autodiff::{softmax_row, Tensor, LOG_CLAMP};

use crate::error::{Error, Result};
use crate::models::{ClassifierModel, InputKind};

/// Tolerance on row sums when validating probability rows.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLedger {
    budget: u64,
    used: u64,
}

impl QueryLedger {
    pub fn new(budget: u64) -> Self {
        Self { budget, used: 0 }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn remaining(&self) -> u64 {
        self.budget - self.used
    }

    /// Charges `n` samples, or nothing at all if they do not fit.
    pub fn charge(&mut self, n: u64) -> Result<()> {
        if n > self.remaining() {
            return Err(Error::BudgetExceeded {
                requested: n,
                remaining: self.remaining(),
            });
        }
        self.used += n;
        Ok(())
    }
}

/// One line of the audit transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub batch_size: u64,
    pub remaining: u64,
}

#[derive(Debug)]
struct Session {
    ledger: QueryLedger,
    transcript: Vec<TranscriptEntry>,
}

#[derive(Debug)]
pub struct VictimOracle {
    victim: ClassifierModel,
    session: Mutex<Session>,
}

impl VictimOracle {
    pub fn new(victim: ClassifierModel, budget: u64) -> Self {
        Self {
            victim,
            session: Mutex::new(Session {
                ledger: QueryLedger::new(budget),
                transcript: Vec::new(),
            }),
        }
    }

    pub fn input_kind(&self) -> InputKind {
        self.victim.spec().input
    }

    pub fn num_classes(&self) -> usize {
        self.victim.num_classes()
    }

    pub fn ledger(&self) -> QueryLedger {
        self.session.lock().expect("ledger lock").ledger
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.session.lock().expect("ledger lock").transcript.clone()
    }

    /// Posteriors `(N, K)` for a batch of inputs, charging `N` queries.
    pub fn query(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.input_kind().check_batch(x)? as u64;
        {
            let mut s = self.session.lock().expect("ledger lock");
            s.ledger.charge(n)?;
            let remaining = s.ledger.remaining();
            s.transcript.push(TranscriptEntry { batch_size: n, remaining });
        }
        let logits = self.victim.classify(x)?;
        Ok(softmax_rows(&logits))
    }

    /// Victim argmax labels for the experimenter's evaluation sets. Not a
    /// query: nothing is charged or recorded.
    pub fn evaluator_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.victim.predict(x)
    }

    /// Writes the transcript as `batch_size,remaining` CSV lines.
    pub fn write_transcript(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("batch_size,remaining\n");
        for e in self.transcript() {
            text.push_str(&format!("{},{}\n", e.batch_size, e.remaining));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Replays a transcript against a starting budget; every step must subtract
/// exactly its batch size.
pub fn audit_transcript(budget: u64, entries: &[TranscriptEntry]) -> bool {
    let mut remaining = budget;
    entries.iter().all(|e| {
        let ok = e.batch_size <= remaining && remaining - e.batch_size == e.remaining;
        remaining = e.remaining;
        ok
    })
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().expect("non-empty");
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.data().chunks(k).zip(out.chunks_mut(k)) {
        softmax_row(row, dst);
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

/// Checks that a 2-D tensor holds non-negative rows summing to one.
pub fn check_distribution_rows(p: &Tensor) -> Result<()> {
    if p.ndim() != 2 {
        return Err(Error::MalformedDistribution {
            row: 0,
            reason: format!("expected (N, K), got {:?}", p.shape()),
        });
    }
    let k = p.shape()[1];
    for (i, row) in p.data().chunks(k).enumerate() {
        if let Some(v) = row.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::MalformedDistribution {
                row: i,
                reason: format!("entry {v} is negative or NaN"),
            });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::MalformedDistribution {
                row: i,
                reason: format!("sums to {s}"),
            });
        }
    }
    Ok(())
}

/// Pseudo-logits from posteriors: per row, `ln p − mean(ln p)` with `p` clamped at 1e-12.
pub fn approx_logits(posteriors: &Tensor) -> Result<Tensor> {
    check_distribution_rows(posteriors)?;
    let k = posteriors.shape()[1];
    let mut out = Vec::with_capacity(posteriors.len());
    for row in posteriors.data().chunks(k) {
        let logs: Vec<f64> = row.iter().map(|p| p.max(LOG_CLAMP).ln()).collect();
        let mean = logs.iter().sum::<f64>() / k as f64;
        out.extend(logs.iter().map(|l| l - mean));
    }
    Ok(Tensor::new(posteriors.shape(), out)?)
}
