//! Transfer success rate, average perturbation reward and total score.

use alloc::vec::Vec;

use crate::zoo::Classifier;
use crate::{AttackRecord, Error, Result};

/// Reward for a successful example at distance `d`: `1 / d`.
pub fn reward(distance: f64) -> Result<f64> {
    if distance.is_nan() || distance <= 0.0 {
        return Err(Error::NonPositiveDistance(distance));
    }
    Ok(1.0 / distance)
}

/// One scored row.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoredRecord {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub distance: f64,
    pub budget: f64,
    pub stop_index: usize,
    /// `1/distance` for successes, 0 otherwise.
    pub reward: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoreReport {
    pub n: usize,
    /// Number of examples the test model misclassifies.
    pub n0: usize,
    pub transfer_rate: f64,
    /// Mean reward over successes; 0 when `n0 == 0` (see `s_apr_defined`).
    pub s_apr: f64,
    pub s_apr_defined: bool,
    pub s_total: f64,
    pub records: Vec<ScoredRecord>,
}

/// Scores already-decided outcomes.
///
/// `S_total` is the direct sum `(1/N) Σ 1{success}·reward`; the
/// factorisation `S_total = (N0/N)·S_APR` is checked before returning.
pub fn score_rows(rows: Vec<ScoredRecord>) -> Result<ScoreReport> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = rows.len();
    let mut n0 = 0;
    let mut total = 0.0;
    let mut scored = Vec::with_capacity(n);
    for mut r in rows {
        r.reward = if r.success {
            n0 += 1;
            reward(r.distance)?
        } else {
            0.0
        };
        total += r.reward;
        scored.push(r);
    }
    let transfer_rate = n0 as f64 / n as f64;
    let (s_apr, s_apr_defined) = if n0 > 0 { (total / n0 as f64, true) } else { (0.0, false) };
    let s_total = total / n as f64;
    let factored = transfer_rate * s_apr;
    if (factored - s_total).abs() > 1e-12 * s_total.abs().max(1.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "score factorisation broke: {factored} vs {s_total}"
        )));
    }
    Ok(ScoreReport {
        n,
        n0,
        transfer_rate,
        s_apr,
        s_apr_defined,
        s_total,
        records: scored,
    })
}

/// Scores attack records against the held-out test model.
pub fn score_batch(records: &[AttackRecord], test_model: &Classifier) -> Result<ScoreReport> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let predicted = test_model.predict(&r.adversarial)?[0];
        rows.push(ScoredRecord {
            index: r.index,
            label: r.label,
            predicted,
            distance: r.distance,
            budget: r.budget,
            stop_index: r.stop_index,
            reward: 0.0,
            success: predicted != r.label,
        });
    }
    score_rows(rows)
}
