//! Per-input attack outcomes.

use alloc::vec::Vec;

use crate::attacks::fsa::StyleParams;
use crate::DenseArray;

/// Distance metric an attack is budgeted in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Metric {
    /// `255 · ‖x' − x‖∞`, i.e. ℓ∞ in 1/255 pixel units.
    Linf,
    /// `max(e^{‖τ^μ‖∞}, e^{‖τ^σ‖∞})` of the style perturbation.
    Unrestricted,
}

impl Metric {
    pub fn tag(self) -> &'static str {
        match self {
            Metric::Linf => "linf",
            Metric::Unrestricted => "unrestricted",
        }
    }
}

/// One input's attack outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub index: usize,
    pub label: usize,
    pub adversarial: DenseArray,
    pub metric: Metric,
    /// Measured `D(x, x')`.
    pub distance: f64,
    /// Budget the returned example was produced under.
    pub budget: f64,
    /// 1-based sub-procedure the search stopped at; 0 for fixed-budget runs
    /// and for budget searches that never stopped early.
    pub stop_index: usize,
    /// Validation-ensemble true-class probability at the returned example.
    pub validation_confidence: Option<f64>,
    /// Predicted label of each attacked (source) model at `x'`.
    pub predictions: Vec<usize>,
    /// Final style parameters, for feature-space attacks.
    pub style: Option<StyleParams>,
}
