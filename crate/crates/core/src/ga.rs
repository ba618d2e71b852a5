//! Budget search: run a fixed-budget attack over `K` growing budgets with
//! warm starts and stop once the validation ensemble's true-class
//! probability drops below `η`. Also the step-matched fixed-budget baseline.

use alloc::format;
use alloc::vec::Vec;

use crate::attacks::fsa::{self, FsaState, StyleParams};
use crate::attacks::linf::{self, AttackState};
use crate::attacks::{AdmixPool, FsaAttackConfig, LinfAttackConfig};
use crate::zoo::{ensemble_logits, AutoencoderPair, Classifier};
use crate::{math, rng, AttackRecord, DenseArray, Error, Metric, Result};

/// The fixed-budget attack run inside each sub-procedure.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "family", rename_all = "lowercase"))]
pub enum InnerAttack {
    Linf(LinfAttackConfig),
    Fsa(FsaAttackConfig),
}

impl InnerAttack {
    pub fn metric(&self) -> Metric {
        match self {
            InnerAttack::Linf(_) => Metric::Linf,
            InnerAttack::Fsa(_) => Metric::Unrestricted,
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            InnerAttack::Linf(c) => c.epsilon,
            InnerAttack::Fsa(c) => c.epsilon,
        }
    }

    pub fn iterations(&self) -> usize {
        match self {
            InnerAttack::Linf(c) => c.iterations,
            InnerAttack::Fsa(c) => c.iterations,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            InnerAttack::Linf(c) => c.seed,
            InnerAttack::Fsa(c) => c.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InnerAttack::Linf(c) => c.validate(),
            InnerAttack::Fsa(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaConfig {
    /// `K`.
    pub sub_procedures: usize,
    /// Early-stop threshold on the validation true-class probability.
    pub eta: f64,
    /// Carries `ε` (the largest budget), `T` per sub-procedure and the seed.
    pub inner: InnerAttack,
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sub_procedures == 0 {
            return Err(Error::InvalidArgument("K must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument(format!("eta {} outside [0, 1)", self.eta)));
        }
        self.inner.validate()
    }

    pub fn schedule(&self) -> Result<Vec<f64>> {
        budget_schedule(self.inner.epsilon(), self.sub_procedures, self.inner.metric())
    }
}

/// Extra inputs some inner attacks need.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttackResources<'a> {
    pub autoencoder: Option<&'a AutoencoderPair>,
    pub admix_pool: Option<&'a AdmixPool>,
}

impl<'a> AttackResources<'a> {
    fn autoencoder(&self) -> Result<&'a AutoencoderPair> {
        self.autoencoder
            .ok_or_else(|| Error::InvalidArgument("feature-space attack needs an autoencoder".into()))
    }
}

/// `kε/K` for ℓ∞ and `ε^{k/K}` for the unrestricted metric, `k = 1..K`.
pub fn budget_schedule(epsilon: f64, k: usize, metric: Metric) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be ≥ 1".into()));
    }
    match metric {
        Metric::Linf => {
            if !(epsilon > 0.0) {
                return Err(Error::InvalidArgument(format!("ℓ∞ budget {epsilon} must be positive")));
            }
            Ok((1..=k).map(|i| if i == k { epsilon } else { i as f64 * epsilon / k as f64 }).collect())
        }
        Metric::Unrestricted => {
            if !(epsilon >= 1.0) {
                return Err(Error::InvalidArgument(format!("unrestricted budget {epsilon} must be ≥ 1")));
            }
            Ok((1..=k)
                .map(|i| if i == k { epsilon } else { math::powf(epsilon, i as f64 / k as f64) })
                .collect())
        }
    }
}

/// Softmax probability of class `y` under the fused validation logits.
pub fn validation_confidence(h_models: &[&Classifier], x: &DenseArray, y: usize) -> Result<f64> {
    let z = ensemble_logits(h_models, x)?;
    let c = z.shape()[1];
    if y >= c {
        return Err(Error::InvalidArgument(format!("label {y} with {c} classes")));
    }
    Ok(math::softmax(&z.data()[..c])[y])
}

/// Outcome of one sub-procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct GaStep {
    /// 1-based sub-procedure index.
    pub k: usize,
    pub budget: f64,
    pub adversarial: DenseArray,
    pub distance: f64,
    pub confidence: f64,
    pub predictions: Vec<usize>,
    pub style: Option<StyleParams>,
}

/// Runs sub-procedures `1..=K`, stopping after the first whose validation
/// confidence is below `stop_below` (all `K` when `None`).
///
/// Momentum restarts at zero in each sub-procedure; the random stream
/// `(seed, index)` carries across them. Because no sub-procedure depends on
/// `η`, the run for any threshold is a prefix of the full trajectory.
#[allow(clippy::too_many_arguments)]
pub fn ga_trajectory(
    x: &DenseArray,
    y: usize,
    f_models: &[&Classifier],
    h_models: &[&Classifier],
    cfg: &GaConfig,
    resources: &AttackResources<'_>,
    index: usize,
    stop_below: Option<f64>,
) -> Result<Vec<GaStep>> {
    cfg.validate()?;
    if f_models.is_empty() || h_models.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let schedule = cfg.schedule()?;
    let t = cfg.inner.iterations();
    let mut r = rng::stream(cfg.inner.seed(), index as u64);
    let mut steps = Vec::with_capacity(schedule.len());
    match &cfg.inner {
        InnerAttack::Linf(lc) => {
            let mut current = x.clone();
            for (i, &budget) in schedule.iter().enumerate() {
                let eps = budget / 255.0;
                let start = AttackState::new(linf::project(&current, x, eps));
                let alpha = 1.25 * budget / t as f64 / 255.0;
                let state =
                    linf::run_linf_iterations(start, x, y, f_models, lc, eps, alpha, t, resources.admix_pool, &mut r)?;
                current = state.x;
                let confidence = validation_confidence(h_models, &current, y)?;
                steps.push(GaStep {
                    k: i + 1,
                    budget,
                    distance: linf::linf_distance(&current, x),
                    confidence,
                    predictions: linf::predictions(f_models, &current)?,
                    adversarial: current.clone(),
                    style: None,
                });
                if stop_below.is_some_and(|eta| confidence < eta) {
                    break;
                }
            }
        }
        InnerAttack::Fsa(fc) => {
            let ae = resources.autoencoder()?;
            crate::attacks::check_unit_interval(x, "input")?;
            let phi = ae.encode(x)?;
            let mut params = StyleParams::zeros(phi.shape()[1]);
            for (i, &budget) in schedule.iter().enumerate() {
                let bound = math::ln(budget);
                let start = FsaState::new(params.clipped(bound));
                let alpha = 1.25 * bound / t as f64;
                let state = fsa::run_fsa_iterations(start, &phi, y, f_models, ae, fc, bound, alpha, t, &mut r)?;
                params = state.params;
                let adversarial = fsa::render(&phi, &params, ae)?;
                let confidence = validation_confidence(h_models, &adversarial, y)?;
                steps.push(GaStep {
                    k: i + 1,
                    budget,
                    distance: fsa::unrestricted_distance(&params),
                    confidence,
                    predictions: linf::predictions(f_models, &adversarial)?,
                    adversarial,
                    style: Some(params.clone()),
                });
                if stop_below.is_some_and(|eta| confidence < eta) {
                    break;
                }
            }
        }
    }
    Ok(steps)
}

/// Picks the first step with confidence below `eta`, else the last one.
pub fn select_stop(steps: &[GaStep], eta: f64, index: usize, label: usize, metric: Metric) -> Result<AttackRecord> {
    let last = steps.last().ok_or(Error::EmptyBatch)?;
    let (chosen, stop_index) = match steps.iter().find(|s| s.confidence < eta) {
        Some(s) => (s, s.k),
        None => (last, 0),
    };
    Ok(AttackRecord {
        index,
        label,
        adversarial: chosen.adversarial.clone(),
        metric,
        distance: chosen.distance,
        budget: chosen.budget,
        stop_index,
        validation_confidence: Some(chosen.confidence),
        predictions: chosen.predictions.clone(),
        style: chosen.style.clone(),
    })
}

/// Budget search on one `[1, 3, S, S]` input.
///
/// `stop_index` is the sub-procedure the search stopped at, or 0 when no
/// sub-procedure met the threshold and the full-budget result is returned.
#[allow(clippy::too_many_arguments)]
pub fn ga_attack(
    x: &DenseArray,
    y: usize,
    f_models: &[&Classifier],
    h_models: &[&Classifier],
    cfg: &GaConfig,
    resources: &AttackResources<'_>,
    index: usize,
) -> Result<AttackRecord> {
    let steps = ga_trajectory(x, y, f_models, h_models, cfg, resources, index, Some(cfg.eta))?;
    select_stop(&steps, cfg.eta, index, y, cfg.inner.metric())
}

/// `T·(1 + K·ε_k/ε)/2` before rounding.
pub fn baseline_iterations_exact(t: usize, k: usize, epsilon_k: f64, epsilon: f64) -> f64 {
    t as f64 * (1.0 + k as f64 * epsilon_k / epsilon) / 2.0
}

/// Iterations of the fixed-budget baseline at `ε_k`, rounded to nearest.
pub fn baseline_iterations(t: usize, k: usize, epsilon_k: f64, epsilon: f64) -> usize {
    math::round(baseline_iterations_exact(t, k, epsilon_k, epsilon)) as usize
}

/// Total step length the budget search spends through sub-procedure `k`
/// (steps of `1.25·ε_j/T`, `T` per sub-procedure), in the linear budget unit.
pub fn cumulative_step_budget(schedule: &[f64], t: usize, k: usize) -> f64 {
    schedule[..k].iter().map(|e| t as f64 * (1.25 * e / t as f64)).sum()
}

/// One fixed-budget run at `ε_k` with the step-matched iteration count.
///
/// For the unrestricted metric budgets enter through `ln ε`, the quantity the
/// step size scales with.
pub fn run_fixed_baseline(
    x: &DenseArray,
    y: usize,
    f_models: &[&Classifier],
    epsilon_k: f64,
    cfg: &GaConfig,
    resources: &AttackResources<'_>,
    index: usize,
) -> Result<AttackRecord> {
    cfg.validate()?;
    let (t, k) = (cfg.inner.iterations(), cfg.sub_procedures);
    let eps = cfg.inner.epsilon();
    let mut record = match &cfg.inner {
        InnerAttack::Linf(lc) => {
            let mut run = lc.clone();
            run.epsilon = epsilon_k;
            run.iterations = baseline_iterations(t, k, epsilon_k, eps).max(1);
            run.step = Some(1.25 * epsilon_k / t as f64);
            linf::run_fixed_linf_attack(x, y, f_models, &run, None, resources.admix_pool, index)?
        }
        InnerAttack::Fsa(fc) => {
            let mut run = fc.clone();
            run.epsilon = epsilon_k;
            let ln_eps = math::ln(eps);
            let ratio_iters = if ln_eps > 0.0 {
                baseline_iterations(t, k, math::ln(epsilon_k), ln_eps)
            } else {
                t
            };
            run.iterations = ratio_iters.max(1);
            run.step = Some(1.25 * math::ln(epsilon_k) / t as f64).filter(|s| *s > 0.0);
            fsa::run_dmi_fsa(x, y, f_models, resources.autoencoder()?, &run, None, index)?
        }
    };
    record.budget = epsilon_k;
    Ok(record)
}
