//! Momentum sign-gradient attacks in an ℓ∞ ball, with input diversity,
//! translation-invariant smoothing and Admix augmentation.
//!
//! Budgets and step sizes in [`LinfAttackConfig`] are in 1/255 pixel units;
//! the lower-level functions take pixel units directly.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{apply_diversity, check_unit_interval, draw_diversity, gaussian_kernel, momentum_update, smooth};
use crate::diffmath::Graph;
use crate::zoo::{ensemble_logits_node, Classifier};
use crate::{math, rng, AttackRecord, DenseArray, Error, Metric, Result};

/// Admix strength: `m1` down-scaled copies of `x + η·x″` for each of `m2`
/// images `x″` from other classes.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdmixConfig {
    pub m1: usize,
    pub m2: usize,
    pub eta: f64,
}

impl Default for AdmixConfig {
    fn default() -> Self {
        Self { m1: 3, m2: 2, eta: 0.2 }
    }
}

/// Images Admix may mix in.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmixPool {
    pub images: DenseArray,
    pub labels: Vec<usize>,
}

impl AdmixPool {
    pub fn new(images: DenseArray, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "admix pool of shape {:?} with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LinfAttackConfig {
    /// Ball radius in 1/255 units.
    pub epsilon: f64,
    pub iterations: usize,
    /// Momentum decay.
    pub gamma: f64,
    pub diversity_prob: f64,
    pub diversity_jitter: f64,
    pub ti_kernel_size: usize,
    pub ti_sigma: f64,
    pub admix: Option<AdmixConfig>,
    /// Step size in 1/255 units; `1.25·ε/T` when unset.
    pub step: Option<f64>,
    pub seed: u64,
}

impl Default for LinfAttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 20.0,
            iterations: 10,
            gamma: 1.0,
            diversity_prob: 0.7,
            diversity_jitter: 0.1,
            ti_kernel_size: 5,
            ti_sigma: 1.5,
            admix: None,
            step: None,
            seed: 0,
        }
    }
}

impl LinfAttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("linf attack: {msg}")));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be ≥ 1");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.diversity_prob) {
            return bad("diversity probability outside [0, 1]");
        }
        if !(self.diversity_jitter >= 0.0) {
            return bad("diversity jitter must be ≥ 0");
        }
        if self.ti_kernel_size.is_multiple_of(2) || !(self.ti_sigma > 0.0) {
            return bad("TI kernel needs odd size and positive sigma");
        }
        if let Some(a) = self.admix {
            if a.m1 == 0 || a.m2 == 0 || !(a.eta >= 0.0) {
                return bad("admix needs m1, m2 ≥ 1 and eta ≥ 0");
            }
        }
        if self.step.is_some_and(|s| !(s > 0.0)) {
            return bad("step must be positive");
        }
        Ok(())
    }

    /// Step in 1/255 units.
    pub fn step_size(&self) -> f64 {
        self.step.unwrap_or(1.25 * self.epsilon / self.iterations as f64)
    }
}

/// Iterate and momentum of a running attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackState {
    pub x: DenseArray,
    pub momentum: DenseArray,
    pub iteration: usize,
}

impl AttackState {
    /// Starts at `x` with zero momentum.
    pub fn new(x: DenseArray) -> Self {
        let momentum = DenseArray::zeros(x.shape());
        Self { x, momentum, iteration: 0 }
    }
}

/// `255 · ‖a − b‖∞`.
pub fn linf_distance(a: &DenseArray, b: &DenseArray) -> f64 {
    255.0 * a.max_abs_diff(b)
}

/// Clips `x` into `B(x0, eps) ∩ [0, 1]` (pixel units).
pub fn project(x: &DenseArray, x0: &DenseArray, eps: f64) -> DenseArray {
    let data = x
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&v, &c)| v.clamp(c - eps, c + eps).clamp(0.0, 1.0))
        .collect();
    DenseArray::from_parts(x.shape().to_vec(), data)
}

/// Cross-entropy gradient of the ensemble at the diversity-transformed
/// input, smoothed by the TI kernel and optionally averaged over Admix copies.
pub fn smoothed_input_gradient(
    models: &[&Classifier],
    x_t: &DenseArray,
    y: usize,
    cfg: &LinfAttackConfig,
    admix_pool: Option<&AdmixPool>,
    rng: &mut impl Rng,
) -> Result<DenseArray> {
    let kernel = gaussian_kernel(cfg.ti_kernel_size, cfg.ti_sigma)?;
    let size = x_t.shape()[2];
    let raw = match cfg.admix {
        None => {
            let draw = draw_diversity(size, cfg.diversity_prob, cfg.diversity_jitter, rng)?;
            let mut g = Graph::new();
            let xi = g.leaf(x_t.clone());
            let xd = apply_diversity(&mut g, xi, &draw)?;
            let z = ensemble_logits_node(&mut g, models, xd)?;
            let loss = g.softmax_cross_entropy(z, &[y])?;
            g.gradient(loss, &[xi])?.remove(0)
        }
        Some(a) => {
            let pool = admix_pool.ok_or_else(|| Error::InvalidArgument("admix configured without an image pool".into()))?;
            let others: Vec<usize> = (0..pool.labels.len()).filter(|&i| pool.labels[i] != y).collect();
            if others.is_empty() {
                return Err(Error::InvalidArgument(format!("admix pool has no images outside class {y}")));
            }
            let mut acc = DenseArray::zeros(x_t.shape());
            let mut other = None;
            for _ in 0..a.m2 {
                for i in 0..a.m1 {
                    let draw = draw_diversity(size, cfg.diversity_prob, cfg.diversity_jitter, rng)?;
                    if i == 0 {
                        other = Some(pool.images.slice_first(others[rng.random_range(0..others.len())]));
                    }
                    let mut g = Graph::new();
                    let xi = g.leaf(x_t.clone());
                    let xo = g.leaf(other.clone().expect("drawn above"));
                    let xo = g.scale(xo, a.eta)?;
                    let mixed = g.add(xi, xo)?;
                    let mixed = g.scale(mixed, 1.0 / (1u64 << i) as f64)?;
                    let xd = apply_diversity(&mut g, mixed, &draw)?;
                    let z = ensemble_logits_node(&mut g, models, xd)?;
                    let loss = g.softmax_cross_entropy(z, &[y])?;
                    let grad = g.gradient(loss, &[xi])?.remove(0);
                    acc = acc.zip_map(&grad, |s, v| s + v)?;
                }
            }
            let count = (a.m1 * a.m2) as f64;
            acc.map(|v| v * (1.0 / count))
        }
    };
    smooth(&raw, &kernel)
}

/// One momentum sign step, projected onto `B(x0, eps) ∩ [0, 1]`. Pixel units.
pub fn dtmi_step(state: &AttackState, grad: &DenseArray, alpha: f64, gamma: f64, x0: &DenseArray, eps: f64) -> AttackState {
    let m = momentum_update(state.momentum.data(), grad.data(), gamma);
    let stepped = state
        .x
        .data()
        .iter()
        .zip(&m)
        .map(|(&v, &mv)| v + alpha * math::sign(mv))
        .collect();
    let stepped = DenseArray::from_parts(state.x.shape().to_vec(), stepped);
    AttackState {
        x: project(&stepped, x0, eps),
        momentum: DenseArray::from_parts(state.x.shape().to_vec(), m),
        iteration: state.iteration + 1,
    }
}

/// Runs `iterations` steps from `state`. Pixel units.
#[allow(clippy::too_many_arguments)]
pub fn run_linf_iterations(
    mut state: AttackState,
    x0: &DenseArray,
    y: usize,
    models: &[&Classifier],
    cfg: &LinfAttackConfig,
    eps: f64,
    alpha: f64,
    iterations: usize,
    admix_pool: Option<&AdmixPool>,
    rng: &mut impl Rng,
) -> Result<AttackState> {
    for _ in 0..iterations {
        let grad = smoothed_input_gradient(models, &state.x, y, cfg, admix_pool, rng)?;
        state = dtmi_step(&state, &grad, alpha, cfg.gamma, x0, eps);
    }
    Ok(state)
}

/// Per-model predicted labels at `x`.
pub fn predictions(models: &[&Classifier], x: &DenseArray) -> Result<Vec<usize>> {
    models.iter().map(|m| Ok(m.predict(x)?[0])).collect()
}

/// Fixed-budget attack on one `[1, 3, S, S]` input.
///
/// Starts from `warm_start` (clipped into the ball) or `x`, with zero
/// momentum, and draws randomness from the stream `(cfg.seed, index)`.
pub fn run_fixed_linf_attack(
    x: &DenseArray,
    y: usize,
    models: &[&Classifier],
    cfg: &LinfAttackConfig,
    warm_start: Option<&DenseArray>,
    admix_pool: Option<&AdmixPool>,
    index: usize,
) -> Result<AttackRecord> {
    cfg.validate()?;
    check_unit_interval(x, "input")?;
    let eps = cfg.epsilon / 255.0;
    let start = project(warm_start.unwrap_or(x), x, eps);
    let mut r = rng::stream(cfg.seed, index as u64);
    let state = run_linf_iterations(
        AttackState::new(start),
        x,
        y,
        models,
        cfg,
        eps,
        cfg.step_size() / 255.0,
        cfg.iterations,
        admix_pool,
        &mut r,
    )?;
    Ok(AttackRecord {
        index,
        label: y,
        distance: linf_distance(&state.x, x),
        predictions: predictions(models, &state.x)?,
        adversarial: state.x,
        metric: Metric::Linf,
        budget: cfg.epsilon,
        stop_index: 0,
        validation_confidence: None,
        style: None,
    })
}
