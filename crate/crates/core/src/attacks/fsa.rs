//! Feature-space attack: perturb the per-channel mean and spread of the
//! autoencoder latent, decode, and descend a top-5 margin plus content loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::linf::predictions;
use super::{apply_diversity, check_unit_interval, draw_diversity, momentum_update, DiversityDraw};
use crate::diffmath::{kernels, Graph, NodeId};
use crate::zoo::{ensemble_logits_node, AutoencoderPair, Classifier};
use crate::{math, rng, AttackRecord, DenseArray, Error, Metric, Result};

/// Rank used by the margin loss.
pub const MARGIN_RANK: usize = 5;

/// Log-scale shifts of the latent channel means and spreads.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StyleParams {
    pub tau_mu: Vec<f64>,
    pub tau_sigma: Vec<f64>,
}

impl StyleParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            tau_mu: vec![0.0; channels],
            tau_sigma: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.tau_mu.len()
    }

    /// `max(‖τ^μ‖∞, ‖τ^σ‖∞)`.
    pub fn max_abs(&self) -> f64 {
        self.tau_mu
            .iter()
            .chain(&self.tau_sigma)
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Clips every entry into `[−bound, bound]`.
    pub fn clipped(&self, bound: f64) -> Self {
        let c = |v: &Vec<f64>| v.iter().map(|x| x.clamp(-bound, bound)).collect();
        Self {
            tau_mu: c(&self.tau_mu),
            tau_sigma: c(&self.tau_sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FsaAttackConfig {
    /// Multiplicative budget, ≥ 1.
    pub epsilon: f64,
    pub iterations: usize,
    pub gamma: f64,
    pub diversity_prob: f64,
    pub diversity_jitter: f64,
    /// Weight of the margin term.
    pub lambda: f64,
    /// Step on `τ`; `1.25·ln ε / T` when unset.
    pub step: Option<f64>,
    pub seed: u64,
}

impl Default for FsaAttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 3.5,
            iterations: 50,
            gamma: 1.0,
            diversity_prob: 0.7,
            diversity_jitter: 0.1,
            lambda: 128.0,
            step: None,
            seed: 0,
        }
    }
}

impl FsaAttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("feature-space attack: {msg}")));
        if !(self.epsilon >= 1.0) {
            return bad("epsilon must be ≥ 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be ≥ 1");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.diversity_prob) || !(self.diversity_jitter >= 0.0) {
            return bad("bad diversity settings");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if self.step.is_some_and(|s| !(s > 0.0)) {
            return bad("step must be positive");
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.step.unwrap_or(1.25 * math::ln(self.epsilon) / self.iterations as f64)
    }
}

/// Per-channel spatial mean and population standard deviation of a
/// `[C, H, W]` (or `[1, C, H, W]`) embedding.
pub fn style_stats(embedding: &DenseArray) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = embedding.shape();
    let (c, inner) = match s.len() {
        3 => (s[0], s[1] * s[2]),
        4 if s[0] == 1 => (s[1], s[2] * s[3]),
        _ => return Err(Error::InvalidArgument(format!("style stats need [C, H, W], got {s:?}"))),
    };
    Ok(kernels::channel_stats(embedding.data(), c, inner))
}

/// Builds `e^{τσ}·φ + (e^{τμ} − e^{τσ})·μ(φ)`, which equals
/// `e^{τσ}·(φ − μ) + e^{τμ}·μ` and is exactly `φ` at `τ = 0`.
pub fn style_node(g: &mut Graph, phi: NodeId, tau_mu: NodeId, tau_sigma: NodeId) -> Result<NodeId> {
    let shape = g.value(phi).shape().to_vec();
    let mu = g.channel_mean(phi)?;
    let mu_shape = g.value(mu).shape().to_vec();
    let es = g.exp(tau_sigma)?;
    let em = g.exp(tau_mu)?;
    let shift = g.sub(em, es)?;
    let shift = g.broadcast_channels(shift, &mu_shape)?;
    let shifted_mu = g.mul(shift, mu)?;
    let shifted_mu = g.broadcast_channels(shifted_mu, &shape)?;
    let es = g.broadcast_channels(es, &shape)?;
    let spread = g.mul(es, phi)?;
    g.add(spread, shifted_mu)
}

/// Applies the style perturbation to a `[1, C, H, W]` embedding.
pub fn apply_style_perturbation(embedding: &DenseArray, params: &StyleParams) -> Result<DenseArray> {
    let mut g = Graph::new();
    let phi = g.leaf(embedding.clone());
    let tm = g.leaf(DenseArray::new(vec![params.channels()], params.tau_mu.clone())?);
    let ts = g.leaf(DenseArray::new(vec![params.tau_sigma.len()], params.tau_sigma.clone())?);
    let out = style_node(&mut g, phi, tm, ts)?;
    Ok(g.value(out).clone())
}

/// `max(e^{‖τ^μ‖∞}, e^{‖τ^σ‖∞})`.
pub fn unrestricted_distance(params: &StyleParams) -> f64 {
    math::exp(params.max_abs())
}

/// `λ · mean(z_y − z_(5), excluding y)` at the diversity-transformed `x'`
/// plus `‖φ(x') − φ̃‖₂`.
#[allow(clippy::too_many_arguments)]
pub fn fsa_loss(
    g: &mut Graph,
    x_prime: NodeId,
    y: usize,
    models: &[&Classifier],
    phi_tilde: NodeId,
    autoencoder: &AutoencoderPair,
    lambda: f64,
    draw: &DiversityDraw,
) -> Result<NodeId> {
    let n = g.value(x_prime).shape()[0];
    let labels = vec![y; n];
    let xd = apply_diversity(g, x_prime, draw)?;
    let z = ensemble_logits_node(g, models, xd)?;
    let classes = g.value(z).shape()[1];
    if classes <= MARGIN_RANK {
        return Err(Error::TooFewClasses(classes));
    }
    let zy = g.pick_class(z, &labels)?;
    let zk = g.kth_largest_excluding(z, &labels, MARGIN_RANK)?;
    let margin = g.sub(zy, zk)?;
    let margin = g.mean(margin)?;
    let margin = g.scale(margin, lambda)?;
    let phi_x = autoencoder.encode_node(g, x_prime)?;
    let content = g.l2_distance(phi_x, phi_tilde)?;
    g.add(margin, content)
}

/// Nodes of one FSA evaluation.
pub struct FsaGraph {
    pub graph: Graph,
    pub tau_mu: NodeId,
    pub tau_sigma: NodeId,
    pub x_prime: NodeId,
    pub loss: NodeId,
}

/// Builds `loss(τ)` for the embedding `phi` of the clean input.
#[allow(clippy::too_many_arguments)]
pub fn fsa_graph(
    phi: &DenseArray,
    params: &StyleParams,
    y: usize,
    models: &[&Classifier],
    autoencoder: &AutoencoderPair,
    lambda: f64,
    draw: &DiversityDraw,
) -> Result<FsaGraph> {
    let mut g = Graph::new();
    let phi_node = g.leaf(phi.clone());
    let tau_mu = g.leaf(DenseArray::new(vec![params.channels()], params.tau_mu.clone())?);
    let tau_sigma = g.leaf(DenseArray::new(vec![params.tau_sigma.len()], params.tau_sigma.clone())?);
    let phi_tilde = style_node(&mut g, phi_node, tau_mu, tau_sigma)?;
    let x_prime = autoencoder.decode_node(&mut g, phi_tilde)?;
    let loss = fsa_loss(&mut g, x_prime, y, models, phi_tilde, autoencoder, lambda, draw)?;
    Ok(FsaGraph {
        graph: g,
        tau_mu,
        tau_sigma,
        x_prime,
        loss,
    })
}

/// Momentum and parameters of a running feature-space attack.
#[derive(Debug, Clone, PartialEq)]
pub struct FsaState {
    pub params: StyleParams,
    /// Over the concatenation `[τ^μ, τ^σ]`.
    pub momentum: Vec<f64>,
    pub iteration: usize,
}

impl FsaState {
    pub fn new(params: StyleParams) -> Self {
        let momentum = vec![0.0; 2 * params.channels()];
        Self {
            params,
            momentum,
            iteration: 0,
        }
    }
}

/// `τ ← clip(τ − α·sign(m'), ±bound)` with `m' = γm + g/‖g‖₁`.
pub fn fsa_step(state: &FsaState, grad_mu: &[f64], grad_sigma: &[f64], alpha: f64, gamma: f64, bound: f64) -> FsaState {
    let c = state.params.channels();
    let grad: Vec<f64> = grad_mu.iter().chain(grad_sigma).copied().collect();
    let m = momentum_update(&state.momentum, &grad, gamma);
    let tau: Vec<f64> = state
        .params
        .tau_mu
        .iter()
        .chain(&state.params.tau_sigma)
        .zip(&m)
        .map(|(&t, &mv)| (t - alpha * math::sign(mv)).clamp(-bound, bound))
        .collect();
    FsaState {
        params: StyleParams {
            tau_mu: tau[..c].to_vec(),
            tau_sigma: tau[c..].to_vec(),
        },
        momentum: m,
        iteration: state.iteration + 1,
    }
}

/// Runs `iterations` steps on `τ` inside the box `‖τ‖∞ ≤ bound`.
#[allow(clippy::too_many_arguments)]
pub fn run_fsa_iterations(
    mut state: FsaState,
    phi: &DenseArray,
    y: usize,
    models: &[&Classifier],
    autoencoder: &AutoencoderPair,
    cfg: &FsaAttackConfig,
    bound: f64,
    alpha: f64,
    iterations: usize,
    rng: &mut impl Rng,
) -> Result<FsaState> {
    let size = autoencoder.size;
    for _ in 0..iterations {
        let draw = draw_diversity(size, cfg.diversity_prob, cfg.diversity_jitter, rng)?;
        let fg = fsa_graph(phi, &state.params, y, models, autoencoder, cfg.lambda, &draw)?;
        let grads = fg.graph.gradient(fg.loss, &[fg.tau_mu, fg.tau_sigma])?;
        state = fsa_step(&state, grads[0].data(), grads[1].data(), alpha, cfg.gamma, bound);
    }
    Ok(state)
}

/// `clip(decode(φ̃(τ)), 0, 1)` for the embedding `phi`.
pub fn render(phi: &DenseArray, params: &StyleParams, autoencoder: &AutoencoderPair) -> Result<DenseArray> {
    autoencoder.decode(&apply_style_perturbation(phi, params)?)
}

/// Builds the record for final parameters.
pub(crate) fn fsa_record(
    index: usize,
    y: usize,
    phi: &DenseArray,
    params: StyleParams,
    budget: f64,
    models: &[&Classifier],
    autoencoder: &AutoencoderPair,
) -> Result<AttackRecord> {
    let adversarial = render(phi, &params, autoencoder)?;
    Ok(AttackRecord {
        index,
        label: y,
        distance: unrestricted_distance(&params),
        predictions: predictions(models, &adversarial)?,
        adversarial,
        metric: Metric::Unrestricted,
        budget,
        stop_index: 0,
        validation_confidence: None,
        style: Some(params),
    })
}

/// Fixed-budget momentum feature-space attack on one `[1, 3, S, S]` input.
pub fn run_dmi_fsa(
    x: &DenseArray,
    y: usize,
    models: &[&Classifier],
    autoencoder: &AutoencoderPair,
    cfg: &FsaAttackConfig,
    warm_start: Option<&StyleParams>,
    index: usize,
) -> Result<AttackRecord> {
    cfg.validate()?;
    check_unit_interval(x, "input")?;
    let phi = autoencoder.encode(x)?;
    let channels = phi.shape()[1];
    let bound = math::ln(cfg.epsilon);
    let start = match warm_start {
        Some(p) if p.channels() == channels && p.tau_sigma.len() == channels => p.clipped(bound),
        Some(p) => {
            return Err(Error::InvalidArgument(format!(
                "warm start has {} channels, latent has {channels}",
                p.channels()
            )))
        }
        None => StyleParams::zeros(channels),
    };
    let mut r = rng::stream(cfg.seed, index as u64);
    let state = run_fsa_iterations(
        FsaState::new(start),
        &phi,
        y,
        models,
        autoencoder,
        cfg,
        bound,
        cfg.step_size(),
        cfg.iterations,
        &mut r,
    )?;
    fsa_record(index, y, &phi, state.params, cfg.epsilon, models, autoencoder)
}
