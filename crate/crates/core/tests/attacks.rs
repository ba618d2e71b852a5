//! Attack behaviour: degenerate settings, constraint invariants, early stopping.

use geoattack_core::attacks::fsa::{
    apply_style_perturbation, fsa_graph, fsa_step, run_dmi_fsa, run_fsa_iterations, style_stats, FsaState,
};
use geoattack_core::attacks::linf::{dtmi_step, project, run_fixed_linf_attack, run_linf_iterations, smoothed_input_gradient};
use geoattack_core::attacks::{
    draw_diversity, gaussian_kernel, input_diversity, momentum_update, smooth, AdmixConfig, AdmixPool, AttackState,
    FsaAttackConfig, LinfAttackConfig, StyleParams,
};
use geoattack_core::diffmath::Graph;
use geoattack_core::ga::{budget_schedule, ga_attack, ga_trajectory, AttackResources, GaConfig, InnerAttack};
use geoattack_core::zoo::{ensemble_logits_node, Arch, AutoencoderPair, Classifier};
use geoattack_core::{math, rng, DenseArray, Metric};
use rand::Rng;

const SIZE: usize = 8;
const CLASSES: usize = 6;

fn models(seed: u64) -> Vec<Classifier> {
    [Arch::Mlp, Arch::SmallCnn, Arch::SmallCnnMaxPool]
        .iter()
        .enumerate()
        .map(|(i, &a)| Classifier::init(a, SIZE, CLASSES, seed + i as u64).unwrap())
        .collect()
}

fn image(r: &mut impl Rng) -> DenseArray {
    DenseArray::from_fn(&[1, 3, SIZE, SIZE], |_| r.random())
}

fn plain_linf() -> LinfAttackConfig {
    LinfAttackConfig {
        epsilon: 12.0,
        iterations: 6,
        gamma: 0.0,
        diversity_prob: 0.0,
        ti_kernel_size: 1,
        admix: None,
        seed: 3,
        ..LinfAttackConfig::default()
    }
}

/// Reference I-FGSM: sign of the ensemble cross-entropy gradient, clipped to
/// the ball and the unit box.
fn ifgsm_step(x: &DenseArray, x0: &DenseArray, y: usize, models: &[&Classifier], alpha: f64, eps: f64) -> DenseArray {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let z = ensemble_logits_node(&mut g, models, xi).unwrap();
    let loss = g.softmax_cross_entropy(z, &[y]).unwrap();
    let grad = g.gradient(loss, &[xi]).unwrap().remove(0);
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .zip(x0.data())
        .map(|((&v, &d), &c)| (v + alpha * math::sign(d)).clamp(c - eps, c + eps).clamp(0.0, 1.0))
        .collect();
    DenseArray::new(x.shape().to_vec(), data).unwrap()
}

pub fn linf_degeneracy() {
    let zoo = models(40);
    let refs: Vec<&Classifier> = zoo.iter().collect();
    let cfg = plain_linf();
    for case in 0..10u64 {
        let mut r = rng::stream(41, case);
        let x = image(&mut r);
        let y = r.random_range(0..CLASSES);
        let (eps, alpha) = (cfg.epsilon / 255.0, cfg.step_size() / 255.0);
        let mut stream = rng::stream(cfg.seed, case);
        let mut state = AttackState::new(x.clone());
        let mut reference = x.clone();
        for _ in 0..cfg.iterations {
            state = run_linf_iterations(state, &x, y, &refs, &cfg, eps, alpha, 1, None, &mut stream).unwrap();
            reference = ifgsm_step(&reference, &x, y, &refs, alpha, eps);
            assert_eq!(state.x.data(), reference.data());
        }
        let record = run_fixed_linf_attack(&x, y, &refs, &cfg, None, None, case as usize).unwrap();
        assert_eq!(record.adversarial.data(), reference.data());
    }
}

fn small_fsa() -> FsaAttackConfig {
    FsaAttackConfig {
        epsilon: 2.0,
        iterations: 5,
        gamma: 0.0,
        lambda: 8.0,
        seed: 9,
        ..FsaAttackConfig::default()
    }
}

pub fn fsa_degeneracy() {
    let zoo = models(50);
    let refs: Vec<&Classifier> = zoo.iter().collect();
    let ae = AutoencoderPair::init(SIZE, 51).unwrap();
    let cfg = small_fsa();
    let bound = math::ln(cfg.epsilon);
    for case in 0..6u64 {
        let mut r = rng::stream(52, case);
        let x = image(&mut r);
        let y = r.random_range(0..CLASSES);
        let phi = ae.encode(&x).unwrap();
        let c = phi.shape()[1];
        // DI-FSA written out: same diversity stream, no momentum buffer
        let mut stream = rng::stream(cfg.seed, case);
        let mut tau = StyleParams::zeros(c);
        let mut state = FsaState::new(StyleParams::zeros(c));
        let mut mirror = rng::stream(cfg.seed, case);
        for _ in 0..cfg.iterations {
            let draw = draw_diversity(SIZE, cfg.diversity_prob, cfg.diversity_jitter, &mut stream).unwrap();
            let fg = fsa_graph(&phi, &tau, y, &refs, &ae, cfg.lambda, &draw).unwrap();
            let gr = fg.graph.gradient(fg.loss, &[fg.tau_mu, fg.tau_sigma]).unwrap();
            let upd = |t: &[f64], g: &DenseArray| -> Vec<f64> {
                t.iter()
                    .zip(g.data())
                    .map(|(&v, &d)| (v - cfg.step_size() * math::sign(d)).clamp(-bound, bound))
                    .collect()
            };
            tau = StyleParams {
                tau_mu: upd(&tau.tau_mu, &gr[0]),
                tau_sigma: upd(&tau.tau_sigma, &gr[1]),
            };
            state = run_fsa_iterations(state, &phi, y, &refs, &ae, &cfg, bound, cfg.step_size(), 1, &mut mirror).unwrap();
            assert_eq!(state.params, tau);
        }
        let record = run_dmi_fsa(&x, y, &refs, &ae, &cfg, None, case as usize).unwrap();
        assert_eq!(record.style.unwrap(), tau);
    }
}

fn ulp_slack(v: f64) -> f64 {
    v + f64::EPSILON
}

pub fn linf_invariants() {
    let mut r = rng::stream(60, 0);
    let mut steps = 0;
    while steps < 10_000 {
        let n = r.random_range(1..40);
        let x0 = DenseArray::from_fn(&[n], |_| r.random());
        let eps = r.random_range(1.0..64.0) / 255.0;
        let alpha = r.random_range(0.1..2.0) * eps;
        let gamma = r.random_range(0.0..1.5);
        let mut state = AttackState::new(project(&DenseArray::from_fn(&[n], |_| r.random()), &x0, eps));
        for _ in 0..50 {
            let grad = DenseArray::from_fn(&[n], |_| r.random_range(-1.0..1.0));
            state = dtmi_step(&state, &grad, alpha, gamma, &x0, eps);
            for (&v, &c) in state.x.data().iter().zip(x0.data()) {
                assert!((v - c).abs() <= ulp_slack(eps), "{v} {c} {eps}");
                assert!((0.0..=1.0).contains(&v));
            }
            steps += 1;
        }
    }
}

pub fn style_invariants() {
    let mut r = rng::stream(61, 0);
    let mut steps = 0;
    while steps < 10_000 {
        let c = r.random_range(1..20);
        let bound = math::ln(r.random_range(1.01..8.0));
        let alpha = r.random_range(0.05..1.0) * bound;
        let mut state = FsaState::new(StyleParams::zeros(c));
        for _ in 0..50 {
            let gm: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
            let gs: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
            state = fsa_step(&state, &gm, &gs, alpha, 1.0, bound);
            assert!(state.params.max_abs() <= ulp_slack(bound));
            assert!(math::exp(state.params.max_abs()) <= math::exp(bound) * (1.0 + f64::EPSILON));
            steps += 1;
        }
    }
}

pub fn attack_budgets() {
    let zoo = models(70);
    let refs: Vec<&Classifier> = zoo.iter().collect();
    let ae = AutoencoderPair::init(SIZE, 71).unwrap();
    let linf = LinfAttackConfig {
        epsilon: 8.0,
        iterations: 4,
        seed: 72,
        ..LinfAttackConfig::default()
    };
    let fsa = FsaAttackConfig {
        iterations: 4,
        seed: 73,
        ..FsaAttackConfig::default()
    };
    for case in 0..8usize {
        let mut r = rng::stream(74, case as u64);
        let x = image(&mut r);
        let y = r.random_range(0..CLASSES);
        let a = run_fixed_linf_attack(&x, y, &refs, &linf, None, None, case).unwrap();
        assert!(a.distance <= linf.epsilon * (1.0 + 1e-12));
        assert!(a.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let b = run_dmi_fsa(&x, y, &refs, &ae, &fsa, None, case).unwrap();
        assert!(b.distance <= fsa.epsilon * (1.0 + 1e-12));
        assert!(b.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn style_statistics_direct_loops() {
    let mut r = rng::stream(80, 0);
    let phi = DenseArray::from_fn(&[1, 4, 3, 5], |_| r.random_range(-2.0..2.0));
    let (mu, sigma) = style_stats(&phi).unwrap();
    let d = phi.data();
    for c in 0..4 {
        let plane = &d[c * 15..(c + 1) * 15];
        let m = plane.iter().sum::<f64>() / 15.0;
        let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 15.0;
        assert!((mu[c] - m).abs() < 1e-12);
        assert!((sigma[c] - var.sqrt()).abs() < 1e-12);
    }
    assert_eq!(apply_style_perturbation(&phi, &StyleParams::zeros(4)).unwrap(), phi);
    let params = StyleParams {
        tau_mu: vec![0.3, -0.2, 0.0, 0.7],
        tau_sigma: vec![-0.4, 0.1, 0.5, 0.0],
    };
    let out = apply_style_perturbation(&phi, &params).unwrap();
    let (mu2, sigma2) = style_stats(&out).unwrap();
    for c in 0..4 {
        assert!((mu2[c] - params.tau_mu[c].exp() * mu[c]).abs() < 1e-12);
        assert!((sigma2[c] - params.tau_sigma[c].exp() * sigma[c]).abs() < 1e-12);
    }
}

#[test]
fn diversity_draws() {
    let mut r = rng::stream(90, 0);
    for _ in 0..500 {
        let mut shadow = r.clone();
        let d = draw_diversity(16, 0.0, 0.1, &mut r).unwrap();
        assert_eq!(d.resize, None);
        let _: f64 = shadow.random();
        assert_eq!(r.random::<u64>(), shadow.random::<u64>());
        let d = draw_diversity(16, 1.0, 0.1, &mut r).unwrap();
        let s = d.resize.unwrap();
        assert!((14..=18).contains(&s));
        assert_eq!(d.padded, 18);
        assert!(d.top + s <= d.padded && d.left + s <= d.padded);
    }
    let x = image(&mut r);
    let out = input_diversity(&x, 1.0, 0.25, &mut r).unwrap();
    assert_eq!(out.shape(), x.shape());
    assert_eq!(input_diversity(&x, 0.0, 0.25, &mut r).unwrap(), x);
}

#[test]
fn smoothing_and_momentum() {
    let k = gaussian_kernel(5, 1.5).unwrap();
    assert!((k.sum() - 1.0).abs() < 1e-12);
    let flat = DenseArray::full(&[1, 3, 6, 6], 0.25);
    let s = smooth(&flat, &k).unwrap();
    assert!(s.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    let one = gaussian_kernel(1, 1.5).unwrap();
    let mut r = rng::stream(91, 0);
    let field = DenseArray::from_fn(&[1, 3, 6, 6], |_| r.random_range(-1.0..1.0));
    assert_eq!(smooth(&field, &one).unwrap(), field);

    let m = momentum_update(&[1.0, -2.0], &[3.0, 1.0], 0.5);
    assert_eq!(m, vec![0.5 + 0.75, -1.0 + 0.25]);
    assert_eq!(momentum_update(&[1.0, 2.0], &[0.0, 0.0], 0.5), vec![0.5, 1.0]);
}

#[test]
fn neutral_admix_equals_plain_gradient() {
    let zoo = models(95);
    let refs: Vec<&Classifier> = zoo.iter().collect();
    let mut r = rng::stream(96, 0);
    let pool_images = DenseArray::from_fn(&[4, 3, SIZE, SIZE], |_| r.random());
    let pool = AdmixPool::new(pool_images, vec![0, 1, 2, 3]).unwrap();
    let x = image(&mut r);
    let base = LinfAttackConfig {
        diversity_prob: 0.0,
        ..LinfAttackConfig::default()
    };
    let mixed = LinfAttackConfig {
        admix: Some(AdmixConfig { m1: 1, m2: 3, eta: 0.0 }),
        ..base.clone()
    };
    let plain = smoothed_input_gradient(&refs, &x, 1, &base, None, &mut r).unwrap();
    let admix = smoothed_input_gradient(&refs, &x, 1, &mixed, Some(&pool), &mut r).unwrap();
    assert!(plain.max_abs_diff(&admix) < 1e-12);
    assert!(smoothed_input_gradient(&refs, &x, 1, &mixed, None, &mut r).is_err());
}

pub fn early_stop() {
    let zoo = models(100);
    let (f, h): (Vec<&Classifier>, Vec<&Classifier>) = (vec![&zoo[0], &zoo[1]], vec![&zoo[2]]);
    let mut checked = 0;
    for case in 0..500usize {
        let mut r = rng::stream(101, case as u64);
        let x = image(&mut r);
        let y = r.random_range(0..CLASSES);
        let inner = InnerAttack::Linf(LinfAttackConfig {
            epsilon: 24.0,
            iterations: 2,
            seed: 102,
            ..LinfAttackConfig::default()
        });
        let mut cfg = GaConfig {
            sub_procedures: 4,
            eta: 0.0,
            inner,
        };
        let full = ga_trajectory(&x, y, &f, &h, &cfg, &AttackResources::default(), case, None).unwrap();
        assert_eq!(full.len(), 4);
        let confs: Vec<f64> = full.iter().map(|s| s.confidence).collect();
        let lo = confs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = confs.iter().cloned().fold(0.0, f64::max);
        let mut etas = vec![0.0, r.random_range(0.0..0.999)];
        etas.extend((0..3).map(|i| lo + (hi - lo) * i as f64 / 2.0));
        etas.sort_by(f64::total_cmp);
        let mut previous = usize::MAX;
        for eta in etas {
            cfg.eta = eta;
            let rec = ga_attack(&x, y, &f, &h, &cfg, &AttackResources::default(), case).unwrap();
            let expect = confs.iter().position(|&c| c < eta).map(|p| p + 1);
            assert_eq!(rec.stop_index, expect.unwrap_or(0));
            let taken = expect.unwrap_or(4);
            assert_eq!(rec.adversarial, full[taken - 1].adversarial);
            assert_eq!(rec.budget, full[taken - 1].budget);
            if eta == 0.0 {
                assert_eq!(rec.stop_index, 0);
                assert_eq!(rec.budget, 24.0);
            }
            assert!(taken <= previous);
            previous = taken;
            checked += 1;
        }
    }
    assert!(checked >= 500);
}

#[test]
fn feature_space_budget_search_uses_growing_boxes() {
    let zoo = models(110);
    let refs: Vec<&Classifier> = zoo.iter().collect();
    let ae = AutoencoderPair::init(SIZE, 111).unwrap();
    let cfg = GaConfig {
        sub_procedures: 3,
        eta: 0.0,
        inner: InnerAttack::Fsa(FsaAttackConfig {
            iterations: 3,
            seed: 112,
            ..FsaAttackConfig::default()
        }),
    };
    let res = AttackResources {
        autoencoder: Some(&ae),
        admix_pool: None,
    };
    let mut r = rng::stream(113, 0);
    let x = image(&mut r);
    let steps = ga_trajectory(&x, 2, &refs[..2], &refs[2..], &cfg, &res, 0, None).unwrap();
    let schedule = budget_schedule(3.5, 3, Metric::Unrestricted).unwrap();
    for (s, b) in steps.iter().zip(&schedule) {
        assert_eq!(s.budget, *b);
        assert!(s.distance <= b * (1.0 + 1e-12));
    }
    assert!(ga_trajectory(&x, 2, &refs[..2], &refs[2..], &cfg, &AttackResources::default(), 0, None).is_err());
}

#[test]
fn degenerate_linf_attack_is_plain_ifgsm() {
    linf_degeneracy();
}

#[test]
fn momentum_free_fsa_matches_plain_sign_descent() {
    fsa_degeneracy();
}

#[test]
fn linf_steps_stay_in_ball_and_box() {
    linf_invariants();
}

#[test]
fn style_steps_stay_in_box() {
    style_invariants();
}

#[test]
fn full_attacks_respect_budgets() {
    attack_budgets();
}

#[test]
fn early_stop_semantics() {
    early_stop();
}
