//! Reverse-mode gradients against central differences.

use geoattack_core::attacks::fsa::{fsa_graph, StyleParams};
use geoattack_core::attacks::{apply_diversity, draw_diversity};
use geoattack_core::diffmath::{Graph, NodeId};
use geoattack_core::rng;
use geoattack_core::zoo::{ensemble_logits_node, Arch, AutoencoderPair, Classifier};
use geoattack_core::DenseArray;
use rand::Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> DenseArray {
    DenseArray::from_fn(shape, |_| r.random_range(lo..hi))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error `‖a − c‖ / max(‖a‖, ‖c‖)` over `leaves`, with the
/// finite-difference side computed by rebinding and replaying the graph.
fn fd_error(g: &mut Graph, root: NodeId, leaves: &[NodeId]) -> f64 {
    g.evaluate(root).unwrap();
    let analytic = g.gradient(root, leaves).unwrap();
    let mut worst: f64 = 0.0;
    for (leaf, a) in leaves.iter().zip(&analytic) {
        let base = g.value(*leaf).clone();
        let mut central = Vec::with_capacity(base.len());
        for j in 0..base.len() {
            let mut at = |d: f64| {
                let mut v = base.clone().into_data();
                v[j] += d;
                g.bind(*leaf, DenseArray::new(base.shape().to_vec(), v).unwrap()).unwrap();
                g.evaluate(root).unwrap().item()
            };
            let (p, m) = (at(STEP), at(-STEP));
            central.push((p - m) / (2.0 * STEP));
        }
        g.bind(*leaf, base).unwrap();
        let diff: Vec<f64> = a.data().iter().zip(&central).map(|(x, y)| x - y).collect();
        let scale = norm(a.data()).max(norm(&central)).max(1e-8);
        worst = worst.max(norm(&diff) / scale);
    }
    g.evaluate(root).unwrap();
    worst
}

/// Builds `op` over fresh leaves; non-scalar outputs are reduced by a random
/// weighting so every output entry reaches the gradient.
fn check_op(
    name: &str,
    inputs: &[DenseArray],
    r: &mut impl Rng,
    op: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
) -> f64 {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let out = op(&mut g, &leaves);
    let root = if g.value(out).len() == 1 {
        out
    } else {
        let shape = g.value(out).shape().to_vec();
        let w = g.leaf(random(&shape, -1.0, 1.0, r));
        let p = g.mul(out, w).unwrap();
        g.sum(p).unwrap()
    };
    let err = fd_error(&mut g, root, &leaves);
    assert!(err < TOL, "{name}: relative error {err}");
    err
}

type Case = (&'static str, fn(&mut rng::Stream) -> Vec<DenseArray>, fn(&mut Graph, &[NodeId]) -> NodeId);

fn cases() -> Vec<Case> {
    vec![
        ("matmul", |r| vec![random(&[3, 4], -1.0, 1.0, r), random(&[4, 5], -1.0, 1.0, r)], |g, l| {
            g.matmul(l[0], l[1]).unwrap()
        }),
        ("conv2d s1 p1", |r| vec![random(&[2, 2, 5, 5], -1.0, 1.0, r), random(&[3, 2, 3, 3], -1.0, 1.0, r)], |g, l| {
            g.conv2d(l[0], l[1], 1, 1).unwrap()
        }),
        ("conv2d s2 p1", |r| vec![random(&[1, 3, 6, 6], -1.0, 1.0, r), random(&[2, 3, 4, 4], -1.0, 1.0, r)], |g, l| {
            g.conv2d(l[0], l[1], 2, 1).unwrap()
        }),
        ("conv2d s2 p0", |r| vec![random(&[2, 1, 7, 7], -1.0, 1.0, r), random(&[2, 1, 3, 3], -1.0, 1.0, r)], |g, l| {
            g.conv2d(l[0], l[1], 2, 0).unwrap()
        }),
        ("conv_transpose2d s2 p1", |r| vec![random(&[2, 3, 3, 3], -1.0, 1.0, r), random(&[3, 2, 4, 4], -1.0, 1.0, r)], |g, l| {
            g.conv_transpose2d(l[0], l[1], 2, 1).unwrap()
        }),
        ("conv_transpose2d s1 p0", |r| vec![random(&[1, 2, 3, 4], -1.0, 1.0, r), random(&[2, 2, 2, 2], -1.0, 1.0, r)], |g, l| {
            g.conv_transpose2d(l[0], l[1], 1, 0).unwrap()
        }),
        ("relu", |r| vec![random(&[4, 6], -1.0, 1.0, r)], |g, l| g.relu(l[0]).unwrap()),
        ("add", |r| vec![random(&[3, 3], -1.0, 1.0, r), random(&[3, 3], -1.0, 1.0, r)], |g, l| g.add(l[0], l[1]).unwrap()),
        ("sub", |r| vec![random(&[3, 3], -1.0, 1.0, r), random(&[3, 3], -1.0, 1.0, r)], |g, l| g.sub(l[0], l[1]).unwrap()),
        ("mul", |r| vec![random(&[2, 5], -1.0, 1.0, r), random(&[2, 5], -1.0, 1.0, r)], |g, l| g.mul(l[0], l[1]).unwrap()),
        ("exp", |r| vec![random(&[6], -2.0, 2.0, r)], |g, l| g.exp(l[0]).unwrap()),
        ("scale", |r| vec![random(&[6], -2.0, 2.0, r)], |g, l| g.scale(l[0], -1.7).unwrap()),
        ("broadcast [C]", |r| vec![random(&[3], -1.0, 1.0, r)], |g, l| g.broadcast_channels(l[0], &[2, 3, 2, 2]).unwrap()),
        ("broadcast [N,C]", |r| vec![random(&[2, 3], -1.0, 1.0, r)], |g, l| g.broadcast_channels(l[0], &[2, 3, 3, 2]).unwrap()),
        ("add_bias", |r| vec![random(&[2, 3, 2, 2], -1.0, 1.0, r), random(&[3], -1.0, 1.0, r)], |g, l| {
            g.add_bias(l[0], l[1]).unwrap()
        }),
        ("channel_mean", |r| vec![random(&[2, 3, 3, 3], -1.0, 1.0, r)], |g, l| g.channel_mean(l[0]).unwrap()),
        ("channel_std", |r| vec![random(&[2, 3, 3, 3], -1.0, 1.0, r)], |g, l| g.channel_std(l[0]).unwrap()),
        ("softmax_cross_entropy", |r| vec![random(&[3, 6], -3.0, 3.0, r)], |g, l| {
            g.softmax_cross_entropy(l[0], &[0, 4, 5]).unwrap()
        }),
        ("l2_distance", |r| vec![random(&[2, 7], -1.0, 1.0, r), random(&[2, 7], -1.0, 1.0, r)], |g, l| {
            g.l2_distance(l[0], l[1]).unwrap()
        }),
        ("resize up", |r| vec![random(&[1, 2, 4, 5], -1.0, 1.0, r)], |g, l| g.resize_bilinear(l[0], 7, 6).unwrap()),
        ("resize down", |r| vec![random(&[2, 1, 9, 8], -1.0, 1.0, r)], |g, l| g.resize_bilinear(l[0], 5, 3).unwrap()),
        ("zero_pad", |r| vec![random(&[1, 2, 3, 3], -1.0, 1.0, r)], |g, l| g.zero_pad(l[0], 1, 2, 5, 6).unwrap()),
        ("sum", |r| vec![random(&[2, 3], -1.0, 1.0, r)], |g, l| g.sum(l[0]).unwrap()),
        ("mean", |r| vec![random(&[2, 3], -1.0, 1.0, r)], |g, l| g.mean(l[0]).unwrap()),
        ("max_class", |r| vec![random(&[3, 6], -1.0, 1.0, r)], |g, l| g.max_class(l[0]).unwrap()),
        ("pick_class", |r| vec![random(&[3, 6], -1.0, 1.0, r)], |g, l| g.pick_class(l[0], &[1, 0, 5]).unwrap()),
        ("kth_largest_excluding", |r| vec![random(&[3, 8], -1.0, 1.0, r)], |g, l| {
            g.kth_largest_excluding(l[0], &[2, 7, 0], 5).unwrap()
        }),
        ("avg_pool2d", |r| vec![random(&[2, 2, 4, 6], -1.0, 1.0, r)], |g, l| g.avg_pool2d(l[0], 2).unwrap()),
        ("max_pool2d", |r| vec![random(&[2, 2, 4, 6], -1.0, 1.0, r)], |g, l| g.max_pool2d(l[0], 2).unwrap()),
        ("reshape", |r| vec![random(&[2, 3, 2], -1.0, 1.0, r)], |g, l| g.reshape(l[0], &[3, 4]).unwrap()),
        ("flatten", |r| vec![random(&[2, 2, 2, 2], -1.0, 1.0, r)], |g, l| g.flatten(l[0]).unwrap()),
        ("clamp", |r| vec![random(&[4, 5], -0.5, 1.5, r)], |g, l| g.clamp(l[0], 0.0, 1.0).unwrap()),
    ]
}

pub fn primitive_gradients() -> usize {
    let mut instances = 0;
    for (c, (name, inputs, op)) in cases().into_iter().enumerate() {
        for rep in 0..4u64 {
            let mut r = rng::stream(11, (c as u64) << 8 | rep);
            let xs = inputs(&mut r);
            check_op(name, &xs, &mut r, op);
            instances += 1;
        }
    }
    assert!(instances >= 100, "{instances}");
    instances
}

pub fn composite_gradients() -> usize {
    for rep in 0..5u64 {
        let mut r = rng::stream(12, rep);
        let xs = vec![random(&[1, 2, 6, 6], 0.0, 1.0, &mut r), random(&[3, 2, 3, 3], -1.0, 1.0, &mut r)];
        check_op("chain", &xs, &mut r, |g, l| {
            let c = g.conv2d(l[0], l[1], 1, 1).unwrap();
            let c = g.relu(c).unwrap();
            let p = g.max_pool2d(c, 2).unwrap();
            let s = g.channel_std(p).unwrap();
            let e = g.exp(s).unwrap();
            g.mean(e).unwrap()
        });
    }
    5
}

fn small_models(seed: u64) -> (Classifier, Classifier) {
    (
        Classifier::init(Arch::Mlp, 8, 6, seed).unwrap(),
        Classifier::init(Arch::SmallCnn, 8, 6, seed + 1).unwrap(),
    )
}

pub fn ensemble_gradients() -> usize {
    for rep in 0..20u64 {
        let (a, b) = small_models(100 + rep);
        let mut r = rng::stream(13, rep);
        let x = random(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
        let draw = draw_diversity(8, if rep % 2 == 0 { 1.0 } else { 0.0 }, 0.25, &mut r).unwrap();
        let y = r.random_range(0..6);
        let mut g = Graph::new();
        let xi = g.leaf(x);
        let xd = apply_diversity(&mut g, xi, &draw).unwrap();
        let z = ensemble_logits_node(&mut g, &[&a, &b], xd).unwrap();
        let loss = g.softmax_cross_entropy(z, &[y]).unwrap();
        let err = fd_error(&mut g, loss, &[xi]);
        assert!(err < TOL, "instance {rep}: {err}");
    }
    20
}

pub fn feature_space_gradients() -> usize {
    for rep in 0..12u64 {
        let (a, b) = small_models(200 + rep);
        let ae = AutoencoderPair::init(8, 300 + rep).unwrap();
        let mut r = rng::stream(14, rep);
        let x = random(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
        let phi = ae.encode(&x).unwrap();
        let c = phi.shape()[1];
        let params = StyleParams {
            tau_mu: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
            tau_sigma: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
        };
        let draw = draw_diversity(8, 0.5, 0.25, &mut r).unwrap();
        let y = r.random_range(0..6);
        let mut fg = fsa_graph(&phi, &params, y, &[&a, &b], &ae, 16.0, &draw).unwrap();
        let err = fd_error(&mut fg.graph, fg.loss, &[fg.tau_mu, fg.tau_sigma]);
        assert!(err < TOL, "instance {rep}: {err}");
    }
    12
}

#[test]
fn every_primitive_matches_central_differences() {
    primitive_gradients();
}

#[test]
fn composite_chain_matches_central_differences() {
    composite_gradients();
}

#[test]
fn ensemble_cross_entropy_input_gradient() {
    ensemble_gradients();
}

#[test]
fn feature_space_loss_gradient_through_autoencoder() {
    feature_space_gradients();
}
