//! Fixed-budget transfer attacks and the pieces they share.

pub mod fsa;
pub mod linf;

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffmath::{Graph, NodeId};
use crate::{math, DenseArray, Error, Result};

pub use fsa::{FsaAttackConfig, StyleParams};
pub use linf::{AdmixConfig, AdmixPool, AttackState, LinfAttackConfig};

/// One draw of the resize-and-pad transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiversityDraw {
    /// `None` when the coin flip left the input unchanged.
    pub resize: Option<usize>,
    pub padded: usize,
    pub top: usize,
    pub left: usize,
}

/// Draws the transform for an `size × size` input.
///
/// Exactly one coin flip is consumed per call; the resize and the offsets
/// only draw when the transform is applied.
pub fn draw_diversity(size: usize, p: f64, jitter: f64, rng: &mut impl Rng) -> Result<DiversityDraw> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("diversity probability {p} outside [0, 1]")));
    }
    if !(jitter >= 0.0) {
        return Err(Error::InvalidArgument(format!("diversity jitter {jitter} is negative")));
    }
    let s = size as f64;
    let padded = (math::ceil((1.0 + jitter) * s) as usize).max(size);
    let coin: f64 = rng.random();
    if coin >= p {
        return Ok(DiversityDraw {
            resize: None,
            padded,
            top: 0,
            left: 0,
        });
    }
    let lo = (math::round((1.0 - jitter) * s) as usize).max(1);
    let hi = (math::round((1.0 + jitter) * s) as usize).clamp(lo, padded);
    let r = rng.random_range(lo..=hi);
    let top = rng.random_range(0..=padded - r);
    let left = rng.random_range(0..=padded - r);
    Ok(DiversityDraw {
        resize: Some(r),
        padded,
        top,
        left,
    })
}

/// Applies a drawn transform to an image-batch node.
pub fn apply_diversity(g: &mut Graph, x: NodeId, draw: &DiversityDraw) -> Result<NodeId> {
    let Some(r) = draw.resize else {
        return Ok(x);
    };
    let s = g.value(x).shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let small = g.resize_bilinear(x, r, r)?;
    let padded = g.zero_pad(small, draw.top, draw.left, draw.padded, draw.padded)?;
    g.resize_bilinear(padded, h, w)
}

/// Random resize-and-pad applied with probability `p`, built into `g`.
pub fn input_diversity_node(g: &mut Graph, x: NodeId, p: f64, jitter: f64, rng: &mut impl Rng) -> Result<NodeId> {
    let size = g.value(x).shape()[2];
    let draw = draw_diversity(size, p, jitter, rng)?;
    apply_diversity(g, x, &draw)
}

/// Random resize-and-pad applied with probability `p`.
pub fn input_diversity(x: &DenseArray, p: f64, jitter: f64, rng: &mut impl Rng) -> Result<DenseArray> {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let y = input_diversity_node(&mut g, xi, p, jitter, rng)?;
    Ok(g.value(y).clone())
}

/// `size × size` Gaussian kernel normalised to sum 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<DenseArray> {
    if size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("kernel size {size} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("kernel sigma {sigma} must be positive")));
    }
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size * size)
        .map(|idx| {
            let (i, j) = ((idx / size) as f64 - c, (idx % size) as f64 - c);
            math::exp(-(i * i + j * j) / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = raw.iter().sum();
    DenseArray::new(alloc::vec![size, size], raw.into_iter().map(|v| v / total).collect())
}

/// Channelwise convolution of an `[N, C, H, W]` field with `kernel`, border
/// pixels replicated.
pub fn smooth(field: &DenseArray, kernel: &DenseArray) -> Result<DenseArray> {
    let s = field.shape();
    let ks = kernel.shape();
    if s.len() != 4 || ks.len() != 2 || ks[0] != ks[1] || ks[0].is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("cannot smooth {s:?} with kernel {ks:?}")));
    }
    let (h, w, k) = (s[2], s[3], ks[0]);
    if k == 1 {
        return Ok(field.map(|v| v * kernel.data()[0]));
    }
    let c = (k / 2) as isize;
    let kd = kernel.data();
    let mut out = Vec::with_capacity(field.len());
    for plane in field.data().chunks(h * w) {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for i in 0..k as isize {
                    let yy = (y + i - c).clamp(0, h as isize - 1) as usize;
                    for j in 0..k as isize {
                        let xx = (x + j - c).clamp(0, w as isize - 1) as usize;
                        acc += kd[(i * k as isize + j) as usize] * plane[yy * w + xx];
                    }
                }
                out.push(acc);
            }
        }
    }
    Ok(DenseArray::from_parts(s.to_vec(), out))
}

/// `γ·m + g/‖g‖₁`, with the second term zero when `‖g‖₁ = 0`.
pub fn momentum_update(momentum: &[f64], grad: &[f64], gamma: f64) -> Vec<f64> {
    let l1: f64 = grad.iter().map(|v| v.abs()).sum();
    momentum
        .iter()
        .zip(grad)
        .map(|(m, g)| if l1 > 0.0 { gamma * m + g / l1 } else { gamma * m })
        .collect()
}

pub(crate) fn check_unit_interval(x: &DenseArray, what: &str) -> Result<()> {
    if x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} has pixels outside [0, 1]")))
    }
}
