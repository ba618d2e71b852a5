//! Synthetic dataset, tiny classifiers, the style autoencoder and ensemble
//! fusion.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffmath::{Graph, NodeId};
use crate::{math, rng, DenseArray, Error, Result};

pub const IMAGE_CHANNELS: usize = 3;
pub const LATENT_CHANNELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Split {
    Train,
    Test,
}

/// Class-conditional texture images in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    /// `[N, 3, S, S]`.
    pub images: DenseArray,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Image `i` as a `[1, 3, S, S]` batch.
    pub fn image(&self, i: usize) -> DenseArray {
        self.images.slice_first(i)
    }

    /// Checks pixel range, label range and the bookkeeping lengths.
    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 || s[0] != self.len() || s[1] != IMAGE_CHANNELS || s[2] != self.size || s[3] != self.size {
            return Err(Error::InvalidArgument(format!("dataset images have shape {s:?}")));
        }
        if self.splits.len() != self.len() {
            return Err(Error::InvalidArgument("split tags do not match image count".into()));
        }
        if self.classes < 6 {
            return Err(Error::TooFewClasses(self.classes));
        }
        if self.labels.iter().any(|&y| y >= self.classes) {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Every fourth image of each class goes to the held-out split.
fn split_of(within_class: usize) -> Split {
    if within_class % 4 == 3 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Generates `classes · per_class` images of size `size × size`.
///
/// Each class owns an oriented grating with its own spatial frequency and a
/// two-colour palette; each image draws a random phase, a small rotation and
/// scale jitter, a contrast/brightness change and Gaussian pixel noise.
/// Images are interleaved by class, so labels cycle `0, 1, …, C−1`.
pub fn gen_toy_dataset(seed: u64, classes: usize, per_class: usize, size: usize) -> Result<ToyDataset> {
    if classes < 6 {
        return Err(Error::TooFewClasses(classes));
    }
    if size < 8 || per_class == 0 {
        return Err(Error::InvalidArgument(format!("size {size} < 8 or per_class {per_class} = 0")));
    }
    let mut class_rng = rng::stream(seed, 0);
    let styles: Vec<ClassStyle> = (0..classes)
        .map(|c| {
            let palette = |r: &mut rng::Stream| -> [f64; 3] { core::array::from_fn(|_| r.random_range(0.2..0.8)) };
            ClassStyle {
                angle: PI * c as f64 / classes as f64,
                freq: [1.5, 2.25, 3.0][c % 3],
                a: palette(&mut class_rng),
                b: palette(&mut class_rng),
            }
        })
        .collect();

    let n = classes * per_class;
    let plane = size * size;
    let mut data = Vec::with_capacity(n * IMAGE_CHANNELS * plane);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for i in 0..per_class {
        for (c, style) in styles.iter().enumerate() {
            let mut r = rng::stream(seed, 1 + labels.len() as u64);
            style.render(size, &mut r, &mut data);
            labels.push(c);
            splits.push(split_of(i));
        }
    }
    let images = DenseArray::new(vec![n, IMAGE_CHANNELS, size, size], data)?;
    Ok(ToyDataset {
        images,
        labels,
        splits,
        classes,
        size,
        seed,
    })
}

struct ClassStyle {
    angle: f64,
    freq: f64,
    a: [f64; 3],
    b: [f64; 3],
}

impl ClassStyle {
    fn render(&self, size: usize, r: &mut rng::Stream, out: &mut Vec<f64>) {
        let phase = r.random_range(0.0..2.0 * PI);
        let angle = self.angle + r.random_range(-0.15..0.15);
        let freq = self.freq * r.random_range(0.9..1.1);
        let contrast = r.random_range(0.6..1.0);
        let brightness = r.random_range(-0.08..0.08);
        let (ca, sa) = (math::cos(angle), math::sin(angle));
        let mut t = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64 - 0.5;
                let v = (y as f64 + 0.5) / size as f64 - 0.5;
                let wave = math::sin(2.0 * PI * freq * (u * ca + v * sa) + phase);
                t[y * size + x] = 0.5 + 0.5 * contrast * wave;
            }
        }
        for ch in 0..IMAGE_CHANNELS {
            for &tv in &t {
                let noise: f64 = StandardNormal.sample(r);
                let v = self.a[ch] * (1.0 - tv) + self.b[ch] * tv + brightness + 0.03 * noise;
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
}

// ---- classifiers ----------------------------------------------------------

/// Classifier architectures of the zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Arch {
    #[cfg_attr(feature = "serde", serde(rename = "mlp"))]
    Mlp,
    #[cfg_attr(feature = "serde", serde(rename = "mlp-deep"))]
    MlpDeep,
    #[cfg_attr(feature = "serde", serde(rename = "smallcnn"))]
    SmallCnn,
    #[cfg_attr(feature = "serde", serde(rename = "smallcnn-wide"))]
    SmallCnnWide,
    #[cfg_attr(feature = "serde", serde(rename = "smallcnn-deep"))]
    SmallCnnDeep,
    #[cfg_attr(feature = "serde", serde(rename = "smallcnn-avgpool"))]
    SmallCnnAvgPool,
    #[cfg_attr(feature = "serde", serde(rename = "smallcnn-maxpool"))]
    SmallCnnMaxPool,
}

impl Arch {
    pub const ALL: [Arch; 7] = [
        Arch::Mlp,
        Arch::MlpDeep,
        Arch::SmallCnn,
        Arch::SmallCnnWide,
        Arch::SmallCnnDeep,
        Arch::SmallCnnAvgPool,
        Arch::SmallCnnMaxPool,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::MlpDeep => "mlp-deep",
            Arch::SmallCnn => "smallcnn",
            Arch::SmallCnnWide => "smallcnn-wide",
            Arch::SmallCnnDeep => "smallcnn-deep",
            Arch::SmallCnnAvgPool => "smallcnn-avgpool",
            Arch::SmallCnnMaxPool => "smallcnn-maxpool",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }

    fn layers(self, size: usize, classes: usize) -> Vec<Layer> {
        use Layer::*;
        let input = IMAGE_CHANNELS * size * size;
        let (half, quarter) = (size / 2, size / 4);
        match self {
            Arch::Mlp => vec![Flatten, Dense(input, 64), Relu, Dense(64, classes)],
            Arch::MlpDeep => vec![
                Flatten,
                Dense(input, 128),
                Relu,
                Dense(128, 64),
                Relu,
                Dense(64, classes),
            ],
            Arch::SmallCnn => vec![
                Conv(conv(3, 8, 3, 1, 1)),
                Relu,
                Conv(conv(8, 16, 3, 2, 1)),
                Relu,
                Flatten,
                Dense(16 * half * half, classes),
            ],
            Arch::SmallCnnWide => vec![
                Conv(conv(3, 16, 3, 1, 1)),
                Relu,
                Conv(conv(16, 32, 3, 2, 1)),
                Relu,
                Flatten,
                Dense(32 * half * half, classes),
            ],
            Arch::SmallCnnDeep => vec![
                Conv(conv(3, 8, 3, 1, 1)),
                Relu,
                Conv(conv(8, 16, 3, 2, 1)),
                Relu,
                Conv(conv(16, 16, 3, 2, 1)),
                Relu,
                Flatten,
                Dense(16 * quarter * quarter, classes),
            ],
            Arch::SmallCnnAvgPool => vec![
                Conv(conv(3, 8, 5, 1, 2)),
                Relu,
                AvgPool(2),
                Conv(conv(8, 16, 3, 1, 1)),
                Relu,
                AvgPool(2),
                Flatten,
                Dense(16 * quarter * quarter, classes),
            ],
            Arch::SmallCnnMaxPool => vec![
                Conv(conv(3, 8, 3, 1, 1)),
                Relu,
                MaxPool(2),
                Conv(conv(8, 16, 3, 1, 1)),
                Relu,
                MaxPool(2),
                Flatten,
                Dense(16 * quarter * quarter, classes),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvSpec {
    ConvSpec {
        cin,
        cout,
        k,
        stride,
        pad,
    }
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Dense(usize, usize),
    Conv(ConvSpec),
    /// Transposed convolution; `cin`/`cout` are the small/large sides.
    Deconv(ConvSpec),
    Relu,
    AvgPool(usize),
    MaxPool(usize),
    Flatten,
    Clamp01,
}

impl Layer {
    /// Parameter shapes with the fan-in used for initialisation.
    fn param_shapes(&self) -> Vec<(Vec<usize>, usize)> {
        match *self {
            Layer::Dense(i, o) => vec![(vec![i, o], i), (vec![o], 0)],
            Layer::Conv(c) => vec![(vec![c.cout, c.cin, c.k, c.k], c.cin * c.k * c.k), (vec![c.cout], 0)],
            Layer::Deconv(c) => vec![
                (vec![c.cin, c.cout, c.k, c.k], c.cin * c.k * c.k / (c.stride * c.stride)),
                (vec![c.cout], 0),
            ],
            _ => Vec::new(),
        }
    }
}

fn init_params(layers: &[Layer], r: &mut rng::Stream) -> Vec<DenseArray> {
    let mut params = Vec::new();
    let last_dense = layers.iter().rposition(|l| matches!(l, Layer::Dense(..)));
    for (li, layer) in layers.iter().enumerate() {
        for (shape, fan_in) in layer.param_shapes() {
            if fan_in == 0 {
                params.push(DenseArray::zeros(&shape));
                continue;
            }
            let gain = if Some(li) == last_dense { 1.0 } else { 2.0 };
            let std = math::sqrt(gain / fan_in as f64);
            params.push(DenseArray::from_fn(&shape, |_| {
                let z: f64 = StandardNormal.sample(r);
                std * z
            }));
        }
    }
    params
}

fn apply_layers(layers: &[Layer], g: &mut Graph, mut x: NodeId, params: &[NodeId]) -> Result<NodeId> {
    let mut p = params.iter();
    let mut next = || -> Result<NodeId> {
        p.next()
            .copied()
            .ok_or_else(|| Error::InvalidArgument("parameter list too short".into()))
    };
    for layer in layers {
        x = match *layer {
            Layer::Dense(..) => {
                let (w, b) = (next()?, next()?);
                let y = g.matmul(x, w)?;
                g.add_bias(y, b)?
            }
            Layer::Conv(c) => {
                let (w, b) = (next()?, next()?);
                let y = g.conv2d(x, w, c.stride, c.pad)?;
                g.add_bias(y, b)?
            }
            Layer::Deconv(c) => {
                let (w, b) = (next()?, next()?);
                let y = g.conv_transpose2d(x, w, c.stride, c.pad)?;
                g.add_bias(y, b)?
            }
            Layer::Relu => g.relu(x)?,
            Layer::AvgPool(k) => g.avg_pool2d(x, k)?,
            Layer::MaxPool(k) => g.max_pool2d(x, k)?,
            Layer::Flatten => g.flatten(x)?,
            Layer::Clamp01 => g.clamp(x, 0.0, 1.0)?,
        };
    }
    Ok(x)
}

/// A trained classifier. Parameters are not mutated after training.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub arch: Arch,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    pub epochs: usize,
    pub params: Vec<DenseArray>,
    /// Accuracy on the held-out split of the training dataset.
    pub accuracy: f64,
}

impl Classifier {
    /// A freshly initialised (untrained) network.
    pub fn init(arch: Arch, size: usize, classes: usize, seed: u64) -> Result<Self> {
        if !size.is_multiple_of(4) || size < 8 {
            return Err(Error::InvalidArgument(format!("image size {size} must be a multiple of 4, ≥ 8")));
        }
        let layers = arch.layers(size, classes);
        let params = init_params(&layers, &mut rng::stream(seed, 0x1000));
        Ok(Self {
            arch,
            size,
            classes,
            seed,
            epochs: 0,
            params,
            accuracy: 0.0,
        })
    }

    /// Rebuilds a classifier from stored parameters, checking their shapes.
    pub fn from_params(arch: Arch, size: usize, classes: usize, params: Vec<DenseArray>) -> Result<Self> {
        let expected: Vec<Vec<usize>> = arch
            .layers(size, classes)
            .iter()
            .flat_map(|l| l.param_shapes())
            .map(|(s, _)| s)
            .collect();
        let got: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        if expected.len() != got.len() || expected.iter().zip(&got).any(|(e, g)| e.as_slice() != *g) {
            return Err(Error::InvalidArgument(format!("{} expects shapes {expected:?}, got {got:?}", arch.tag())));
        }
        Ok(Self {
            arch,
            size,
            classes,
            seed: 0,
            epochs: 0,
            params,
            accuracy: 0.0,
        })
    }

    fn layers(&self) -> Vec<Layer> {
        self.arch.layers(self.size, self.classes)
    }

    /// Adds the network to `g` on top of an image batch node; returns logits `[N, C]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let params: Vec<NodeId> = self.params.iter().map(|p| g.leaf(p.clone())).collect();
        apply_layers(&self.layers(), g, x, &params)
    }

    pub fn logits(&self, x: &DenseArray) -> Result<DenseArray> {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let z = self.forward(&mut g, xi)?;
        Ok(g.value(z).clone())
    }

    /// Argmax labels, ties to the lowest class index.
    pub fn predict(&self, x: &DenseArray) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(DenseArray::len).sum()
    }
}

pub fn argmax_rows(z: &DenseArray) -> Vec<usize> {
    let c = z.shape()[1];
    z.data().chunks(c).map(math::argmax).collect()
}

/// Fixed minibatch schedule.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Heavy-ball momentum on the minibatch gradient.
    pub momentum: f64,
    /// The learning rate is multiplied by 0.2 for the final third of the epochs.
    pub decay_last_third: bool,
}

impl TrainConfig {
    pub fn classifier(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            decay_last_third: true,
        }
    }

    pub fn autoencoder(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 16,
            learning_rate: 0.5,
            momentum: 0.9,
            decay_last_third: true,
        }
    }

    fn rate(&self, epoch: usize) -> f64 {
        if self.decay_last_third && 3 * epoch >= 2 * self.epochs {
            0.2 * self.learning_rate
        } else {
            self.learning_rate
        }
    }
}

/// Minibatch descent over `params`; `loss` builds the scalar loss for one batch.
fn descend(
    params: &mut [DenseArray],
    order_seed: u64,
    train: &[usize],
    cfg: &TrainConfig,
    mut loss: impl FnMut(&mut Graph, &[NodeId], &[usize]) -> Result<NodeId>,
) -> Result<()> {
    let mut r = rng::stream(order_seed, 0x2000);
    let mut velocity: Vec<DenseArray> = params.iter().map(|p| DenseArray::zeros(p.shape())).collect();
    let mut order = train.to_vec();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let lr = cfg.rate(epoch);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
            let root = loss(&mut g, &ids, batch)?;
            if !g.value(root).item().is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let grads = g.gradient(root, &ids)?;
            for ((p, v), gr) in params.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                    *vv = cfg.momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
                if !p.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
            }
        }
    }
    Ok(())
}

/// Trains `arch` on the training split with the default schedule.
pub fn train_classifier(arch: Arch, data: &ToyDataset, seed: u64, epochs: usize) -> Result<Classifier> {
    train_classifier_with(arch, data, seed, &TrainConfig::classifier(epochs))
}

pub fn train_classifier_with(arch: Arch, data: &ToyDataset, seed: u64, cfg: &TrainConfig) -> Result<Classifier> {
    data.validate()?;
    let mut model = Classifier::init(arch, data.size, data.classes, seed)?;
    let layers = model.layers();
    let train = data.indices(Split::Train);
    descend(&mut model.params, seed, &train, cfg, |g, params, batch| {
        let x = g.leaf(data.images.gather_first(batch));
        let z = apply_layers(&layers, g, x, params)?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        g.softmax_cross_entropy(z, &labels)
    })?;
    model.epochs = cfg.epochs;
    model.accuracy = accuracy(&model, data, Split::Test)?;
    Ok(model)
}

/// Fraction of `split` the model labels correctly.
pub fn accuracy(model: &Classifier, data: &ToyDataset, split: Split) -> Result<f64> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in idx.chunks(128) {
        let pred = model.predict(&data.images.gather_first(chunk))?;
        correct += chunk.iter().zip(&pred).filter(|(&i, &p)| data.labels[i] == p).count();
    }
    Ok(correct as f64 / idx.len() as f64)
}

// ---- ensembles --------------------------------------------------------------

fn check_ensemble(models: &[&Classifier]) -> Result<()> {
    let first = models.first().ok_or(Error::EmptyEnsemble)?;
    for m in &models[1..] {
        if m.classes != first.classes {
            return Err(Error::EnsembleMismatch(format!("{} vs {} classes", m.classes, first.classes)));
        }
        if m.size != first.size {
            return Err(Error::EnsembleMismatch(format!("input size {} vs {}", m.size, first.size)));
        }
    }
    Ok(())
}

/// Mean of the members' raw logits, built into `g`.
pub fn ensemble_logits_node(g: &mut Graph, models: &[&Classifier], x: NodeId) -> Result<NodeId> {
    check_ensemble(models)?;
    let mut acc = models[0].forward(g, x)?;
    for m in &models[1..] {
        let z = m.forward(g, x)?;
        acc = g.add(acc, z)?;
    }
    g.scale(acc, 1.0 / models.len() as f64)
}

/// Mean of the members' raw logits.
pub fn ensemble_logits(models: &[&Classifier], x: &DenseArray) -> Result<DenseArray> {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let z = ensemble_logits_node(&mut g, models, xi)?;
    Ok(g.value(z).clone())
}

// ---- autoencoder --------------------------------------------------------------

/// Encoder `φ` (image → `[16, S/4, S/4]` latent) and decoder `φ⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderPair {
    pub size: usize,
    pub seed: u64,
    pub epochs: usize,
    pub encoder: Vec<DenseArray>,
    pub decoder: Vec<DenseArray>,
    /// Mean squared per-pixel reconstruction error on the held-out split.
    pub reconstruction_error: f64,
}

fn encoder_layers() -> Vec<Layer> {
    vec![
        Layer::Conv(conv(IMAGE_CHANNELS, 32, 4, 2, 1)),
        Layer::Relu,
        Layer::Conv(conv(32, LATENT_CHANNELS, 4, 2, 1)),
    ]
}

fn decoder_layers() -> Vec<Layer> {
    vec![
        Layer::Deconv(conv(LATENT_CHANNELS, 32, 4, 2, 1)),
        Layer::Relu,
        Layer::Deconv(conv(32, IMAGE_CHANNELS, 4, 2, 1)),
        Layer::Clamp01,
    ]
}

impl AutoencoderPair {
    pub fn init(size: usize, seed: u64) -> Result<Self> {
        if !size.is_multiple_of(4) || size < 8 {
            return Err(Error::InvalidArgument(format!("image size {size} must be a multiple of 4, ≥ 8")));
        }
        let mut r = rng::stream(seed, 0x3000);
        let encoder = init_params(&encoder_layers(), &mut r);
        let mut decoder = init_params(&decoder_layers(), &mut r);
        // start the output bias mid-range so the final clamp passes gradient
        if let Some(b) = decoder.last_mut() {
            *b = DenseArray::full(b.shape(), 0.5);
        }
        Ok(Self {
            size,
            seed,
            epochs: 0,
            encoder,
            decoder,
            reconstruction_error: f64::INFINITY,
        })
    }

    pub fn from_params(size: usize, encoder: Vec<DenseArray>, decoder: Vec<DenseArray>) -> Result<Self> {
        let check = |layers: Vec<Layer>, params: &[DenseArray], what: &str| -> Result<()> {
            let expected: Vec<Vec<usize>> = layers.iter().flat_map(|l| l.param_shapes()).map(|(s, _)| s).collect();
            if expected.len() != params.len() || expected.iter().zip(params).any(|(e, p)| e.as_slice() != p.shape()) {
                return Err(Error::InvalidArgument(format!("{what} parameter shapes do not match")));
            }
            Ok(())
        };
        check(encoder_layers(), &encoder, "encoder")?;
        check(decoder_layers(), &decoder, "decoder")?;
        Ok(Self {
            size,
            seed: 0,
            epochs: 0,
            encoder,
            decoder,
            reconstruction_error: f64::INFINITY,
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [LATENT_CHANNELS, self.size / 4, self.size / 4]
    }

    pub fn encode_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let p: Vec<NodeId> = self.encoder.iter().map(|p| g.leaf(p.clone())).collect();
        apply_layers(&encoder_layers(), g, x, &p)
    }

    /// Decodes a latent node; output is clamped to `[0, 1]`.
    pub fn decode_node(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let p: Vec<NodeId> = self.decoder.iter().map(|p| g.leaf(p.clone())).collect();
        apply_layers(&decoder_layers(), g, z, &p)
    }

    pub fn encode(&self, x: &DenseArray) -> Result<DenseArray> {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let z = self.encode_node(&mut g, xi)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, z: &DenseArray) -> Result<DenseArray> {
        let mut g = Graph::new();
        let zi = g.leaf(z.clone());
        let x = self.decode_node(&mut g, zi)?;
        Ok(g.value(x).clone())
    }

    pub fn reconstruct(&self, x: &DenseArray) -> Result<DenseArray> {
        self.decode(&self.encode(x)?)
    }

    /// Mean squared and mean absolute per-pixel reconstruction error over `idx`.
    pub fn reconstruction_errors(&self, data: &ToyDataset, idx: &[usize]) -> Result<(f64, f64)> {
        let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
        for chunk in idx.chunks(128) {
            let x = data.images.gather_first(chunk);
            let y = self.reconstruct(&x)?;
            for (a, b) in x.data().iter().zip(y.data()) {
                se += (a - b) * (a - b);
                ae += (a - b).abs();
            }
            count += x.len();
        }
        Ok((se / count as f64, ae / count as f64))
    }
}

/// Default reconstruction gate (mean squared per-pixel error).
pub const RECONSTRUCTION_GATE: f64 = 0.02;

/// Trains the autoencoder and fails if the held-out reconstruction error is
/// above [`RECONSTRUCTION_GATE`].
pub fn train_autoencoder(data: &ToyDataset, seed: u64, epochs: usize) -> Result<AutoencoderPair> {
    let pair = train_autoencoder_with(data, seed, &TrainConfig::autoencoder(epochs))?;
    if pair.reconstruction_error > RECONSTRUCTION_GATE {
        return Err(Error::ReconstructionGate {
            error: pair.reconstruction_error,
            gate: RECONSTRUCTION_GATE,
        });
    }
    Ok(pair)
}

/// Trains without applying the gate.
pub fn train_autoencoder_with(data: &ToyDataset, seed: u64, cfg: &TrainConfig) -> Result<AutoencoderPair> {
    data.validate()?;
    let mut pair = AutoencoderPair::init(data.size, seed)?;
    let n_enc = pair.encoder.len();
    let mut params: Vec<DenseArray> = pair.encoder.iter().chain(&pair.decoder).cloned().collect();
    let (enc, dec) = (encoder_layers(), decoder_layers());
    let train = data.indices(Split::Train);
    descend(&mut params, seed, &train, cfg, |g, p, batch| {
        let x = g.leaf(data.images.gather_first(batch));
        let z = apply_layers(&enc, g, x, &p[..n_enc])?;
        let y = apply_layers(&dec, g, z, &p[n_enc..])?;
        let d = g.sub(y, x)?;
        let sq = g.mul(d, d)?;
        g.mean(sq)
    })?;
    pair.decoder = params.split_off(n_enc);
    pair.encoder = params;
    pair.epochs = cfg.epochs;
    pair.reconstruction_error = pair.reconstruction_errors(data, &data.indices(Split::Test))?.0;
    Ok(pair)
}
