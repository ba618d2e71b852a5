use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use crate::{math, DenseArray, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a node together with its input references.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, pad: usize },
    ConvTranspose2d { input: NodeId, kernel: NodeId, stride: usize, pad: usize },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Exp(NodeId),
    Scale(NodeId, f64),
    /// Broadcast a `[C]` or `[N, C]` vector over a tensor whose axis 1 is the channel axis.
    BroadcastChannels { vector: NodeId, shape: Vec<usize> },
    ChannelMean(NodeId),
    ChannelStd(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    L2Distance(NodeId, NodeId),
    ResizeBilinear { input: NodeId, height: usize, width: usize },
    ZeroPad { input: NodeId, top: usize, left: usize, height: usize, width: usize },
    Sum(NodeId),
    Mean(NodeId),
    MaxClass(NodeId),
    PickClass { logits: NodeId, labels: Vec<usize> },
    KthLargestExcluding { logits: NodeId, labels: Vec<usize>, k: usize },
    AvgPool2d { input: NodeId, k: usize },
    MaxPool2d { input: NodeId, k: usize },
    Reshape { input: NodeId, shape: Vec<usize> },
    Clamp { input: NodeId, lo: f64, hi: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Exp(_) => "exp",
            Op::Scale(..) => "scale",
            Op::BroadcastChannels { .. } => "broadcast_channels",
            Op::ChannelMean(_) => "channel_mean",
            Op::ChannelStd(_) => "channel_std",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::L2Distance(..) => "l2_distance",
            Op::ResizeBilinear { .. } => "resize_bilinear",
            Op::ZeroPad { .. } => "zero_pad",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaxClass(_) => "max_class",
            Op::PickClass { .. } => "pick_class",
            Op::KthLargestExcluding { .. } => "kth_largest_excluding",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Reshape { .. } => "reshape",
            Op::Clamp { .. } => "clamp",
        }
    }

    fn inputs(&self) -> [Option<NodeId>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::L2Distance(a, b) => {
                [Some(a), Some(b)]
            }
            Op::Conv2d { input, kernel, .. } | Op::ConvTranspose2d { input, kernel, .. } => {
                [Some(input), Some(kernel)]
            }
            Op::Relu(a) | Op::Exp(a) | Op::Scale(a, _) | Op::ChannelMean(a) | Op::ChannelStd(a) => [Some(a), None],
            Op::Sum(a) | Op::Mean(a) | Op::MaxClass(a) => [Some(a), None],
            Op::BroadcastChannels { vector, .. } => [Some(vector), None],
            Op::SoftmaxCrossEntropy { logits, .. }
            | Op::PickClass { logits, .. }
            | Op::KthLargestExcluding { logits, .. } => [Some(logits), None],
            Op::ResizeBilinear { input, .. }
            | Op::ZeroPad { input, .. }
            | Op::AvgPool2d { input, .. }
            | Op::MaxPool2d { input, .. }
            | Op::Reshape { input, .. }
            | Op::Clamp { input, .. } => [Some(input), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseArray,
}

/// A define-by-run computation graph.
///
/// Building a node evaluates it immediately, so shape errors surface where the
/// node is created. [`Graph::evaluate`] replays the recorded operations after
/// leaves have been rebound, and [`Graph::gradient`] runs the reverse sweep
/// over the cached forward values.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(node: usize, op: &'static str, detail: alloc::string::String) -> Error {
    Error::ShapeMismatch { node, op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: DenseArray) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Rebinds a leaf. The shape must not change.
    pub fn bind(&mut self, id: NodeId, value: DenseArray) -> Result<()> {
        let node = self.nodes.get_mut(id.0).ok_or(Error::UnknownNode(id.0))?;
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::NotALeaf(id.0));
        }
        if node.value.shape() != value.shape() {
            return Err(mismatch(
                id.0,
                "leaf",
                format!("rebinding {:?} with {:?}", node.value.shape(), value.shape()),
            ));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { context: "Graph::bind" });
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        let value = self.forward(id, &op)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(id))
    }

    /// Recomputes every non-leaf node up to and including `root` from the
    /// current leaf bindings and returns the root value.
    pub fn evaluate(&mut self, root: NodeId) -> Result<&DenseArray> {
        self.node(root)?;
        for i in 0..=root.0 {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.forward(i, &self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(&self.nodes[root.0].value)
    }

    // ---- builders -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.push(Op::Conv2d { input, kernel, stride, pad })
    }

    pub fn conv_transpose2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.push(Op::ConvTranspose2d { input, kernel, stride, pad })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn broadcast_channels(&mut self, vector: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::BroadcastChannels {
            vector,
            shape: shape.to_vec(),
        })
    }

    /// Adds a per-channel bias vector to `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.node(x)?.value.shape().to_vec();
        let b = self.broadcast_channels(bias, &shape)?;
        self.add(x, b)
    }

    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelMean(x))
    }

    pub fn channel_std(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelStd(x))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    pub fn l2_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::L2Distance(a, b))
    }

    pub fn resize_bilinear(&mut self, input: NodeId, height: usize, width: usize) -> Result<NodeId> {
        self.push(Op::ResizeBilinear { input, height, width })
    }

    pub fn zero_pad(&mut self, input: NodeId, top: usize, left: usize, height: usize, width: usize) -> Result<NodeId> {
        self.push(Op::ZeroPad {
            input,
            top,
            left,
            height,
            width,
        })
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    pub fn max_class(&mut self, logits: NodeId) -> Result<NodeId> {
        self.push(Op::MaxClass(logits))
    }

    pub fn pick_class(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::PickClass {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Per row, the `k`-th largest logit among classes other than the label.
    pub fn kth_largest_excluding(&mut self, logits: NodeId, labels: &[usize], k: usize) -> Result<NodeId> {
        self.push(Op::KthLargestExcluding {
            logits,
            labels: labels.to_vec(),
            k,
        })
    }

    pub fn avg_pool2d(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        self.push(Op::AvgPool2d { input, k })
    }

    pub fn max_pool2d(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        self.push(Op::MaxPool2d { input, k })
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape {
            input,
            shape: shape.to_vec(),
        })
    }

    /// Flattens `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.node(input)?.value.shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    /// Clamps into `[lo, hi]`; the adjoint passes through inside the range.
    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.push(Op::Clamp { input, lo, hi })
    }

    // ---- forward --------------------------------------------------------

    fn forward(&self, id: usize, op: &Op) -> Result<DenseArray> {
        let name = op.name();
        let v = |n: NodeId| -> Result<&DenseArray> {
            self.nodes
                .get(n.0)
                .map(|node| &node.value)
                .ok_or_else(|| mismatch(id, name, format!("input {} does not exist", n.0)))
        };
        let out = match op {
            Op::Leaf => return Err(Error::InvalidArgument(format!("node {id}: leaves are not recomputed"))),
            Op::MatMul(a, b) => {
                let (a, b) = (v(*a)?, v(*b)?);
                let (sa, sb) = (a.shape(), b.shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(mismatch(id, name, format!("{sa:?} x {sb:?}")));
                }
                DenseArray::from_parts(
                    vec![sa[0], sb[1]],
                    kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]),
                )
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                let (x, k) = (v(*input)?, v(*kernel)?);
                let g = self.conv_geom(id, name, x.shape(), k.shape(), *stride, *pad, false)?;
                DenseArray::from_parts(vec![g.n, g.cs, g.hs, g.ws], kernels::conv2d(x.data(), k.data(), &g))
            }
            Op::ConvTranspose2d { input, kernel, stride, pad } => {
                let (x, k) = (v(*input)?, v(*kernel)?);
                let g = self.conv_geom(id, name, x.shape(), k.shape(), *stride, *pad, true)?;
                DenseArray::from_parts(
                    vec![g.n, g.cl, g.hl, g.wl],
                    kernels::conv_transpose2d(x.data(), k.data(), &g),
                )
            }
            Op::Relu(a) => v(*a)?.map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(*a)?, v(*b)?);
                if a.shape() != b.shape() {
                    return Err(mismatch(id, name, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                match op {
                    Op::Add(..) => a.zip_map(b, |x, y| x + y)?,
                    Op::Sub(..) => a.zip_map(b, |x, y| x - y)?,
                    _ => a.zip_map(b, |x, y| x * y)?,
                }
            }
            Op::Exp(a) => v(*a)?.map(math::exp),
            Op::Scale(a, f) => v(*a)?.map(|x| x * f),
            Op::BroadcastChannels { vector, shape } => {
                let vec_ = v(*vector)?;
                let idx = broadcast_index(id, name, vec_.shape(), shape)?;
                let d = vec_.data();
                DenseArray::from_parts(shape.clone(), idx.map(|j| d[j]).collect())
            }
            Op::ChannelMean(a) | Op::ChannelStd(a) => {
                let x = v(*a)?;
                let s = x.shape();
                if s.len() < 3 {
                    return Err(mismatch(id, name, format!("need [N, C, ...], got {s:?}")));
                }
                let inner: usize = s[2..].iter().product();
                let (mean, std) = kernels::channel_stats(x.data(), s[0] * s[1], inner);
                let data = if matches!(op, Op::ChannelMean(_)) { mean } else { std };
                DenseArray::from_parts(vec![s[0], s[1]], data)
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let z = v(*logits)?;
                let (n, c) = self.check_labels(id, name, z, labels)?;
                let mut total = 0.0;
                for (i, &y) in labels.iter().enumerate() {
                    let row = &z.data()[i * c..(i + 1) * c];
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + math::ln(row.iter().map(|&r| math::exp(r - m)).sum::<f64>());
                    total += lse - row[y];
                }
                DenseArray::scalar(total / n as f64)
            }
            Op::L2Distance(a, b) => {
                let (a, b) = (v(*a)?, v(*b)?);
                if a.shape() != b.shape() {
                    return Err(mismatch(id, name, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let ss: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                DenseArray::scalar(math::sqrt(ss))
            }
            Op::ResizeBilinear { input, height, width } => {
                let x = v(*input)?;
                let (planes, h, w) = self.planes(id, name, x.shape())?;
                if *height == 0 || *width == 0 {
                    return Err(mismatch(id, name, format!("empty target {height}x{width}")));
                }
                let mut shape = x.shape().to_vec();
                shape[2] = *height;
                shape[3] = *width;
                DenseArray::from_parts(shape, kernels::resize_bilinear(x.data(), planes, h, w, *height, *width))
            }
            Op::ZeroPad { input, top, left, height, width } => {
                let x = v(*input)?;
                let (planes, h, w) = self.planes(id, name, x.shape())?;
                if top + h > *height || left + w > *width {
                    return Err(mismatch(
                        id,
                        name,
                        format!("{h}x{w} at ({top},{left}) exceeds {height}x{width}"),
                    ));
                }
                let mut shape = x.shape().to_vec();
                shape[2] = *height;
                shape[3] = *width;
                DenseArray::from_parts(
                    shape,
                    kernels::zero_pad(x.data(), planes, h, w, *top, *left, *height, *width),
                )
            }
            Op::Sum(a) => DenseArray::scalar(v(*a)?.sum()),
            Op::Mean(a) => {
                let x = v(*a)?;
                DenseArray::scalar(x.sum() / x.len() as f64)
            }
            Op::MaxClass(a) => {
                let z = v(*a)?;
                let (n, c) = self.rows(id, name, z)?;
                let data = (0..n)
                    .map(|i| {
                        let row = &z.data()[i * c..(i + 1) * c];
                        row[math::argmax(row)]
                    })
                    .collect();
                DenseArray::from_parts(vec![n], data)
            }
            Op::PickClass { logits, labels } => {
                let z = v(*logits)?;
                let (n, c) = self.check_labels(id, name, z, labels)?;
                DenseArray::from_parts(vec![n], labels.iter().enumerate().map(|(i, &y)| z.data()[i * c + y]).collect())
            }
            Op::KthLargestExcluding { logits, labels, k } => {
                let z = v(*logits)?;
                let (n, c) = self.check_labels(id, name, z, labels)?;
                if *k == 0 || *k > c - 1 {
                    return Err(mismatch(id, name, format!("k = {k} with {c} classes")));
                }
                let data = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| {
                        let row = &z.data()[i * c..(i + 1) * c];
                        row[kernels::kth_largest_excluding(row, y, *k)]
                    })
                    .collect();
                DenseArray::from_parts(vec![n], data)
            }
            Op::AvgPool2d { input, k } | Op::MaxPool2d { input, k } => {
                let x = v(*input)?;
                let (planes, h, w) = self.planes(id, name, x.shape())?;
                if *k == 0 || h % k != 0 || w % k != 0 {
                    return Err(mismatch(id, name, format!("{h}x{w} not divisible by {k}")));
                }
                let (data, _) = kernels::pool2d(x.data(), planes, h, w, *k, matches!(op, Op::MaxPool2d { .. }));
                let mut shape = x.shape().to_vec();
                shape[2] = h / k;
                shape[3] = w / k;
                DenseArray::from_parts(shape, data)
            }
            Op::Reshape { input, shape } => {
                let x = v(*input)?;
                x.clone()
                    .reshape(shape)
                    .map_err(|_| mismatch(id, name, format!("{:?} -> {shape:?}", x.shape())))?
            }
            Op::Clamp { input, lo, hi } => v(*input)?.map(|x| x.clamp(*lo, *hi)),
        };
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_geom(
        &self,
        id: usize,
        name: &'static str,
        xs: &[usize],
        ks: &[usize],
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        if xs.len() != 4 || ks.len() != 4 || stride == 0 {
            return Err(mismatch(id, name, format!("input {xs:?}, kernel {ks:?}, stride {stride}")));
        }
        if xs[1] != ks[if transposed { 0 } else { 1 }] {
            return Err(mismatch(id, name, format!("channel mismatch: input {xs:?}, kernel {ks:?}")));
        }
        if transposed {
            let hl = (xs[2] - 1) * stride + ks[2];
            let wl = (xs[3] - 1) * stride + ks[3];
            if hl <= 2 * pad || wl <= 2 * pad {
                return Err(mismatch(id, name, format!("padding {pad} too large")));
            }
            Ok(ConvGeom {
                n: xs[0],
                cl: ks[1],
                hl: hl - 2 * pad,
                wl: wl - 2 * pad,
                cs: xs[1],
                hs: xs[2],
                ws: xs[3],
                kh: ks[2],
                kw: ks[3],
                stride,
                pad,
            })
        } else {
            let hs = ConvGeom::conv_out(xs[2], ks[2], stride, pad);
            let ws = ConvGeom::conv_out(xs[3], ks[3], stride, pad);
            match (hs, ws) {
                (Some(hs), Some(ws)) => Ok(ConvGeom {
                    n: xs[0],
                    cl: xs[1],
                    hl: xs[2],
                    wl: xs[3],
                    cs: ks[0],
                    hs,
                    ws,
                    kh: ks[2],
                    kw: ks[3],
                    stride,
                    pad,
                }),
                _ => Err(mismatch(id, name, format!("kernel {ks:?} larger than padded input {xs:?}"))),
            }
        }
    }

    fn planes(&self, id: usize, name: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
        if s.len() != 4 {
            return Err(mismatch(id, name, format!("need [N, C, H, W], got {s:?}")));
        }
        Ok((s[0] * s[1], s[2], s[3]))
    }

    fn rows(&self, id: usize, name: &'static str, z: &DenseArray) -> Result<(usize, usize)> {
        match z.shape() {
            [n, c] => Ok((*n, *c)),
            s => Err(mismatch(id, name, format!("need [N, C], got {s:?}"))),
        }
    }

    fn check_labels(&self, id: usize, name: &'static str, z: &DenseArray, labels: &[usize]) -> Result<(usize, usize)> {
        let (n, c) = self.rows(id, name, z)?;
        if labels.len() != n || labels.iter().any(|&y| y >= c) {
            return Err(mismatch(id, name, format!("{} labels for logits {:?}", labels.len(), z.shape())));
        }
        Ok((n, c))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Gradients of a scalar `root` with respect to each leaf in `wrt`.
    ///
    /// Leaves the root does not depend on receive zero arrays.
    pub fn gradient(&self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<DenseArray>> {
        let root_node = self.node(root)?;
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_node.value.shape().to_vec(),
            });
        }
        for &w in wrt {
            if !matches!(self.node(w)?.op, Op::Leaf) {
                return Err(Error::NotALeaf(w.0));
            }
        }
        let upto = root.0 + 1;
        let mut needs = vec![false; upto];
        for &w in wrt {
            if w.0 < upto {
                needs[w.0] = true;
            }
        }
        for i in 0..upto {
            let [a, b] = self.nodes[i].op.inputs();
            needs[i] |= a.is_some_and(|a| needs[a.0]) || b.is_some_and(|b| needs[b.0]);
        }
        let mut adj: Vec<Option<DenseArray>> = vec![None; upto];
        adj[root.0] = Some(DenseArray::full(root_node.value.shape(), 1.0));
        for i in (0..upto).rev() {
            if !needs[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let [a, b] = self.nodes[i].op.inputs();
            let need_a = a.is_some_and(|a| needs[a.0]);
            let need_b = b.is_some_and(|b| needs[b.0]);
            let (ga, gb) = self.backward(i, &g, need_a, need_b);
            for (input, grad) in [(a, ga), (b, gb)] {
                if let (Some(input), Some(grad)) = (input, grad) {
                    match &mut adj[input.0] {
                        Some(acc) => {
                            for (x, y) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *x += y;
                            }
                        }
                        slot @ None => *slot = Some(grad),
                    }
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                if w.0 < upto {
                    adj[w.0].clone()
                } else {
                    None
                }
                .unwrap_or_else(|| DenseArray::zeros(self.nodes[w.0].value.shape()))
            })
            .collect())
    }

    fn backward(&self, i: usize, g: &DenseArray, need_a: bool, need_b: bool) -> (Option<DenseArray>, Option<DenseArray>) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let val = |n: NodeId| &self.nodes[n.0].value;
        let like = |n: NodeId, data: Vec<f64>| DenseArray::from_parts(val(n).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => (None, None),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                (
                    need_a.then(|| like(*a, kernels::matmul_grad_a(gd, bv.data(), n, k, m))),
                    need_b.then(|| like(*b, kernels::matmul_grad_b(gd, av.data(), n, k, m))),
                )
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                let (x, k) = (val(*input), val(*kernel));
                let geom = self
                    .conv_geom(i, "conv2d", x.shape(), k.shape(), *stride, *pad, false)
                    .expect("validated on construction");
                (
                    need_a.then(|| like(*input, kernels::conv2d_grad_input(gd, k.data(), &geom))),
                    need_b.then(|| like(*kernel, kernels::conv2d_grad_kernel(gd, x.data(), &geom))),
                )
            }
            Op::ConvTranspose2d { input, kernel, stride, pad } => {
                let (x, k) = (val(*input), val(*kernel));
                let geom = self
                    .conv_geom(i, "conv_transpose2d", x.shape(), k.shape(), *stride, *pad, true)
                    .expect("validated on construction");
                (
                    need_a.then(|| like(*input, kernels::conv_transpose2d_grad_input(gd, k.data(), &geom))),
                    need_b.then(|| like(*kernel, kernels::conv_transpose2d_grad_kernel(gd, x.data(), &geom))),
                )
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                (Some(like(*a, d)), None)
            }
            Op::Add(..) => (need_a.then(|| g.clone()), need_b.then(|| g.clone())),
            Op::Sub(..) => (need_a.then(|| g.clone()), need_b.then(|| g.map(|x| -x))),
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                (
                    need_a.then(|| g.zip_map(bv, |g, y| g * y).expect("same shape")),
                    need_b.then(|| g.zip_map(av, |g, x| g * x).expect("same shape")),
                )
            }
            Op::Exp(_) => (Some(g.zip_map(out, |g, e| g * e).expect("same shape")), None),
            Op::Scale(_, f) => (Some(g.map(|x| x * f)), None),
            Op::BroadcastChannels { vector, shape } => {
                let vs = val(*vector).shape();
                let mut d = vec![0.0; val(*vector).len()];
                let idx = broadcast_index(i, "broadcast_channels", vs, shape).expect("validated on construction");
                for (j, gv) in idx.zip(gd) {
                    d[j] += gv;
                }
                (Some(like(*vector, d)), None)
            }
            Op::ChannelMean(a) => {
                let s = val(*a).shape();
                let inner: usize = s[2..].iter().product();
                let inv = 1.0 / inner as f64;
                let d = (0..val(*a).len()).map(|j| gd[j / inner] * inv).collect();
                (Some(like(*a, d)), None)
            }
            Op::ChannelStd(a) => {
                let x = val(*a);
                let s = x.shape();
                let inner: usize = s[2..].iter().product();
                let (mean, _) = kernels::channel_stats(x.data(), s[0] * s[1], inner);
                let inv = 1.0 / inner as f64;
                let d = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let grp = j / inner;
                        let sigma = out.data()[grp];
                        if sigma == 0.0 {
                            0.0
                        } else {
                            gd[grp] * (v - mean[grp]) * inv / sigma
                        }
                    })
                    .collect();
                (Some(like(*a, d)), None)
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let z = val(*logits);
                let c = z.shape()[1];
                let n = labels.len();
                let scale = gd[0] / n as f64;
                let mut d = Vec::with_capacity(z.len());
                for (r, &y) in labels.iter().enumerate() {
                    let p = math::softmax(&z.data()[r * c..(r + 1) * c]);
                    d.extend(p.iter().enumerate().map(|(j, &pj)| scale * (pj - if j == y { 1.0 } else { 0.0 })));
                }
                (Some(like(*logits, d)), None)
            }
            Op::L2Distance(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let dist = out.item();
                let diff = if dist == 0.0 {
                    DenseArray::zeros(av.shape())
                } else {
                    av.zip_map(bv, |x, y| gd[0] * (x - y) / dist).expect("same shape")
                };
                let neg = need_b.then(|| diff.map(|x| -x));
                (need_a.then_some(diff), neg)
            }
            Op::ResizeBilinear { input, height, width } => {
                let s = val(*input).shape();
                let d = kernels::resize_bilinear_grad(gd, s[0] * s[1], s[2], s[3], *height, *width);
                (Some(like(*input, d)), None)
            }
            Op::ZeroPad { input, top, left, height, width } => {
                let s = val(*input).shape();
                let d = kernels::zero_pad_grad(gd, s[0] * s[1], s[2], s[3], *top, *left, *height, *width);
                (Some(like(*input, d)), None)
            }
            Op::Sum(a) => (Some(DenseArray::full(val(*a).shape(), gd[0])), None),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                (Some(DenseArray::full(val(*a).shape(), gd[0] / n)), None)
            }
            Op::MaxClass(a) => {
                let z = val(*a);
                let c = z.shape()[1];
                let mut d = vec![0.0; z.len()];
                for r in 0..z.shape()[0] {
                    let j = math::argmax(&z.data()[r * c..(r + 1) * c]);
                    d[r * c + j] = gd[r];
                }
                (Some(like(*a, d)), None)
            }
            Op::PickClass { logits, labels } => {
                let z = val(*logits);
                let c = z.shape()[1];
                let mut d = vec![0.0; z.len()];
                for (r, &y) in labels.iter().enumerate() {
                    d[r * c + y] = gd[r];
                }
                (Some(like(*logits, d)), None)
            }
            Op::KthLargestExcluding { logits, labels, k } => {
                let z = val(*logits);
                let c = z.shape()[1];
                let mut d = vec![0.0; z.len()];
                for (r, &y) in labels.iter().enumerate() {
                    let j = kernels::kth_largest_excluding(&z.data()[r * c..(r + 1) * c], y, *k);
                    d[r * c + j] = gd[r];
                }
                (Some(like(*logits, d)), None)
            }
            Op::AvgPool2d { input, k } => {
                let s = val(*input).shape();
                (Some(like(*input, kernels::avg_pool2d_grad(gd, s[0] * s[1], s[2], s[3], *k))), None)
            }
            Op::MaxPool2d { input, k } => {
                let x = val(*input);
                let s = x.shape();
                let (_, arg) = kernels::pool2d(x.data(), s[0] * s[1], s[2], s[3], *k, true);
                let mut d = vec![0.0; x.len()];
                for (o, &src) in arg.iter().enumerate() {
                    d[src] += gd[o];
                }
                (Some(like(*input, d)), None)
            }
            Op::Reshape { input, .. } => (Some(like(*input, gd.to_vec())), None),
            Op::Clamp { input, lo, hi } => {
                let x = val(*input).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                (Some(like(*input, d)), None)
            }
        }
    }
}

/// Maps each flat index of `shape` to the index of the broadcast vector.
fn broadcast_index<'a>(
    id: usize,
    name: &'static str,
    vs: &[usize],
    shape: &'a [usize],
) -> Result<impl Iterator<Item = usize> + 'a> {
    if shape.len() < 2 {
        return Err(mismatch(id, name, format!("target {shape:?} has no channel axis")));
    }
    let (n, c) = (shape[0], shape[1]);
    let per_sample = match vs {
        [vc] if *vc == c => false,
        [vn, vc] if *vn == n && *vc == c => true,
        _ => return Err(mismatch(id, name, format!("vector {vs:?} does not broadcast to {shape:?}"))),
    };
    let inner: usize = shape[2..].iter().product();
    let total: usize = shape.iter().product();
    Ok((0..total).map(move |j| {
        let grp = j / inner;
        if per_sample {
            grp
        } else {
            grp % c
        }
    }))
}
