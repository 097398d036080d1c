//! Reverse-mode differentiation over the small operator set used by the
//! localizer network and the cascade.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough bookkeeping to run its adjoint. [`Graph::backward`] walks the
//! tape in reverse and accumulates (`+=`) into the gradient buffers of leaf
//! nodes created with `requires_grad`. Intermediate adjoints are transient,
//! so calling `backward` twice without [`Graph::zero_grad`] doubles every
//! leaf gradient.
//!
//! Tensors are `(channels, nx, ny, nz)` with x fastest.

mod conv;
mod crop;
pub mod gradcheck;
mod pool;
mod readout;

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{Geometry, Volume};

pub use crop::CropSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub dims: [usize; 3],
}

impl Shape {
    pub const fn new(channels: usize, dims: [usize; 3]) -> Self {
        Shape { channels, dims }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, [1, 1, 1])
    }

    pub fn spatial_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.channels * self.spatial_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An immutable buffer with a shape. The data is shared, so cloning is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        Tensor::from_shared(shape, Arc::new(data))
    }

    pub fn from_shared(shape: Shape, data: Arc<Vec<T>>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "buffer of {} elements does not fit shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); shape.len()]),
        }
    }

    pub fn filled(shape: Shape, v: T) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![v; shape.len()]),
        }
    }

    /// A tensor view of a volume's samples, one channel per volume channel.
    pub fn from_volume(vol: &Volume) -> Self {
        Tensor {
            shape: Shape::new(vol.channels(), vol.dims()),
            data: T::share_f32(vol.shared_data()),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn shared(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Tensor::new(self.shape, data)
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    Softmax {
        x: NodeId,
        temperature: T,
    },
    CenterOfMass {
        w: NodeId,
        geometry: Geometry,
    },
    Crop {
        src: NodeId,
        center: NodeId,
        spec: CropSpec,
    },
    Add(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, T),
    SelectChannel {
        x: NodeId,
        channel: usize,
    },
    SqDist {
        x: NodeId,
        target: Vec<T>,
    },
    Mse {
        x: NodeId,
        target: Arc<Vec<T>>,
    },
    Dot {
        x: NodeId,
        weights: Vec<T>,
    },
    WeightedSum(Vec<(NodeId, T)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Tape of differentiable operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input. Its gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let n = value.shape.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: Some(vec![T::zero(); n]),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a parameter leaf; `None` for anything else.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn tensor(shape: Shape, data: Vec<T>) -> Tensor<T> {
        debug_assert_eq!(shape.len(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    /// 3D cross-correlation with zero padding and a cubic `k^3` kernel.
    ///
    /// `w` has shape `(cout * cin, k, k, k)` (input channel fastest after the
    /// taps), `b` has `cout` elements.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        let k = ws.dims[0];
        if ws.dims != [k, k, k] || k == 0 {
            return Err(Error::Shape(format!("conv kernel must be cubic, got {:?}", ws.dims)));
        }
        if k.is_multiple_of(2) {
            return Err(Error::Shape(format!("conv kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        if !ws.channels.is_multiple_of(xs.channels) {
            return Err(Error::Shape(format!(
                "kernel has {} channel pairs, not a multiple of {} input channels",
                ws.channels, xs.channels
            )));
        }
        let cout = ws.channels / xs.channels;
        if bs.len() != cout {
            return Err(Error::Shape(format!("bias has {} elements, expected {cout}", bs.len())));
        }
        let geom = conv::ConvGeom::new(xs, cout, k, stride, pad)?;
        let out = conv::forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let shape = geom.out_shape();
        Ok(self.push(
            Self::tensor(shape, out),
            Op::Conv3d {
                x,
                w,
                b,
                kernel: k,
                stride,
                pad,
            },
            &[x, w, b],
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .map(|&a| if a > T::zero() { a } else { T::zero() })
            .collect();
        let shape = v.shape;
        self.push(Self::tensor(shape, out), Op::Relu(x), &[x])
    }

    /// 2x2x2 max pooling with stride 2. Ties go to the lowest linear index.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.dims.iter().any(|&n| n % 2 != 0) {
            return Err(Error::Shape(format!("maxpool2 needs even dims, got {:?}", s.dims)));
        }
        let (out, argmax, shape) = pool::maxpool2_forward(self.value(x).data(), s);
        Ok(self.push(Self::tensor(shape, out), Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Trilinear 2x upsampling with half-voxel alignment and edge clamping.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let (out, shape) = pool::upsample2_forward(self.value(x).data(), s);
        self.push(Self::tensor(shape, out), Op::Upsample2(x), &[x])
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.dims != sb.dims {
            return Err(Error::Shape(format!("concat of {:?} and {:?}", sa.dims, sb.dims)));
        }
        let mut out = Vec::with_capacity(sa.len() + sb.len());
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let shape = Shape::new(sa.channels + sb.channels, sa.dims);
        Ok(self.push(Self::tensor(shape, out), Op::Concat(a, b), &[a, b]))
    }

    /// Per-channel softmax over all voxels: `exp(x/T) / sum exp(x/T)`.
    pub fn spatial_softmax(&mut self, x: NodeId, temperature: T) -> Result<NodeId> {
        if !(temperature > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be > 0, got {:?}",
                temperature
            )));
        }
        let s = self.shape(x);
        let out = readout::softmax_forward(self.value(x).data(), s, temperature);
        Ok(self.push(Self::tensor(s, out), Op::Softmax { x, temperature }, &[x]))
    }

    /// Weighted mean of voxel-center world coordinates, one point per channel.
    ///
    /// Output shape is `(channels, 3, 1, 1)`.
    pub fn center_of_mass(&mut self, w: NodeId, geometry: Geometry) -> Result<NodeId> {
        geometry.validate()?;
        let s = self.shape(w);
        let out = readout::com_forward(self.value(w).data(), s, &geometry)?;
        Ok(self.push(
            Self::tensor(Shape::new(s.channels, [3, 1, 1]), out),
            Op::CenterOfMass { w, geometry },
            &[w],
        ))
    }

    /// Resample `src` (with geometry `spec.src`) on a patch centered at the
    /// three-element `center` node. Differentiable in both `src` and `center`.
    pub fn crop_resample(&mut self, src: NodeId, center: NodeId, spec: CropSpec) -> Result<NodeId> {
        spec.validate()?;
        let cs = self.shape(center);
        if cs.len() != 3 {
            return Err(Error::Shape(format!("crop center must have 3 elements, got {:?}", cs)));
        }
        let ss = self.shape(src);
        let c = self.value(center).data();
        let out = crop::forward(self.value(src).data(), ss, [c[0], c[1], c[2]], &spec);
        let shape = Shape::new(ss.channels, spec.out_dims);
        Ok(self.push(Self::tensor(shape, out), Op::Crop { src, center, spec }, &[src, center]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", sa, sb)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        Ok(self.push(Self::tensor(sa, out), Op::Add(a, b), &[a, b]))
    }

    pub fn add_const(&mut self, a: NodeId, c: &[T]) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != c.len() {
            return Err(Error::Shape(format!("add_const of {:?} and {} values", s, c.len())));
        }
        let out = self.value(a).data().iter().zip(c).map(|(&p, &q)| p + q).collect();
        Ok(self.push(Self::tensor(s, out), Op::AddConst(a), &[a]))
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> NodeId {
        let s = self.shape(a);
        let out = self.value(a).data().iter().map(|&p| p * k).collect();
        self.push(Self::tensor(s, out), Op::Scale(a, k), &[a])
    }

    pub fn select_channel(&mut self, x: NodeId, channel: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if channel >= s.channels {
            return Err(Error::Shape(format!("channel {channel} of {}", s.channels)));
        }
        let out = self.value(x).channel(channel).to_vec();
        Ok(self.push(
            Self::tensor(Shape::new(1, s.dims), out),
            Op::SelectChannel { x, channel },
            &[x],
        ))
    }

    /// Squared Euclidean distance `sum (x - target)^2` as a scalar.
    pub fn sq_dist(&mut self, x: NodeId, target: &[T]) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != target.len() {
            return Err(Error::Shape(format!("sq_dist of {:?} and {} values", s, target.len())));
        }
        let v: T = self
            .value(x)
            .data()
            .iter()
            .zip(target)
            .map(|(&a, &t)| (a - t) * (a - t))
            .sum();
        Ok(self.push(
            Self::tensor(Shape::scalar(), vec![v]),
            Op::SqDist {
                x,
                target: target.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean squared error against a constant target of the same length.
    pub fn mse(&mut self, x: NodeId, target: Arc<Vec<T>>) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != target.len() {
            return Err(Error::Shape(format!("mse of {:?} and {} values", s, target.len())));
        }
        let n = T::of(s.len() as f64);
        let v: T = self
            .value(x)
            .data()
            .iter()
            .zip(target.iter())
            .map(|(&a, &t)| (a - t) * (a - t))
            .sum::<T>()
            / n;
        Ok(self.push(Self::tensor(Shape::scalar(), vec![v]), Op::Mse { x, target }, &[x]))
    }

    /// Scalar projection `sum x_i * weights_i`.
    pub fn dot_const(&mut self, x: NodeId, weights: &[T]) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != weights.len() {
            return Err(Error::Shape(format!("dot of {:?} and {} weights", s, weights.len())));
        }
        let v = self.value(x).data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        Ok(self.push(
            Self::tensor(Shape::scalar(), vec![v]),
            Op::Dot {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// `sum_i k_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut v = T::zero();
        for &(id, k) in terms {
            let s = self.shape(id);
            if s.len() != 1 {
                return Err(Error::Shape(format!("weighted_sum term {:?} is not scalar", s)));
            }
            v += k * self.value(id).data()[0];
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Self::tensor(Shape::scalar(), vec![v]),
            Op::WeightedSum(terms.to_vec()),
            &ids,
        ))
    }

    /// Accumulate d(root)/d(leaf) into every trainable leaf.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.shape(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                if let Some(acc) = self.nodes[id].grad.as_mut() {
                    acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d);
                }
                continue;
            }
            self.backprop_node(id, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv3d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
            } => {
                let xs = self.shape(x);
                let cout = self.shape(w).channels / xs.channels;
                let geom = conv::ConvGeom::new(xs, cout, kernel, stride, pad).expect("validated in forward");
                let want = conv::Wants {
                    x: self.requires_grad(x),
                    w: self.requires_grad(w),
                    b: self.requires_grad(b),
                };
                let grads = conv::backward(&geom, self.value(x).data(), self.value(w).data(), g, want);
                if let Some(gx) = grads.x {
                    self.accumulate(adj, x, &gx);
                }
                if let Some(gw) = grads.w {
                    self.accumulate(adj, w, &gw);
                }
                if let Some(gb) = grads.b {
                    self.accumulate(adj, b, &gb);
                }
            }
            &Op::Relu(x) => {
                if let Some(slot) = self.slot(adj, x) {
                    for ((s, &d), &v) in slot.iter_mut().zip(g).zip(self.value(x).data()) {
                        if v > T::zero() {
                            *s += d;
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let xs = self.shape(*x);
                if let Some(slot) = self.slot(adj, *x) {
                    pool::maxpool2_backward(slot, g, argmax, xs, node.value.shape);
                }
            }
            &Op::Upsample2(x) => {
                let xs = self.shape(x);
                if let Some(slot) = self.slot(adj, x) {
                    let gx = pool::upsample2_backward(g, xs);
                    slot.iter_mut().zip(&gx).for_each(|(s, &d)| *s += d);
                }
            }
            &Op::Concat(a, b) => {
                let na = self.shape(a).len();
                self.accumulate(adj, a, &g[..na]);
                self.accumulate(adj, b, &g[na..]);
            }
            &Op::Softmax { x, temperature } => {
                let s = node.value.shape;
                if let Some(slot) = self.slot(adj, x) {
                    readout::softmax_backward(slot, g, node.value.data(), s, temperature);
                }
            }
            Op::CenterOfMass { w, geometry } => {
                let s = self.shape(*w);
                if let Some(slot) = self.slot(adj, *w) {
                    readout::com_backward(slot, g, self.value(*w).data(), node.value.data(), s, geometry);
                }
            }
            Op::Crop { src, center, spec } => {
                let ss = self.shape(*src);
                let c = self.value(*center).data();
                let (gsrc, gc) = crop::backward(
                    self.value(*src).data(),
                    ss,
                    [c[0], c[1], c[2]],
                    spec,
                    g,
                    self.requires_grad(*src),
                    self.requires_grad(*center),
                );
                if let Some(gs) = gsrc {
                    self.accumulate(adj, *src, &gs);
                }
                if let Some(gc) = gc {
                    self.accumulate(adj, *center, &gc);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(adj, a, g);
                self.accumulate(adj, b, g);
            }
            &Op::AddConst(a) => self.accumulate(adj, a, g),
            &Op::Scale(a, k) => {
                if let Some(slot) = self.slot(adj, a) {
                    slot.iter_mut().zip(g).for_each(|(s, &d)| *s += k * d);
                }
            }
            &Op::SelectChannel { x, channel } => {
                let n = self.shape(x).spatial_len();
                if let Some(slot) = self.slot(adj, x) {
                    slot[channel * n..(channel + 1) * n]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, &d)| *s += d);
                }
            }
            Op::SqDist { x, target } => {
                let two = T::of(2.0) * g[0];
                if let Some(slot) = self.slot(adj, *x) {
                    for ((s, &v), &t) in slot.iter_mut().zip(self.value(*x).data()).zip(target) {
                        *s += two * (v - t);
                    }
                }
            }
            Op::Mse { x, target } => {
                let k = T::of(2.0) * g[0] / T::of(target.len() as f64);
                if let Some(slot) = self.slot(adj, *x) {
                    for ((s, &v), &t) in slot.iter_mut().zip(self.value(*x).data()).zip(target.iter()) {
                        *s += k * (v - t);
                    }
                }
            }
            Op::Dot { x, weights } => {
                if let Some(slot) = self.slot(adj, *x) {
                    slot.iter_mut().zip(weights).for_each(|(s, &w)| *s += w * g[0]);
                }
            }
            Op::WeightedSum(terms) => {
                for &(t, k) in terms {
                    if let Some(slot) = self.slot(adj, t) {
                        slot[0] += k * g[0];
                    }
                }
            }
        }
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        if !self.requires_grad(id) {
            return None;
        }
        let n = self.shape(id).len();
        Some(adj[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn accumulate(&self, adj: &mut [Option<Vec<T>>], id: NodeId, g: &[T]) {
        if let Some(slot) = self.slot(adj, id) {
            slot.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
        }
    }
}
