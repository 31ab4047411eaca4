use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self as k, ConvGeom};
use super::{ParamId, ParamStore, Result, Scalar, Shape, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle of a recorded node: the owning tape and the node's position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef {
    tape: u64,
    index: usize,
}

enum Op<T: Scalar> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Tensor<T>,
        w: Tensor<T>,
        stride: usize,
        pad: usize,
    },
    PixelShuffle {
        r: usize,
    },
    PermuteChannels {
        perm: Vec<usize>,
    },
    GlobalAvgPool {
        input: Shape,
    },
    Relu {
        out: Tensor<T>,
    },
    LeakyRelu {
        x: Tensor<T>,
        slope: T,
    },
    Sigmoid {
        out: Tensor<T>,
    },
    Add,
    /// `full * factor`, factor either equal-shaped or (N,C,1,1).
    Mul {
        full: Tensor<T>,
        factor: Tensor<T>,
    },
    Scale {
        factor: T,
    },
    Concat {
        channels: Vec<usize>,
    },
    Sum {
        input: Shape,
    },
    MeanAbsDiff {
        pred: Tensor<T>,
        target: Tensor<T>,
    },
    ReflectPad {
        input: Shape,
    },
    Crop {
        input: Shape,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<Option<usize>>,
    shape: Shape,
}

/// Records operations for reverse-mode differentiation.
///
/// Operations on a tape compute their value eagerly. The result is attached
/// to a new node only when recording is on and at least one input already
/// carries a node; everything else is treated as a constant. An inference
/// tape ([`Tape::inference`]) never records.
pub struct Tape<T: Scalar> {
    id: u64,
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that evaluates but never records.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, inputs: Vec<Option<usize>>, shape: Shape) -> NodeRef {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, shape });
        NodeRef {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    /// Registers `t` as a gradient-requiring leaf.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.detach();
        }
        let node = self.push(Op::Leaf { param: None }, Vec::new(), t.shape());
        t.detach().with_node(node)
    }

    /// The value of parameter `id`, as a leaf when it requires gradient.
    /// Repeated calls return the same node, so shared weights accumulate
    /// into one gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        if let Some(t) = self.params.borrow().get(&id) {
            return t.clone();
        }
        let p = store.get(id);
        let t = if self.recording && p.requires_grad {
            let node = self.push(Op::Leaf { param: Some(id) }, Vec::new(), p.value.shape());
            p.value.detach().with_node(node)
        } else {
            p.value.detach()
        };
        self.params.borrow_mut().insert(id, t.clone());
        t
    }

    fn record(
        &self,
        op_name: &'static str,
        value: Vec<T>,
        shape: Shape,
        inputs: &[&Tensor<T>],
        op: impl FnOnce() -> Op<T>,
    ) -> Result<Tensor<T>> {
        let out = Tensor::from_parts(shape, value);
        if !self.recording || inputs.iter().all(|t| t.node().is_none()) {
            return Ok(out);
        }
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            match t.node() {
                Some(n) if n.tape != self.id => {
                    return Err(TensorError::ForeignTape { op: op_name });
                }
                n => ids.push(n.map(|n| n.index)),
            }
        }
        let node = self.push(op(), ids, shape);
        Ok(out.with_node(node))
    }

    pub fn conv2d(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let geom = ConvGeom::new(stride, pad, groups);
        if let Some(b) = bias {
            check_bias("conv2d", b, w.shape().n())?;
        }
        let (v, s) = k::conv2d(x.data(), x.shape(), w.data(), w.shape(), bias.map(|b| b.data()), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record("conv2d", v, s, &inputs, || Op::Conv2d {
            x: x.detach(),
            w: w.detach(),
            geom,
        })
    }

    /// Transposed convolution; `w` has layout (C_in, C_out, k, k).
    pub fn conv_transpose2d(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        if let Some(b) = bias {
            check_bias("conv_transpose2d", b, w.shape().c())?;
        }
        let (v, s) = k::conv_transpose2d(
            x.data(),
            x.shape(),
            w.data(),
            w.shape(),
            bias.map(|b| b.data()),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.record("conv_transpose2d", v, s, &inputs, || Op::ConvTranspose2d {
            x: x.detach(),
            w: w.detach(),
            stride,
            pad,
        })
    }

    pub fn pixel_shuffle(&self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        let s = k::pixel_shuffle_shape(x.shape(), r)?;
        let v = k::pixel_shuffle(x.data(), x.shape(), r);
        self.record("pixel_shuffle", v, s, &[x], || Op::PixelShuffle { r })
    }

    /// Transposes the (groups, C/groups) channel index pair.
    pub fn channel_shuffle(&self, x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
        let s = x.shape();
        s.require_nonempty("channel_shuffle")?;
        if groups == 0 || s.c() % groups != 0 {
            return Err(TensorError::Divisibility {
                op: "channel_shuffle",
                channels: s.c(),
                divisor: groups,
            });
        }
        let perm = k::channel_shuffle_perm(s.c(), groups);
        let v = k::permute_channels(x.data(), s, &perm);
        self.record("channel_shuffle", v, s, &[x], || Op::PermuteChannels { perm })
    }

    pub fn global_avg_pool(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        s.require_nonempty("global_avg_pool")?;
        let v = k::global_avg_pool(x.data(), s);
        self.record("global_avg_pool", v, s.with_hw(1, 1), &[x], || Op::GlobalAvgPool { input: s })
    }

    pub fn relu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let v: Vec<T> = x.data().iter().map(|&a| a.max(T::zero())).collect();
        let out = Tensor::from_parts(x.shape(), v.clone());
        self.record("relu", v, x.shape(), &[x], || Op::Relu { out })
    }

    pub fn leaky_relu(&self, x: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
        let slope = T::from_f64(slope);
        let v = x
            .data()
            .iter()
            .map(|&a| if a > T::zero() { a } else { a * slope })
            .collect();
        self.record("leaky_relu", v, x.shape(), &[x], || Op::LeakyRelu {
            x: x.detach(),
            slope,
        })
    }

    pub fn sigmoid(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let v: Vec<T> = x
            .data()
            .iter()
            .map(|&a| T::one() / (T::one() + (-a).exp()))
            .collect();
        let out = Tensor::from_parts(x.shape(), v.clone());
        self.record("sigmoid", v, x.shape(), &[x], || Op::Sigmoid { out })
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                a: a.shape(),
                b: b.shape(),
            });
        }
        let v = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        self.record("add", v, a.shape(), &[a, b], || Op::Add)
    }

    /// Elementwise product; either operand may be (N,C,1,1) and is then
    /// broadcast over the other's spatial extent.
    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        let (full, factor) = if sa == sb || (sb == sa.with_hw(1, 1)) {
            (a, b)
        } else if sa == sb.with_hw(1, 1) {
            (b, a)
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                a: sa,
                b: sb,
            });
        };
        let v = k::mul_broadcast(full.data(), full.shape(), factor.data(), factor.shape());
        self.record("mul", v, full.shape(), &[full, factor], || Op::Mul {
            full: full.detach(),
            factor: factor.detach(),
        })
    }

    pub fn scale(&self, x: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
        let factor = T::from_f64(factor);
        let v = x.data().iter().map(|&a| a * factor).collect();
        self.record("scale", v, x.shape(), &[x], || Op::Scale { factor })
    }

    pub fn concat_channels(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let raw: Vec<(&[T], Shape)> = parts.iter().map(|t| (t.data(), t.shape())).collect();
        let (v, s) = k::concat_channels(&raw)?;
        let channels = parts.iter().map(|t| t.shape().c()).collect();
        self.record("concat_channels", v, s, parts, || Op::Concat { channels })
    }

    /// Sum of all elements as a (1,1,1,1) tensor.
    pub fn sum(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let v = vec![x.data().iter().copied().sum::<T>()];
        self.record("sum", v, Shape::SCALAR, &[x], || Op::Sum { input: x.shape() })
    }

    /// Mean absolute difference as a (1,1,1,1) tensor.
    pub fn mean_abs_diff(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        if pred.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mean_abs_diff",
                a: pred.shape(),
                b: target.shape(),
            });
        }
        pred.shape().require_nonempty("mean_abs_diff")?;
        let total: T = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let v = vec![total / T::from_f64(pred.numel() as f64)];
        self.record("mean_abs_diff", v, Shape::SCALAR, &[pred, target], || Op::MeanAbsDiff {
            pred: pred.detach(),
            target: target.detach(),
        })
    }

    /// Reflect-pads the bottom/right edges up to (h, w).
    pub fn reflect_pad(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let s = x.shape();
        s.require_nonempty("reflect_pad")?;
        if h < s.h() || w < s.w() {
            return Err(TensorError::Config {
                op: "reflect_pad",
                detail: format!("target {h}x{w} smaller than input {s}"),
            });
        }
        let v = k::reflect_pad(x.data(), s, h, w);
        self.record("reflect_pad", v, s.with_hw(h, w), &[x], || Op::ReflectPad { input: s })
    }

    /// Keeps the top-left (h, w) window.
    pub fn crop(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let s = x.shape();
        if h == 0 || w == 0 || h > s.h() || w > s.w() {
            return Err(TensorError::Config {
                op: "crop",
                detail: format!("window {h}x{w} outside input {s}"),
            });
        }
        let v = k::crop(x.data(), s, h, w);
        self.record("crop", v, s.with_hw(h, w), &[x], || Op::Crop { input: s })
    }

    /// Backpropagates from a scalar loss through every recorded operation,
    /// newest first.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.shape() != Shape::SCALAR {
            return Err(TensorError::NonScalarLoss(loss.shape()));
        }
        let root = match loss.node() {
            Some(n) if n.tape == self.id => n.index,
            _ => return Err(TensorError::NotOnTape),
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        let mut params = Vec::new();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf { param } = node.op {
                if let Some(id) = param {
                    params.push((id, i));
                }
                leaves.insert(i, g);
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward_rule(&node.op, &g, node.shape, &needs);
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(j), Some(ig)) = (slot, ig) {
                    match &mut grads[*j] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                        empty => *empty = Some(ig),
                    }
                }
            }
        }
        params.sort();
        Ok(Gradients {
            tape: self.id,
            leaves,
            params,
        })
    }
}

fn check_bias<T: Scalar>(op: &'static str, b: &Tensor<T>, channels: usize) -> Result<()> {
    if b.numel() != channels {
        return Err(TensorError::ShapeMismatch {
            op,
            a: Shape::new(1, channels, 1, 1),
            b: b.shape(),
        });
    }
    Ok(())
}

fn backward_rule<T: Scalar>(
    op: &Op<T>,
    g: &[T],
    out: Shape,
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf { .. } => Vec::new(),
        Op::Conv2d { x, w, geom } => {
            let gx = want(0).then(|| k::conv2d_grad_input(g, out, w.data(), w.shape(), x.shape(), *geom));
            let gw = want(1)
                .then(|| k::conv2d_grad_weight(g, out, x.data(), x.shape(), w.shape(), *geom));
            let gb = want(2).then(|| k::channel_sums(g, out));
            vec![gx, gw, gb]
        }
        Op::ConvTranspose2d { x, w, stride, pad } => {
            let geom = ConvGeom::new(*stride, *pad, 1);
            let gx = want(0).then(|| {
                k::conv2d(g, out, w.data(), w.shape(), None, geom)
                    .expect("transposed conv adjoint shape")
                    .0
            });
            let gw = want(1)
                .then(|| k::conv2d_grad_weight(x.data(), x.shape(), g, out, w.shape(), geom));
            let gb = want(2).then(|| k::channel_sums(g, out));
            vec![gx, gw, gb]
        }
        Op::PixelShuffle { r } => vec![Some(k::pixel_unshuffle(g, out, *r))],
        Op::PermuteChannels { perm } => {
            vec![Some(k::permute_channels(g, out, &k::inverse_perm(perm)))]
        }
        Op::GlobalAvgPool { input } => {
            let p = input.plane();
            let inv = T::one() / T::from_f64(p as f64);
            let mut gx = vec![T::zero(); input.numel()];
            for (plane, &gv) in gx.chunks_mut(p).zip(g) {
                plane.fill(gv * inv);
            }
            vec![Some(gx)]
        }
        Op::Relu { out } => vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                .collect(),
        )],
        Op::LeakyRelu { x, slope } => vec![Some(
            g.iter()
                .zip(x.data())
                .map(|(&gv, &a)| if a > T::zero() { gv } else { gv * *slope })
                .collect(),
        )],
        Op::Sigmoid { out } => vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(&gv, &y)| gv * y * (T::one() - y))
                .collect(),
        )],
        Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Mul { full, factor } => {
            let gfull = want(0)
                .then(|| k::mul_broadcast(g, out, factor.data(), factor.shape()));
            let gfactor = want(1).then(|| {
                if factor.shape() == out {
                    g.iter().zip(full.data()).map(|(&a, &b)| a * b).collect()
                } else {
                    k::plane_dots(g, full.data(), out)
                }
            });
            vec![gfull, gfactor]
        }
        Op::Scale { factor } => vec![Some(g.iter().map(|&v| v * *factor).collect())],
        Op::Concat { channels } => k::split_channels(g, out, channels)
            .into_iter()
            .enumerate()
            .map(|(i, part)| want(i).then_some(part))
            .collect(),
        Op::Sum { input } => vec![Some(vec![g[0]; input.numel()])],
        Op::MeanAbsDiff { pred, target } => {
            let scale = g[0] / T::from_f64(pred.numel() as f64);
            let d: Vec<T> = pred
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| sign(p - t) * scale)
                .collect();
            let neg = want(1).then(|| d.iter().map(|&v| -v).collect());
            vec![want(0).then_some(d), neg]
        }
        Op::ReflectPad { input } => vec![Some(k::reflect_pad_grad(g, out, *input))],
        Op::Crop { input } => vec![Some(k::crop_grad(g, out, *input))],
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients<T: Scalar> {
    tape: u64,
    leaves: HashMap<usize, Vec<T>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created on the same tape.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<&[T]> {
        let n = t.node()?;
        if n.tape != self.tape {
            return None;
        }
        self.leaves.get(&n.index).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, i)| self.leaves.get(i))
            .map(Vec::as_slice)
    }

    /// Parameter gradients in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|(id, i)| self.leaves.get(i).map(|g| (*id, g.as_slice())))
    }
}
