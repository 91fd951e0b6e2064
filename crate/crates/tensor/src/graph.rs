use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::conv::{self, Conv2dParams, Geometry};
use crate::ops::norm::{self, BatchStats, Layout, NormMode, NormSaved};
use crate::ops::resample;
use crate::ops::spatial::{self, Pad, PadMode};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Berhu(Var, T),
    Sum(Var),
    Mean(Var),
    DiffX(Var),
    DiffY(Var),
    Conv2d {
        input: Var,
        weight: Var,
        geometry: Geometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved<T>,
    },
    Upsample {
        input: Var,
        out: (usize, usize),
    },
    Pad {
        input: Var,
        pad: Pad,
        mode: PadMode,
    },
    Crop {
        input: Var,
        origin: (usize, usize),
        size: (usize, usize),
    },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Berhu(..) => "berhu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::DiffX(..) => "diff_x",
            Op::DiffY(..) => "diff_y",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::Pad { .. } => "pad",
            Op::Crop { .. } => "crop",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Berhu(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::DiffX(a)
            | Op::DiffY(a) => vec![a],
            Op::Conv2d { input, weight, .. } => vec![input, weight],
            Op::BatchNorm { input, gamma, beta, .. } => vec![input, gamma, beta],
            Op::Upsample { input, .. } | Op::Pad { input, .. } | Op::Crop { input, .. } => {
                vec![input]
            }
        }
    }
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape.
///
/// Nodes are appended in evaluation order, so append order is a topological
/// order and backward simply walks the tape in reverse.
#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. It receives gradients iff `tensor.is_learnable()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.is_learnable();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Binds a named model parameter. The value is copied onto the tape; the
    /// gradient can be read back with [`Graph::param_grad`]. Binding the same
    /// name twice returns the existing node.
    pub fn param(&mut self, name: &str, tensor: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let mut value =
            Tensor::from_vec(tensor.shape().clone(), tensor.data().to_vec()).expect("parameter tensor is well formed");
        value.set_requires_grad(tensor.is_learnable());
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.param_var(name).and_then(|v| self.grad(v))
    }

    /// Bound parameters in binding order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_order.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Var> {
        let inputs = op.inputs();
        #[cfg(debug_assertions)]
        if data.iter().any(|v| v.is_nan())
            && inputs
                .iter()
                .all(|i| !self.nodes[i.0].value.data().iter().any(|v| v.is_nan()))
        {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let value = Tensor::from_vec(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.dims().to_vec(),
                right: sb.dims().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).dims().to_vec();
        self.push(shape, data, op)
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).dims().to_vec();
        self.push(shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.map(a, Op::MulScalar(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Reverse Huber: `|x|` when `|x| <= c`, `(x^2 + c^2) / 2c` beyond.
    /// `c` is a constant of the op; `c == 0` degenerates to `|x|`.
    pub fn berhu(&mut self, a: Var, c: T) -> Result<Var> {
        if !(c >= T::zero()) {
            return Err(TensorError::invalid("berhu", "threshold must be non-negative"));
        }
        let two_c = c + c;
        self.map(a, Op::Berhu(a, c), move |x| {
            let ax = x.abs();
            if ax <= c || c == T::zero() {
                ax
            } else {
                (x * x + c * c) / two_c
            }
        })
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push(vec![1], vec![T::from_f64(s)], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push(vec![1], vec![T::from_f64(s / n)], Op::Mean(a))
    }

    fn planes_hw(&self, op: &'static str, a: Var) -> Result<(Vec<usize>, usize, (usize, usize))> {
        let dims = self.shape(a).dims().to_vec();
        let (h, w) = self
            .shape(a)
            .spatial()
            .ok_or_else(|| TensorError::invalid(op, format!("need rank >= 2, got {dims:?}")))?;
        let planes = dims[..dims.len() - 2].iter().product();
        Ok((dims, planes, (h, w)))
    }

    /// Horizontal forward difference over the last dimension.
    pub fn diff_x(&mut self, a: Var) -> Result<Var> {
        let (mut dims, planes, (h, w)) = self.planes_hw("diff_x", a)?;
        if w < 2 {
            return Err(TensorError::invalid("diff_x", "width must be at least 2"));
        }
        let data = spatial::diff_x_forward(self.value(a).data(), planes, (h, w));
        *dims.last_mut().unwrap() = w - 1;
        self.push(dims, data, Op::DiffX(a))
    }

    /// Vertical forward difference over the second-to-last dimension.
    pub fn diff_y(&mut self, a: Var) -> Result<Var> {
        let (mut dims, planes, (h, w)) = self.planes_hw("diff_y", a)?;
        if h < 2 {
            return Err(TensorError::invalid("diff_y", "height must be at least 2"));
        }
        let data = spatial::diff_y_forward(self.value(a).data(), planes, (h, w));
        let r = dims.len();
        dims[r - 2] = h - 1;
        self.push(dims, data, Op::DiffY(a))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, params: Conv2dParams) -> Result<Var> {
        let geometry = Geometry::new(self.shape(input).dims(), self.shape(weight).dims(), params)?;
        let data = conv::forward(&geometry, self.value(input).data(), self.value(weight).data());
        self.push(
            geometry.out_shape(),
            data,
            Op::Conv2d {
                input,
                weight,
                geometry,
            },
        )
    }

    /// Batch normalization over dimension 1 of a `[B, C, ...]` tensor. Returns
    /// the observed batch statistics in train mode.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: &NormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        const OP: &str = "batch_norm";
        let dims = self.shape(input).dims().to_vec();
        let layout =
            Layout::of(&dims).ok_or_else(|| TensorError::invalid(OP, format!("need [B, C, ...], got {dims:?}")))?;
        for p in [gamma, beta] {
            if self.shape(p).dims() != [layout.channels] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    left: dims.clone(),
                    right: self.shape(p).dims().to_vec(),
                });
            }
        }
        match mode {
            NormMode::Train { eps } if *eps <= 0.0 => return Err(TensorError::invalid(OP, "epsilon must be positive")),
            NormMode::Eval { mean, var, eps } => {
                if mean.len() != layout.channels || var.len() != layout.channels {
                    return Err(TensorError::invalid(OP, "running statistics length"));
                }
                if *eps <= 0.0 || var.iter().any(|&v| v < 0.0) {
                    return Err(TensorError::invalid(
                        OP,
                        "variance must be non-negative and epsilon positive",
                    ));
                }
            }
            _ => {}
        }
        let (data, saved, stats) = norm::forward(
            &layout,
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            mode,
        );
        let v = self.push(
            dims,
            data,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
        )?;
        Ok((v, stats))
    }

    /// Bilinear resize of the last two dimensions to `(out_h, out_w)`.
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "upsample_bilinear";
        let (mut dims, planes, (h, w)) = self.planes_hw(OP, input)?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::invalid(OP, "target size must be positive"));
        }
        if out_h < h || out_w < w {
            return Err(TensorError::invalid(
                OP,
                format!("target {out_h}x{out_w} smaller than input {h}x{w}"),
            ));
        }
        let data = resample::bilinear_forward(self.value(input).data(), planes, (h, w), (out_h, out_w));
        let r = dims.len();
        dims[r - 2] = out_h;
        dims[r - 1] = out_w;
        self.push(
            dims,
            data,
            Op::Upsample {
                input,
                out: (out_h, out_w),
            },
        )
    }

    /// Pads the last two dimensions by `(top, bottom, left, right)`.
    pub fn pad2d(&mut self, input: Var, pad: Pad, mode: PadMode) -> Result<Var> {
        let (mut dims, planes, (h, w)) = self.planes_hw("pad", input)?;
        let data = spatial::pad_forward(self.value(input).data(), planes, (h, w), pad, mode);
        let r = dims.len();
        dims[r - 2] = h + pad.0 + pad.1;
        dims[r - 1] = w + pad.2 + pad.3;
        self.push(dims, data, Op::Pad { input, pad, mode })
    }

    /// Crops the last two dimensions to `size` starting at `origin` (row, col).
    pub fn crop2d(&mut self, input: Var, origin: (usize, usize), size: (usize, usize)) -> Result<Var> {
        let (mut dims, planes, (h, w)) = self.planes_hw("crop", input)?;
        if size.0 == 0 || size.1 == 0 || origin.0 + size.0 > h || origin.1 + size.1 > w {
            return Err(TensorError::invalid(
                "crop",
                format!("window {size:?} at {origin:?} outside {h}x{w}"),
            ));
        }
        let data = spatial::crop_forward(self.value(input).data(), planes, (h, w), origin, size);
        let r = dims.len();
        dims[r - 2] = size.0;
        dims[r - 1] = size.1;
        self.push(dims, data, Op::Crop { input, origin, size })
    }

    /// Backpropagates from a scalar root. Leaf gradients accumulate across
    /// calls; intermediate gradients are recomputed each time.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if !shape.is_scalar() {
            return Err(TensorError::NonScalarRoot(shape.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            for (input, contribution) in self.local_grads(id, g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a = *a + c),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn local_grads(&self, id: usize, g: Vec<T>) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let hw = |v: Var| {
            let s = self.shape(v);
            let (h, w) = s.spatial().unwrap();
            (s.numel() / (h * w), (h, w))
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Sub(a, b) => {
                let neg = g.iter().map(|&x| -x).collect();
                vec![(*a, g), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddScalar(a) => vec![(*a, g)],
            Op::MulScalar(a, s) => vec![(*a, g.iter().map(|&x| x * *s).collect())],
            Op::Relu(a) => {
                let out = node.value.data();
                let ga = g
                    .iter()
                    .zip(out)
                    .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Abs(a) => {
                let ga = g.iter().zip(val(*a)).map(|(&x, &y)| x * sign(y)).collect();
                vec![(*a, ga)]
            }
            Op::Square(a) => {
                let ga = g.iter().zip(val(*a)).map(|(&x, &y)| x * (y + y)).collect();
                vec![(*a, ga)]
            }
            Op::Berhu(a, c) => {
                let c = *c;
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&x, &y)| {
                        if y.abs() <= c || c == T::zero() {
                            x * sign(y)
                        } else {
                            x * y / c
                        }
                    })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / T::from_f64(n as f64); n])]
            }
            Op::DiffX(a) => {
                let (planes, size) = hw(*a);
                vec![(*a, spatial::diff_x_backward(&g, planes, size))]
            }
            Op::DiffY(a) => {
                let (planes, size) = hw(*a);
                vec![(*a, spatial::diff_y_backward(&g, planes, size))]
            }
            Op::Conv2d {
                input,
                weight,
                geometry,
            } => {
                let (gx, gw) = conv::backward(geometry, val(*input), val(*weight), &g);
                vec![(*input, gx), (*weight, gw)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let layout = Layout::of(self.shape(*input).dims()).unwrap();
                let (gx, gg, gb) = norm::backward(&layout, saved, val(*gamma), &g);
                vec![(*input, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Upsample { input, out } => {
                let (planes, size) = hw(*input);
                vec![(*input, resample::bilinear_backward(&g, planes, size, *out))]
            }
            Op::Pad { input, pad, mode } => {
                let (planes, size) = hw(*input);
                vec![(*input, spatial::pad_backward(&g, planes, size, *pad, *mode))]
            }
            Op::Crop {
                input,
                origin,
                size: crop,
            } => {
                let (planes, size) = hw(*input);
                vec![(*input, spatial::crop_backward(&g, planes, size, *origin, *crop))]
            }
        }
    }
}

fn sign<T: Element>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(a).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                left: vec![2],
                right: vec![3]
            }
        );
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[0.5, -1.0, 2.0]).requires_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).requires_grad());
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).requires_grad());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        // x feeds three ops; gradient is the sum of the three contributions.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[3.0]).requires_grad());
        let a = g.mul_scalar(x, 2.0).unwrap();
        let b = g.square(x).unwrap();
        let c = g.add(a, b).unwrap();
        let d = g.add(c, x).unwrap();
        let s = g.sum(d).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0 + 6.0 + 1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).requires_grad());
        assert_eq!(g.backward(x), Err(TensorError::NonScalarRoot(vec![2])));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).requires_grad());
        let c = g.constant(t(&[2], &[5.0, 6.0]).requires_grad());
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0, 6.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn param_binding_is_idempotent() {
        let mut g = Graph::<f64>::new();
        let w = t(&[2], &[1.0, 2.0]).requires_grad();
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.param_grad("w").unwrap(), &[1.0, 1.0]);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn nan_from_nan_free_inputs_is_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1], &[f64::INFINITY]));
        let b = g.constant(t(&[1], &[f64::INFINITY]));
        assert_eq!(g.sub(a, b), Err(TensorError::NonFinite { op: "sub" }));
    }

    #[test]
    fn crop_then_pad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 1, 5, 7]));
        let c = g.crop2d(x, (1, 2), (3, 4)).unwrap();
        assert_eq!(g.shape(c).dims(), &[1, 1, 3, 4]);
        let p = g.pad2d(c, (0, 1, 2, 0), PadMode::Replicate).unwrap();
        assert_eq!(g.shape(p).dims(), &[1, 1, 4, 6]);
        assert!(g.crop2d(x, (3, 0), (3, 1)).is_err());
    }
}
