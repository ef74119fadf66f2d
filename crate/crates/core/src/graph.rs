//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every operation is evaluated eagerly and recorded on the [`Graph`]. Leaves are
//! named inputs, constants, or parameters grouped by layer. [`Graph::backward`]
//! walks the tape once in reverse and [`Gradients::layer_map`] flattens the
//! parameter gradients into one vector per layer.
//!
//! ```
//! use emoshield::graph::Graph;
//! use emoshield::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input("x", Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! assert_eq!(g.value(y).item(), 9.0);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input(String),
    Param { layer: usize, name: String },
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Tanh(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    Dot(Var, Var),
    RowNorms(Var),
    NormalizeRows(Var),
    RowDot(Var, Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize, usize),
    Reshape(Var, Vec<usize>),
    MulScalar(Var, Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param { .. } => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Tanh(_) => "tanh",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::L2Norm(_) => "l2norm",
            Op::Dot(..) => "dot",
            Op::RowNorms(_) => "row_norms",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::RowDot(..) => "row_dot",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Reshape(..) => "reshape",
            Op::MulScalar(..) => "mul_scalar",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input(_) | Op::Param { .. } | Op::Const => vec![],
            Op::Tanh(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2Norm(a)
            | Op::RowNorms(a)
            | Op::NormalizeRows(a)
            | Op::Scale(a, _)
            | Op::SliceRows(a, _, _)
            | Op::Reshape(a, _) => vec![*a],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Dot(a, b)
            | Op::RowDot(a, b)
            | Op::ConcatCols(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

#[derive(Clone, Debug)]
struct LayerGroup {
    id: String,
    params: Vec<(String, Var)>,
}

/// Recorded computation with parameter leaves grouped by layer.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    layers: Vec<LayerGroup>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            layers: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Layer identifiers in registration order.
    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.id.as_str())
    }

    fn push_leaf(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named differentiable input.
    pub fn input(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.push_leaf(Op::Input(name.to_string()), value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Op::Const, value, false)
    }

    /// Trainable leaf belonging to layer `layer`.
    pub fn param(&mut self, layer: &str, name: &str, value: Tensor<T>) -> Result<Var> {
        let li = match self.layers.iter().position(|l| l.id == layer) {
            Some(i) => i,
            None => {
                self.layers.push(LayerGroup {
                    id: layer.to_string(),
                    params: Vec::new(),
                });
                self.layers.len() - 1
            }
        };
        if self.layers[li].params.iter().any(|(n, _)| n == name) {
            return Err(Error::Invalid(format!(
                "parameter {layer}/{name} bound twice"
            )));
        }
        let v = self.push_leaf(
            Op::Param {
                layer: li,
                name: name.to_string(),
            },
            value,
            true,
        );
        self.layers[li].params.push((name.to_string(), v));
        Ok(v)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = compute(&op, |v| &self.nodes[v.0].value)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }
    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Abs(a))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }
    pub fn l2norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::L2Norm(a))
    }
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Dot(a, b))
    }
    /// Per-row ℓ2 norms, `[R,C] -> [R,1]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowNorms(a))
    }
    /// Scales each row to unit norm; degenerate rows are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::NormalizeRows(a))
    }
    /// Per-row inner products, `[R,C]·[R,C] -> [R,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::RowDot(a, b))
    }
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatCols(a, b))
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows(a, start, end))
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Reshape(a, shape))
    }
    /// `a · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::MulScalar(a, s))
    }

    /// `a·x + b·y` with constant coefficients.
    pub fn axpby(&mut self, a: T, x: Var, b: T, y: Var) -> Result<Var> {
        let sx = self.scale(x, a)?;
        let sy = self.scale(y, b)?;
        self.add(sx, sy)
    }

    /// Replays the tape with some leaves replaced by name and returns the value of `out`.
    ///
    /// Inputs are looked up by their own name, parameters by `"{layer}/{name}"`.
    /// Leaves not mentioned keep their recorded values.
    pub fn evaluate(&self, out: Var, overrides: &HashMap<String, Tensor<T>>) -> Result<Tensor<T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(out.0 + 1);
        for node in &self.nodes[..=out.0] {
            let replaced = match &node.op {
                Op::Input(name) => overrides.get(name),
                Op::Param { layer, name } => {
                    overrides.get(&format!("{}/{}", self.layers[*layer].id, name))
                }
                _ => None,
            };
            let v = match (&node.op, replaced) {
                (_, Some(t)) => {
                    if t.shape() != node.value.shape() {
                        return Err(Error::shape(
                            "evaluate",
                            format!("override {:?} vs {:?}", t.shape(), node.value.shape()),
                        ));
                    }
                    t.clone()
                }
                (Op::Input(_) | Op::Param { .. } | Op::Const, None) => node.value.clone(),
                (op, None) => compute(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values.pop().expect("non-empty tape"))
    }

    /// Reverse-mode gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let ov = &self.nodes[out.0].value;
        if !ov.is_scalar() {
            return Err(Error::NonScalarOutput(ov.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::filled(ov.shape(), T::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for layer in &self.layers {
            for (name, v) in &layer.params {
                if v.0 <= out.0 && grads[v.0].is_none() {
                    return Err(Error::DetachedParameter(format!("{}/{}", layer.id, name)));
                }
            }
        }
        Ok(Gradients {
            grads,
            layers: self
                .layers
                .iter()
                .map(|l| (l.id.clone(), l.params.iter().map(|(_, v)| *v).collect()))
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor<T>| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Input(_) | Op::Param { .. } | Op::Const => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let (_, n) = val(*b).dims2();
                if wants(*a) {
                    let d = tensor::matmul_bt(g.data(), val(*b).data(), m, n, k);
                    acc(*a, Tensor::new(val(*a).shape().to_vec(), d)?);
                }
                if wants(*b) {
                    let d = tensor::matmul_at(val(*a).data(), g.data(), m, k, n);
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), d)?);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|x| x * c));
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*row) {
                    let (r, c) = g.dims2();
                    let mut d = vec![T::zero(); c];
                    for i in 0..r {
                        for (dj, &gj) in d.iter_mut().zip(g.row(i)) {
                            *dj += gj;
                        }
                    }
                    acc(*row, Tensor::new(val(*row).shape().to_vec(), d)?);
                }
            }
            Op::Tanh(a) => {
                acc(*a, g.zip_map(&node.value, |x, y| x * (T::one() - y * y)));
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                acc(*a, g.zip_map(val(*a), |x, y| two * x * y));
            }
            Op::Abs(a) => {
                acc(*a, g.zip_map(val(*a), |x, y| x * sign(y)));
            }
            Op::Sum(a) => {
                acc(*a, Tensor::filled(val(*a).shape(), g.item()));
            }
            Op::Mean(a) => {
                let n = T::from_usize(val(*a).len()).unwrap();
                acc(*a, Tensor::filled(val(*a).shape(), g.item() / n));
            }
            Op::L2Norm(a) => {
                let y = node.value.item();
                let s = if y > T::zero() { g.item() / y } else { T::zero() };
                acc(*a, val(*a).map(|x| x * s));
            }
            Op::Dot(a, b) => {
                let s = g.item();
                if wants(*a) {
                    acc(*a, val(*b).map(|x| x * s));
                }
                if wants(*b) {
                    acc(*b, val(*a).map(|x| x * s));
                }
            }
            Op::RowNorms(a) => {
                let x = val(*a);
                let (r, c) = x.dims2();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let y = node.value.data()[i];
                    if y > T::zero() {
                        let s = g.data()[i] / y;
                        for (dj, &xj) in d[i * c..(i + 1) * c].iter_mut().zip(x.row(i)) {
                            *dj = xj * s;
                        }
                    }
                }
                acc(*a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let (r, c) = x.dims2();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let u = node.value.row(i);
                    let gi = g.row(i);
                    let n = tensor::norm(x.row(i));
                    let ug = tensor::dot(u, gi);
                    for j in 0..c {
                        d[i * c + j] = (gi[j] - u[j] * ug) / n;
                    }
                }
                acc(*a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::RowDot(a, b) => {
                let (r, c) = val(*a).dims2();
                for (src, dst) in [(*b, *a), (*a, *b)] {
                    if !wants(dst) {
                        continue;
                    }
                    let s = val(src);
                    let mut d = vec![T::zero(); r * c];
                    for i in 0..r {
                        let gi = g.data()[i];
                        for (dj, &sj) in d[i * c..(i + 1) * c].iter_mut().zip(s.row(i)) {
                            *dj = sj * gi;
                        }
                    }
                    acc(dst, Tensor::new(val(dst).shape().to_vec(), d)?);
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = val(*a).dims2();
                let (_, cb) = val(*b).dims2();
                let c = ca + cb;
                if wants(*a) {
                    let mut d = Vec::with_capacity(r * ca);
                    for i in 0..r {
                        d.extend_from_slice(&g.data()[i * c..i * c + ca]);
                    }
                    acc(*a, Tensor::new(val(*a).shape().to_vec(), d)?);
                }
                if wants(*b) {
                    let mut d = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        d.extend_from_slice(&g.data()[i * c + ca..(i + 1) * c]);
                    }
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), d)?);
                }
            }
            Op::SliceRows(a, start, _) => {
                let x = val(*a);
                let (_, c) = x.dims2();
                let mut d = vec![T::zero(); x.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Reshape(a, _) => {
                acc(*a, g.clone().reshaped(val(*a).shape().to_vec())?);
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s).item();
                if wants(*a) {
                    acc(*a, g.map(|x| x * sv));
                }
                if wants(*s) {
                    let d = tensor::dot(g.data(), val(*a).data());
                    acc(*s, Tensor::new(val(*s).shape().to_vec(), vec![d])?);
                }
            }
        }
        Ok(())
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn two_d<T: Scalar>(op: &'static str, a: &Tensor<T>) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected 2-D, got {:?}", a.shape())));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn compute<'a, T: Scalar>(op: &Op<T>, val: impl Fn(Var) -> &'a Tensor<T>) -> Result<Tensor<T>> {
    let out = match op {
        Op::Input(_) | Op::Param { .. } | Op::Const => unreachable!("leaves are not recomputed"),
        Op::MatMul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (m, k) = two_d("matmul", a)?;
            let (k2, n) = two_d("matmul", b)?;
            if k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            Tensor::new(vec![m, n], tensor::matmul(a.data(), b.data(), m, k, n))?
        }
        Op::Add(a, b) => {
            same_shape("add", val(*a), val(*b))?;
            val(*a).zip_map(val(*b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape("sub", val(*a), val(*b))?;
            val(*a).zip_map(val(*b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape("mul", val(*a), val(*b))?;
            val(*a).zip_map(val(*b), |x, y| x * y)
        }
        Op::Scale(a, c) => {
            let c = *c;
            val(*a).map(|x| x * c)
        }
        Op::AddRow(a, row) => {
            let (a, row) = (val(*a), val(*row));
            let (r, c) = two_d("add_row", a)?;
            if row.len() != c {
                return Err(Error::shape(
                    "add_row",
                    format!("{:?} + row {:?}", a.shape(), row.shape()),
                ));
            }
            let mut d = a.data().to_vec();
            for i in 0..r {
                for (x, &b) in d[i * c..(i + 1) * c].iter_mut().zip(row.data()) {
                    *x += b;
                }
            }
            Tensor::new(a.shape().to_vec(), d)?
        }
        Op::Tanh(a) => val(*a).map(|x| x.tanh()),
        Op::Square(a) => val(*a).map(|x| x * x),
        Op::Abs(a) => val(*a).map(|x| x.abs()),
        Op::Sum(a) => Tensor::scalar(val(*a).sum()),
        Op::Mean(a) => {
            let a = val(*a);
            if a.is_empty() {
                return Err(Error::shape("mean", "empty tensor"));
            }
            Tensor::scalar(a.sum() / T::from_usize(a.len()).unwrap())
        }
        Op::L2Norm(a) => Tensor::scalar(val(*a).norm()),
        Op::Dot(a, b) => {
            if val(*a).len() != val(*b).len() {
                return Err(Error::shape(
                    "dot",
                    format!("{:?} . {:?}", val(*a).shape(), val(*b).shape()),
                ));
            }
            Tensor::scalar(tensor::dot(val(*a).data(), val(*b).data()))
        }
        Op::RowNorms(a) => {
            let a = val(*a);
            let (r, _) = two_d("row_norms", a)?;
            let d = (0..r).map(|i| tensor::norm(a.row(i))).collect();
            Tensor::new(vec![r, 1], d)?
        }
        Op::NormalizeRows(a) => {
            let a = val(*a);
            let (r, _) = two_d("normalize_rows", a)?;
            let mut d = Vec::with_capacity(a.len());
            for i in 0..r {
                d.extend(tensor::normalize(a.row(i))?);
            }
            Tensor::new(a.shape().to_vec(), d)?
        }
        Op::RowDot(a, b) => {
            let (a, b) = (val(*a), val(*b));
            same_shape("row_dot", a, b)?;
            let (r, _) = two_d("row_dot", a)?;
            let d = (0..r).map(|i| tensor::dot(a.row(i), b.row(i))).collect();
            Tensor::new(vec![r, 1], d)?
        }
        Op::ConcatCols(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (ra, ca) = two_d("concat_cols", a)?;
            let (rb, cb) = two_d("concat_cols", b)?;
            if ra != rb {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{:?} | {:?}", a.shape(), b.shape()),
                ));
            }
            let mut d = Vec::with_capacity(a.len() + b.len());
            for i in 0..ra {
                d.extend_from_slice(a.row(i));
                d.extend_from_slice(b.row(i));
            }
            Tensor::new(vec![ra, ca + cb], d)?
        }
        Op::SliceRows(a, start, end) => {
            let a = val(*a);
            let (r, c) = two_d("slice_rows", a)?;
            if start >= end || *end > r {
                return Err(Error::shape(
                    "slice_rows",
                    format!("rows {start}..{end} of {r}"),
                ));
            }
            Tensor::new(vec![end - start, c], a.data()[start * c..end * c].to_vec())?
        }
        Op::Reshape(a, shape) => val(*a).clone().reshaped(shape.clone())?,
        Op::MulScalar(a, s) => {
            let s = val(*s);
            if !s.is_scalar() {
                return Err(Error::shape("mul_scalar", format!("scalar {:?}", s.shape())));
            }
            let sv = s.item();
            val(*a).map(|x| x * sv)
        }
    };
    if !out.all_finite() {
        return Err(Error::NonFinite(op.name().to_string()));
    }
    Ok(out)
}

/// Result of one backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    layers: Vec<(String, Vec<Var>)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; zeros when `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Parameter gradients flattened per layer, parameters concatenated in binding order.
    pub fn layer_map(&self) -> GradientMap<T> {
        let layers = self
            .layers
            .iter()
            .map(|(id, vars)| {
                let mut flat = Vec::new();
                for v in vars {
                    flat.extend_from_slice(self.wrt(*v).data());
                }
                (id.clone(), flat)
            })
            .collect();
        GradientMap { layers }
    }
}

/// Per-layer flattened gradient vectors keyed by layer identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap<T> {
    layers: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn from_layers(layers: Vec<(String, Vec<T>)>) -> Self {
        Self { layers }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|(id, v)| (id.clone(), vec![T::zero(); v.len()]))
                .collect(),
        }
    }

    pub fn get(&self, layer: &str) -> Option<&[T]> {
        self.layers
            .iter()
            .find(|(id, _)| id == layer)
            .map(|(_, v)| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.layers.iter().map(|(id, v)| (id.as_str(), v.as_slice()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.layers.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Global ℓ2 norm across all layers.
    pub fn norm(&self) -> T {
        self.layers
            .iter()
            .map(|(_, v)| tensor::dot(v, v))
            .sum::<T>()
            .sqrt()
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|(id, v)| (id.clone(), v.iter().map(|&x| x * c).collect()))
                .collect(),
        }
    }

    /// `self += c · other`, matching layers by position and identifier.
    pub fn add_scaled(&mut self, c: T, other: &Self) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("gradient map", "layer count differs"));
        }
        for ((ia, a), (ib, b)) in self.layers.iter_mut().zip(&other.layers) {
            if ia != ib || a.len() != b.len() {
                return Err(Error::shape("gradient map", format!("{ia} vs {ib}")));
            }
            for (x, &y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 6.0);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.wrt(x).item(), 0.0);
    }

    #[test]
    fn identity_graph() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let x = g.input("x", t.clone());
        assert_eq!(g.value(x), &t);
        assert_eq!(g.evaluate(x, &HashMap::new()).unwrap(), t);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn detached_parameter_reported() {
        let mut g = Graph::<f64>::new();
        let w = g.param("l0", "w", Tensor::scalar(1.0)).unwrap();
        let _unused = g.param("l1", "w", Tensor::scalar(2.0)).unwrap();
        let y = g.square(w).unwrap();
        assert!(matches!(g.backward(y), Err(Error::DetachedParameter(_))));
    }

    #[test]
    fn shape_mismatch_and_non_finite() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", Tensor::vector(vec![1.0, 2.0]));
        let b = g.input("b", Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let big = g.input("big", Tensor::scalar(1e200));
        let prod = g.mul(big, big);
        assert!(matches!(prod, Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut g = Graph::<f64>::new();
        g.param("l0", "w", Tensor::scalar(1.0)).unwrap();
        assert!(g.param("l0", "w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn layer_map_concatenates_in_binding_order() {
        let mut g = Graph::<f64>::new();
        let w = g.param("dense", "w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.param("dense", "b", Tensor::scalar(3.0)).unwrap();
        let s = g.sum(w).unwrap();
        let y = g.mul(s, b).unwrap();
        let map = g.backward(y).unwrap().layer_map();
        assert_eq!(map.get("dense").unwrap(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn works_in_single_precision() {
        let mut g = Graph::<f32>::new();
        let x = g.input("x", Tensor::vector(vec![0.5f32, -0.25]));
        let t = g.tanh(x).unwrap();
        let s = g.sum(t).unwrap();
        let d = g.backward(s).unwrap().wrt(x);
        assert!((d.data()[0] - (1.0 - 0.5f32.tanh().powi(2))).abs() < 1e-6);
    }
}
