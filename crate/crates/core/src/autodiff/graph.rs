use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{broadcast_index, broadcast_shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, T),
    AddScalar(usize, T),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    SqDist(usize, usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of operations. Build one per loss evaluation and drop it
/// after [`Graph::backward`].
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of one scalar loss with respect to every node that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty graph".into()));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let out = &node.value;
            let mut push = |target: usize, contrib: Tensor<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    push(a, reduce_to(&g, nodes[a].value.shape()));
                    push(b, reduce_to(&g, nodes[b].value.shape()));
                }
                Op::Sub(a, b) => {
                    push(a, reduce_to(&g, nodes[a].value.shape()));
                    push(b, reduce_to(&g.map(|v| -v), nodes[b].value.shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    if nodes[a].requires_grad {
                        let vb_b = broadcast_to(vb, g.shape());
                        push(a, reduce_to(&g.zip_with(&vb_b, |x, y| x * y), va.shape()));
                    }
                    if nodes[b].requires_grad {
                        let va_b = broadcast_to(va, g.shape());
                        push(b, reduce_to(&g.zip_with(&va_b, |x, y| x * y), vb.shape()));
                    }
                }
                Op::MulScalar(a, c) => push(a, g.map(|v| v * c)),
                Op::AddScalar(a, _) => push(a, g),
                Op::Exp(a) => push(a, g.zip_with(out, |x, y| x * y)),
                Op::Log(a) => push(a, g.zip_with(&nodes[a].value, |x, y| x / y)),
                Op::Abs(a) => push(
                    a,
                    g.zip_with(&nodes[a].value, |x, y| {
                        if y > T::zero() {
                            x
                        } else if y < T::zero() {
                            -x
                        } else {
                            T::zero()
                        }
                    }),
                ),
                Op::Relu(a) => push(
                    a,
                    g.zip_with(&nodes[a].value, |x, y| if y > T::zero() { x } else { T::zero() }),
                ),
                Op::Sum(a) => push(a, Tensor::full(nodes[a].value.shape(), g.item())),
                Op::Mean(a) => {
                    let n = T::lit(nodes[a].value.len() as f64);
                    push(a, Tensor::full(nodes[a].value.shape(), g.item() / n));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    if nodes[a].requires_grad {
                        push(a, g.matmul(&vb.transpose())?);
                    }
                    if nodes[b].requires_grad {
                        push(b, va.transpose().matmul(&g)?);
                    }
                }
                Op::Softmax(a) => {
                    // dx = y * (g - rowsum(g * y))
                    let (r, c) = out.dims2();
                    let mut dx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let (yr, gr) = (out.row(i), g.row(i));
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&y, &gg)| y * (gg - dot)));
                    }
                    push(a, Tensor::new(out.shape(), dx)?);
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax * rowsum(g)
                    let (r, c) = out.dims2();
                    let mut dx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let (lr, gr) = (out.row(i), g.row(i));
                        let total: T = gr.iter().copied().sum();
                        dx.extend(lr.iter().zip(gr).map(|(&l, &gg)| gg - l.exp() * total));
                    }
                    push(a, Tensor::new(out.shape(), dx)?);
                }
                Op::SqDist(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    let (n, d) = va.dims2();
                    let (m, _) = vb.dims2();
                    let two = T::lit(2.0);
                    let mut da = vec![T::zero(); n * d];
                    let mut db = vec![T::zero(); m * d];
                    for i in 0..n {
                        let xi = va.row(i);
                        for j in 0..m {
                            let w = two * g.get2(i, j);
                            if w == T::zero() {
                                continue;
                            }
                            let yj = vb.row(j);
                            for k in 0..d {
                                let diff = w * (xi[k] - yj[k]);
                                da[i * d + k] = da[i * d + k] + diff;
                                db[j * d + k] = db[j * d + k] - diff;
                            }
                        }
                    }
                    push(a, Tensor::new(va.shape(), da)?);
                    push(b, Tensor::new(vb.shape(), db)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn broadcast_to<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let idx = broadcast_index(t.shape(), shape);
    let data = idx.iter().map(|&i| t.data()[i]).collect();
    Tensor::new(shape, data).expect("broadcast index covers output")
}

/// Sums a broadcast gradient back onto the operand's original shape.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let idx = broadcast_index(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    for (pos, &src) in idx.iter().enumerate() {
        let d = out.data_mut();
        d[src] = d[src] + g.data()[pos];
    }
    out
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Value of a one-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let ia = broadcast_index(a.shape(), &shape);
        let ib = broadcast_index(b.shape(), &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(Tensor::new(&shape, data)?, op, rg))
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn mul_scalar(&self, c: T) -> Var<'g, T> {
        self.unary(self.value().map(|v| v * c), Op::MulScalar(self.id, c))
    }

    pub fn add_scalar(&self, c: T) -> Var<'g, T> {
        self.unary(self.value().map(|v| v + c), Op::AddScalar(self.id, c))
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.mul_scalar(-T::one())
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.unary(self.value().map(T::exp), Op::Exp(self.id))
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&self) -> Result<Var<'g, T>> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|x| !(**x > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(v.map(T::ln), Op::Log(self.id)))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Var<'g, T> {
        self.unary(self.value().map(T::abs), Op::Abs(self.id))
    }

    /// max(x, 0); the derivative at zero is zero.
    pub fn relu(&self) -> Var<'g, T> {
        self.unary(self.value().map(|v| v.max(T::zero())), Op::Relu(self.id))
    }

    pub fn sum(&self) -> Var<'g, T> {
        self.unary(Tensor::scalar(self.value().sum_all()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g, T> {
        let v = self.value();
        let n = T::lit(v.len() as f64);
        self.unary(Tensor::scalar(v.sum_all() / n), Op::Mean(self.id))
    }

    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let value = self.value().matmul(&other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Row-wise softmax of an `n×K` tensor, stabilised by subtracting the row max.
    pub fn softmax(&self) -> Result<Var<'g, T>> {
        let v = self.value();
        let (r, c) = v.require_rank2("softmax")?;
        if c < 2 {
            return Err(Error::Contract(format!("softmax needs K >= 2, got {c}")));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = v.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - mx).exp()));
            let z: T = out[start..].iter().copied().sum();
            for e in &mut out[start..] {
                *e = *e / z;
            }
        }
        Ok(self.unary(Tensor::new(v.shape(), out)?, Op::Softmax(self.id)))
    }

    /// Row-wise log-softmax; finite even where softmax underflows to zero.
    pub fn log_softmax(&self) -> Result<Var<'g, T>> {
        let v = self.value();
        let (r, c) = v.require_rank2("log_softmax")?;
        if c < 2 {
            return Err(Error::Contract(format!("log_softmax needs K >= 2, got {c}")));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = v.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        Ok(self.unary(Tensor::new(v.shape(), out)?, Op::LogSoftmax(self.id)))
    }

    /// `n×m` matrix of squared Euclidean distances between the rows of `self`
    /// (`n×d`) and the rows of `other` (`m×d`).
    pub fn sq_dist(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (n, d) = a.require_rank2("sq_dist")?;
        let (m, d2) = b.require_rank2("sq_dist")?;
        if d != d2 {
            return Err(Error::shape("sq_dist", a.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let xi = a.row(i);
            for j in 0..m {
                let yj = b.row(j);
                out.push(
                    xi.iter()
                        .zip(yj)
                        .map(|(&p, &q)| (p - q) * (p - q))
                        .sum(),
                );
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .graph
            .push(Tensor::new(&[n, m], out)?, Op::SqDist(self.id, other.id), rg))
    }
}
