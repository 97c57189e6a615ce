use super::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};
use crate::gp;

/// The fixed set of differentiable operations a [`Graph`] can record.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    ReduceSum,
    ReduceMean,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Square,
    Sqrt,
    Negate,
    /// `[batch, d] + [d]`, adding the vector to every row.
    BroadcastAddRow,
    /// Picks `indices` (flat, row-major) out of the operand into a tensor of
    /// `shape`. Repeated indices are allowed; the backward pass scatter-adds.
    Gather {
        shape: Vec<usize>,
        indices: Vec<usize>,
    },
    /// Elementwise clamp into `[lo, hi]`; the gradient is zero where clamped.
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// KL(N(mu, var I) || N(0, K)) for an SE-kernel GP prior over `grid`.
    /// Operands: mean sequence `[T]`, variance (scalar), length scale (scalar).
    GpKl {
        grid: Vec<f64>,
        base_jitter: f64,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::ReduceSum => "reduce_sum",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Negate => "negate",
            Primitive::BroadcastAddRow => "broadcast_add_row",
            Primitive::Gather { .. } => "gather",
            Primitive::Clamp { .. } => "clamp",
            Primitive::GpKl { .. } => "gp_kl",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::MatMul
            | Primitive::BroadcastAddRow => 2,
            Primitive::GpKl { .. } => 3,
            _ => 1,
        }
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Saved {
    None,
    KlGrads { d_mu: Vec<f64>, d_var: f64, d_len: f64 },
}

#[derive(Debug)]
struct Node {
    op: Option<Primitive>,
    parents: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

/// Define-by-run tape. Nodes are appended in evaluation order, which is
/// therefore a valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| {
            let x = if ad.len() == 1 { ad[0] } else { ad[i] };
            let y = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(x, y)
        })
        .collect();
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Sums `grad` down to `shape` when the operand was broadcast as a scalar.
fn reduce_to(grad: Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        grad
    } else {
        let total: f64 = grad.data().iter().sum();
        Tensor::full(shape, total)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: None,
            parents: Vec::new(),
            value,
            requires_grad,
            saved: Saved::None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `op` applied to `operands` and returns the result.
    pub fn apply(&mut self, op: Primitive, operands: &[Var]) -> Result<Var> {
        if operands.len() != op.arity() {
            return Err(Error::Usage(format!(
                "{} takes {} operands, got {}",
                op.name(),
                op.arity(),
                operands.len()
            )));
        }
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        let (value, saved) = self.forward(&op, operands, requires_grad)?;
        self.nodes.push(Node {
            op: Some(op),
            parents: operands.to_vec(),
            value,
            requires_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn forward(&self, op: &Primitive, xs: &[Var], want_grad: bool) -> Result<(Tensor, Saved)> {
        let val = |i: usize| &self.nodes[xs[i].0].value;
        let name = op.name();
        let out = match op {
            Primitive::Add => {
                let shape = same_or_scalar(name, val(0), val(1))?;
                zip_broadcast(val(0), val(1), shape, |x, y| x + y)
            }
            Primitive::Sub => {
                let shape = same_or_scalar(name, val(0), val(1))?;
                zip_broadcast(val(0), val(1), shape, |x, y| x - y)
            }
            Primitive::Mul => {
                let shape = same_or_scalar(name, val(0), val(1))?;
                zip_broadcast(val(0), val(1), shape, |x, y| x * y)
            }
            Primitive::Div => {
                let shape = same_or_scalar(name, val(0), val(1))?;
                if val(1).data().contains(&0.0) {
                    return Err(Error::Domain {
                        op: name,
                        detail: "division by zero".into(),
                    });
                }
                zip_broadcast(val(0), val(1), shape, |x, y| x / y)
            }
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                match (a.dims2(), b.dims2()) {
                    (Some((r, k)), Some((k2, c))) if k == k2 => {
                        let mut out = vec![0.0; r * c];
                        matmul_into(a.data(), b.data(), &mut out, r, k, c);
                        Tensor::new(vec![r, c], out)?
                    }
                    _ => {
                        return Err(Error::ShapeMismatch {
                            op: name,
                            left: a.shape().to_vec(),
                            right: b.shape().to_vec(),
                        })
                    }
                }
            }
            Primitive::Transpose => {
                let a = val(0);
                if a.dims2().is_none() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        left: a.shape().to_vec(),
                        right: vec![],
                    });
                }
                a.transpose()
            }
            Primitive::ReduceSum => Tensor::scalar(val(0).data().iter().sum()),
            Primitive::ReduceMean => {
                let a = val(0);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
            }
            Primitive::Exp => val(0).map(f64::exp),
            Primitive::Log => {
                check_positive(name, val(0))?;
                val(0).map(f64::ln)
            }
            Primitive::Sqrt => {
                check_positive(name, val(0))?;
                val(0).map(f64::sqrt)
            }
            Primitive::Tanh => val(0).map(f64::tanh),
            Primitive::Sigmoid => val(0).map(sigmoid),
            Primitive::Square => val(0).map(|x| x * x),
            Primitive::Negate => val(0).map(|x| -x),
            Primitive::BroadcastAddRow => {
                let (a, b) = (val(0), val(1));
                let ok = match (a.dims2(), b.shape()) {
                    (Some((_, c)), &[d]) | (Some((_, c)), &[1, d]) => c == d,
                    _ => false,
                };
                if !ok {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        left: a.shape().to_vec(),
                        right: b.shape().to_vec(),
                    });
                }
                let bd = b.data();
                let c = bd.len();
                let data = a.data().iter().enumerate().map(|(i, &x)| x + bd[i % c]).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Primitive::Gather { shape, indices } => {
                let a = val(0);
                if let Some(&bad) = indices.iter().find(|&&i| i >= a.numel()) {
                    return Err(Error::IndexOutOfRange {
                        index: bad,
                        len: a.numel(),
                    });
                }
                let data = indices.iter().map(|&i| a.data()[i]).collect();
                Tensor::new(shape.clone(), data)?
            }
            Primitive::Clamp { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::Domain {
                        op: name,
                        detail: format!("empty range [{lo}, {hi}]"),
                    });
                }
                val(0).map(|x| x.clamp(*lo, *hi))
            }
            Primitive::GpKl { grid, base_jitter } => {
                let (mu, var, len) = (val(0), val(1), val(2));
                if mu.numel() != grid.len() || !var.is_scalar() || !len.is_scalar() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        left: mu.shape().to_vec(),
                        right: vec![grid.len()],
                    });
                }
                let eval = gp::kl_eval(grid, mu.data(), var.item(), len.item(), *base_jitter, want_grad)?;
                let saved = match eval.grads {
                    Some(g) => Saved::KlGrads {
                        d_mu: g.d_mu,
                        d_var: g.d_var,
                        d_len: g.d_length_scale,
                    },
                    None => Saved::None,
                };
                return Ok((Tensor::scalar(eval.value), saved));
            }
        };
        Ok((out, Saved::None))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = &self.nodes[loss.0].value;
        if !loss_val.is_scalar() || loss_val.shape().len() > 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_val.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let (Some(op), true) = (&node.op, node.requires_grad) else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_backward(op, node, &g);
            grads[idx] = Some(g);
            for (parent, contrib) in node.parents.iter().zip(contributions) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                if let Some(c) = contrib {
                    accumulate(&mut grads[parent.0], c);
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_backward(&self, op: &Primitive, node: &Node, g: &Tensor) -> Vec<Option<Tensor>> {
        let pv = |i: usize| &self.nodes[node.parents[i].0].value;
        let wants = |i: usize| self.nodes[node.parents[i].0].requires_grad;
        let out = &node.value;
        let elementwise = |f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            // f(input, output, upstream)
            let data = pv(0)
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&x, &y), &gy)| f(x, y, gy))
                .collect();
            Tensor::new(pv(0).shape().to_vec(), data).expect("elementwise grad")
        };
        match op {
            Primitive::Add => vec![
                Some(reduce_to(g.clone(), pv(0).shape())),
                Some(reduce_to(g.clone(), pv(1).shape())),
            ],
            Primitive::Sub => vec![
                Some(reduce_to(g.clone(), pv(0).shape())),
                Some(reduce_to(g.map(|x| -x), pv(1).shape())),
            ],
            Primitive::Mul => {
                let (a, b) = (pv(0), pv(1));
                let shape = g.shape().to_vec();
                let ga = wants(0).then(|| reduce_to(zip_broadcast(g, b, shape.clone(), |gy, y| gy * y), a.shape()));
                let gb = wants(1).then(|| reduce_to(zip_broadcast(g, a, shape, |gy, x| gy * x), b.shape()));
                vec![ga, gb]
            }
            Primitive::Div => {
                let (a, b) = (pv(0), pv(1));
                let shape = g.shape().to_vec();
                let ga = wants(0).then(|| reduce_to(zip_broadcast(g, b, shape.clone(), |gy, y| gy / y), a.shape()));
                let gb = wants(1).then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let q = zip_broadcast(out, b, shape.clone(), |o, y| -o / y);
                    reduce_to(zip_broadcast(g, &q, shape, |gy, d| gy * d), b.shape())
                });
                vec![ga, gb]
            }
            Primitive::MatMul => {
                let (a, b) = (pv(0), pv(1));
                let (r, k) = a.dims2().expect("matmul lhs");
                let (_, c) = b.dims2().expect("matmul rhs");
                let ga = wants(0).then(|| {
                    let mut d = vec![0.0; r * k];
                    matmul_nt_acc(g.data(), b.data(), &mut d, r, c, k);
                    Tensor::new(vec![r, k], d).expect("matmul grad")
                });
                let gb = wants(1).then(|| {
                    let mut d = vec![0.0; k * c];
                    matmul_tn_acc(a.data(), g.data(), &mut d, r, k, c);
                    Tensor::new(vec![k, c], d).expect("matmul grad")
                });
                vec![ga, gb]
            }
            Primitive::Transpose => vec![Some(g.transpose())],
            Primitive::ReduceSum => vec![Some(Tensor::full(pv(0).shape(), g.item()))],
            Primitive::ReduceMean => {
                let n = pv(0).numel() as f64;
                vec![Some(Tensor::full(pv(0).shape(), g.item() / n))]
            }
            Primitive::Exp => vec![Some(elementwise(&|_, y, gy| gy * y))],
            Primitive::Log => vec![Some(elementwise(&|x, _, gy| gy / x))],
            Primitive::Sqrt => vec![Some(elementwise(&|_, y, gy| gy * 0.5 / y))],
            Primitive::Tanh => vec![Some(elementwise(&|_, y, gy| gy * (1.0 - y * y)))],
            Primitive::Sigmoid => vec![Some(elementwise(&|_, y, gy| gy * y * (1.0 - y)))],
            Primitive::Square => vec![Some(elementwise(&|x, _, gy| gy * 2.0 * x))],
            Primitive::Negate => vec![Some(g.map(|x| -x))],
            Primitive::BroadcastAddRow => {
                let b = pv(1);
                let gb = wants(1).then(|| {
                    let c = b.numel();
                    let mut acc = vec![0.0; c];
                    for (i, &x) in g.data().iter().enumerate() {
                        acc[i % c] += x;
                    }
                    Tensor::new(b.shape().to_vec(), acc).expect("row grad")
                });
                vec![Some(g.clone()), gb]
            }
            Primitive::Gather { indices, .. } => {
                let mut acc = Tensor::zeros(pv(0).shape());
                let d = acc.data_mut();
                for (&i, &gy) in indices.iter().zip(g.data()) {
                    d[i] += gy;
                }
                vec![Some(acc)]
            }
            Primitive::Clamp { lo, hi } => {
                vec![Some(elementwise(&|x, _, gy| if x > *lo && x < *hi { gy } else { 0.0 }))]
            }
            Primitive::GpKl { .. } => {
                let Saved::KlGrads { d_mu, d_var, d_len } = &node.saved else {
                    unreachable!("gp_kl recorded without gradients");
                };
                let s = g.item();
                vec![
                    Some(Tensor::new(pv(0).shape().to_vec(), d_mu.iter().map(|d| d * s).collect()).expect("kl grad")),
                    Some(Tensor::full(pv(1).shape(), d_var * s)),
                    Some(Tensor::full(pv(2).shape(), d_len * s)),
                ]
            }
        }
    }
}

fn check_positive(op: &'static str, t: &Tensor) -> Result<()> {
    match t.data().iter().find(|&&x| !(x > 0.0)) {
        Some(&x) => Err(Error::Domain {
            op,
            detail: format!("input {x} is not positive"),
        }),
        None => Ok(()),
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

// Convenience wrappers; each is a thin call into `apply`.
impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::ReduceSum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::ReduceMean, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Negate, &[a])
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(Primitive::BroadcastAddRow, &[a, row])
    }
    pub fn gather(&mut self, a: Var, shape: Vec<usize>, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather { shape, indices }, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }
    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }
    /// Adds a constant scalar.
    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var> {
        let c = self.scalar(offset);
        self.add(a, c)
    }
    /// Element `i` of a flat view of `a`, as a scalar.
    pub fn element(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather(a, vec![], vec![i])
    }
    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2().ok_or_else(|| Error::ShapeMismatch {
            op: "row",
            left: self.value(a).shape().to_vec(),
            right: vec![],
        })?;
        if i >= rows {
            return Err(Error::IndexOutOfRange { index: i, len: rows });
        }
        self.gather(a, vec![cols], (i * cols..(i + 1) * cols).collect())
    }
    pub fn gp_kl(&mut self, mu: Var, var: Var, length_scale: Var, grid: &[f64], base_jitter: f64) -> Result<Var> {
        self.apply(
            Primitive::GpKl {
                grid: grid.to_vec(),
                base_jitter,
            },
            &[mu, var, length_scale],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn add_is_componentwise() {
        let mut g = Graph::new();
        let a = g.constant(v(&[1.0, 2.0]));
        let b = g.constant(v(&[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let x = g.constant(Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.0]);
        assert_eq!(g.value(y).shape(), &[2, 1]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.0));
        let s = g.sigmoid(w).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(w).item(), 0.25);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn product_rule_on_sum() {
        let mut g = Graph::new();
        let a = g.param(v(&[1.0, 2.0]));
        let b = g.param(v(&[3.0, 4.0]));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[3.0, 4.0]);
        assert_eq!(grads.wrt(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        assert_eq!(g.backward(z).unwrap().wrt(x).item(), 5.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(v(&[1.0, 2.0]));
        let unused = g.param(v(&[5.0, 6.0, 7.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn constants_receive_nothing() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 3.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(v(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(v(&[1.0, 2.0]));
        let b = g.constant(v(&[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn log_and_sqrt_reject_non_positive() {
        let mut g = Graph::new();
        let a = g.constant(v(&[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(g.sqrt(a), Err(Error::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn scalar_broadcast() {
        let mut g = Graph::new();
        let a = g.param(v(&[1.0, 2.0, 3.0]));
        let s = g.param(Tensor::scalar(2.0));
        let p = g.mul(a, s).unwrap();
        let t = g.sum(p).unwrap();
        let grads = g.backward(t).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(grads.wrt(s).item(), 6.0);
        assert_eq!(grads.wrt(a).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_scatters_back() {
        let mut g = Graph::new();
        let a = g.param(v(&[1.0, 2.0, 3.0]));
        let b = g.gather(a, vec![2, 2], vec![0, 2, 2, 1]).unwrap();
        assert_eq!(g.value(b).data(), &[1.0, 3.0, 3.0, 2.0]);
        let s = g.sum(b).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(a).data(), &[1.0, 1.0, 2.0]);
        assert!(g.gather(a, vec![1], vec![3]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.param(Tensor::from_rows(&[vec![0.3, -1.2], vec![0.7, 2.1]]).unwrap());
            let b = g.tanh(a).unwrap();
            let c = g.matmul(b, a).unwrap();
            let s = g.mean(c).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(s).item().to_bits(), grads.wrt(a))
        };
        assert_eq!(build(), build());
    }
}
