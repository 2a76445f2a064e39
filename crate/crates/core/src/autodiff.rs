//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order, so node ids are
//! already a topological order. [`Tape::backward`] runs a fresh adjoint
//! sweep from a scalar output and adds the result into per-node gradient
//! accumulators; calling it twice without [`Tape::zero_grad`] doubles
//! every gradient.

use crate::error::{OltError, Result};
use crate::tensor::{matmul_nt_acc, matmul_tn_acc, sigmoid, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[m, n] + [n]`, the bias row broadcast over every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Affine(Var, f64),
    Sum(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient for `v`; zeros if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(OltError::NonFinite { op: name });
        }
        Ok(self.push(op, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.checked(Op::MatMul(a, b), value, "matmul")
    }

    /// Elementwise sum of equal shapes, or a `[m, n]` matrix plus a `[n]`
    /// (or `[1, n]`) row broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let value = va.zip_map(vb, "add", |x, y| x + y)?;
            return self.checked(Op::Add(a, b), value, "add");
        }
        let (m, n) = va.dims2("add")?;
        let row_len = match vb.shape() {
            [len] | [1, len] => *len,
            _ => 0,
        };
        if row_len != n {
            return Err(OltError::Shape {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = va.data().to_vec();
        for i in 0..m {
            for (o, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.checked(Op::AddRow(a, b), value, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.checked(Op::Mul(a, b), value, "mul")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.checked(Op::Relu(a), value, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.checked(Op::Sigmoid(a), value, "sigmoid")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.checked(Op::Log(a), value, "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.checked(Op::Exp(a), value, "exp")
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(a).map(|x| scale * x + shift);
        self.checked(Op::Affine(a, scale), value, "affine")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.checked(Op::Sum(a), value, "sum")
    }

    /// `min(1, max(0, a))`, written as `1 - relu(1 - relu(a))` so the
    /// gradient is 1 strictly inside (0, 1) and 0 outside.
    pub fn clamp01(&mut self, a: Var) -> Result<Var> {
        let lower = self.relu(a)?;
        let flipped = self.affine(lower, -1.0, 1.0)?;
        let upper = self.relu(flipped)?;
        self.affine(upper, -1.0, 1.0)
    }

    /// Mean softmax cross-entropy of `[m, k]` logits against `m` labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (m, k) = z.dims2("softmax_cross_entropy")?;
        if labels.len() != m {
            return Err(OltError::Shape {
                op: "softmax_cross_entropy",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(OltError::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = z.row(i);
            total += crate::tensor::log_sum_exp(row) - row[y];
        }
        let value = Tensor::scalar(total / m as f64);
        self.checked(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
            "softmax_cross_entropy",
        )
    }

    /// Propagates d(output)/d(node) to every node recorded before `output`
    /// and adds it to the accumulators.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(OltError::NonScalar(out.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj);
            let node_shape = self.nodes[id].value.shape().to_vec();
            match &mut self.grads[id] {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(Tensor::new(node_shape, g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, contrib: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                send(*a, &mut |s| matmul_nt_acc(g, vb.data(), s, m, k, n));
                send(*b, &mut |s| matmul_tn_acc(va.data(), g, s, m, k, n));
            }
            Op::Add(a, b) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                send(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::AddRow(a, b) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                let n = self.value(*b).len();
                send(*b, &mut |s| {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &mut |s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                });
                send(*b, &mut |s| {
                    for ((o, x), y) in s.iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                });
            }
            Op::Relu(a) => {
                let input = self.value(*a).data();
                send(*a, &mut |s| {
                    for ((o, x), &u) in s.iter_mut().zip(g).zip(input) {
                        if u > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                send(*a, &mut |s| {
                    for ((o, x), &y) in s.iter_mut().zip(g).zip(out) {
                        *o += x * y * (1.0 - y);
                    }
                });
            }
            Op::Log(a) => {
                let input = self.value(*a).data();
                send(*a, &mut |s| {
                    for ((o, x), &u) in s.iter_mut().zip(g).zip(input) {
                        *o += x / u;
                    }
                });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                send(*a, &mut |s| {
                    for ((o, x), &y) in s.iter_mut().zip(g).zip(out) {
                        *o += x * y;
                    }
                });
            }
            Op::Affine(a, scale) => {
                send(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += scale * x));
            }
            Op::Sum(a) => {
                let seed = g[0];
                send(*a, &mut |s| s.iter_mut().for_each(|o| *o += seed));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let z = self.value(*logits);
                let k = z.shape()[1];
                let m = labels.len();
                let scale = g[0] / m as f64;
                send(*logits, &mut |s| {
                    for (i, &y) in labels.iter().enumerate() {
                        let p = crate::tensor::softmax(z.row(i));
                        let row = &mut s[i * k..(i + 1) * k];
                        for (j, (o, pj)) in row.iter_mut().zip(p).enumerate() {
                            let target = if j == y { 1.0 } else { 0.0 };
                            *o += scale * (pj - target);
                        }
                    }
                });
            }
        }
    }
}

/// Builds the forward graph of a scalar function of one tensor input.
pub trait ScalarGraph: Fn(&mut Tape, Var) -> Result<Var> {}
impl<F: Fn(&mut Tape, Var) -> Result<Var>> ScalarGraph for F {}

/// Value and gradient of `f` at `point`.
pub fn value_and_grad(f: &impl ScalarGraph, point: &Tensor) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    Ok((tape.value(y).item(), tape.grad(x)))
}

fn eval_scalar(f: &impl ScalarGraph, point: Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let y = f(&mut tape, x)?;
    let value = tape.value(y);
    if !value.is_scalar() {
        return Err(OltError::NonScalar(value.shape().to_vec()));
    }
    Ok(value.item())
}

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares [`Tape::backward`] against central differences
/// `(f(x+h) - f(x-h)) / 2h` coordinate by coordinate.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// coordinates whose true gradient is ~0 from dividing by rounding noise.
pub fn finite_diff_check(
    f: &impl ScalarGraph,
    point: &Tensor,
    step: f64,
    tolerance: f64,
) -> Result<FiniteDiffReport> {
    let (_, analytic) = value_and_grad(f, point)?;
    let mut numeric = vec![0.0; point.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        *slot = (eval_scalar(f, plus)? - eval_scalar(f, minus)?) / (2.0 * step);
    }
    let numeric = Tensor::new(point.shape().to_vec(), numeric)?;

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(FiniteDiffReport {
        passed: max_rel_error < tolerance,
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).item(), 6.0);
    }

    #[test]
    fn relu_derivative_at_negative_and_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![-1.0, 0.0]));
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_value_and_gradient() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = t.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((t.value(loss).item() - 2f64.ln()).abs() < 1e-15);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(z).data(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![0.3, -0.7]));
        let e = t.exp(x).unwrap();
        let y = t.mul(e, x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        let once = t.grad(x);
        t.backward(s).unwrap();
        let twice = t.grad(x);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        t.zero_grad();
        assert_eq!(t.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(OltError::NonScalar(_))));
    }

    #[test]
    fn log_of_zero_is_non_finite_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        assert!(matches!(t.log(x), Err(OltError::NonFinite { op: "log" })));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 2]));
        let msg = t.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
        let msg = t.mul(a, b).unwrap_err().to_string();
        assert!(msg.contains("mul"));
    }

    #[test]
    fn bias_row_broadcast_gradient_sums_rows() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[3, 2]));
        let b = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn clamp01_matches_min_max() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![-0.5, 0.25, 0.75, 1.5]));
        let y = t.clamp01(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.25, 0.75, 1.0]);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let f = |t: &mut Tape, x: Var| {
            let z = t.affine(x, 0.0, 4.0)?;
            t.sum(z)
        };
        let r = finite_diff_check(&f, &Tensor::from_vec(vec![1.0, -2.0]), 1e-5, 1e-6).unwrap();
        assert!(r.passed);
        assert!(r.analytic.data().iter().all(|&g| g == 0.0));
        assert!(r.numeric.data().iter().all(|&g| g == 0.0));
    }
}
