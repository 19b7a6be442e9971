//! Wengert tape for reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! indices of its inputs. [`Tape::backward`] walks the nodes in reverse,
//! accumulating adjoints, and deposits the adjoints of parameter leaves into
//! the [`ParamStore`] they were read from. A tape supports a single backward
//! pass; [`Tape::reset`] clears it for the next training step.

use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, silu_grad, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(u64, ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Silu(Var),
    Square(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any parameter or tracked input feeds this node.
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints of every node from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`; zero when `v` does not influence the loss.
    pub fn of(&self, v: Var, tape: &Tape) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = match &op {
            Op::Leaf => false,
            Op::Param(..) => true,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b) => {
                self.tracked(*a) || self.tracked(*b)
            }
            Op::Scale(a, _) | Op::Silu(a) | Op::Square(a) | Op::Slice(a, ..) | Op::Mean(a) | Op::Reshape(a) => {
                self.tracked(*a)
            }
            Op::Concat(parts) => parts.iter().any(|&p| self.tracked(p)),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf that receives no adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf whose adjoint is kept, for gradients with respect to inputs.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a parameter read; its adjoint flows back into `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(store.key, id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Broadcast-add a bias vector of length `cols` to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.shape().len() != 2 || bv.len() != xv.shape()[1] {
            return Err(TensorError::mismatch("add_bias", xv.shape(), bv.shape()));
        }
        let cols = bv.len();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).silu();
        self.push(v, Op::Silu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&values)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let v = self.value(a).slice_cols(start, end)?;
        Ok(self.push(v, Op::Slice(a, start, end)))
    }

    /// Same values, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Compute adjoints of every recorded node with respect to `loss`.
    pub fn gradients(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(..) => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g.scale(*s)),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if self.tracked(*a) {
                        // dA = dC · Bᵀ
                        let mut ga = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            (g.data(), n as isize, 1),
                            (bv.data(), 1, n as isize),
                            &mut ga,
                            0.0,
                        );
                        accumulate(&mut grads, *a, &Tensor::from_parts(&[m, k], ga)?);
                    }
                    if self.tracked(*b) {
                        // dB = Aᵀ · dC
                        let mut gb = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            (av.data(), 1, k as isize),
                            (g.data(), n as isize, 1),
                            &mut gb,
                            0.0,
                        );
                        accumulate(&mut grads, *b, &Tensor::from_parts(&[k, n], gb)?);
                    }
                }
                Op::AddBias(x, bias) => {
                    let bshape = self.value(*bias).shape().to_vec();
                    let cols = self.value(*bias).len();
                    let mut gb = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *bias, &Tensor::from_parts(&bshape, gb)?);
                    accumulate(&mut grads, *x, &g);
                }
                Op::Silu(a) => {
                    let mut ga = g.clone();
                    for (o, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= silu_grad(x);
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Square(a) => {
                    let mut ga = g.clone();
                    for (o, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= 2.0 * x;
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = g.slice_cols(start, start + w)?;
                        accumulate(&mut grads, p, &gp);
                        start += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let mut ga = Tensor::zeros(av.shape());
                    let w = end - start;
                    for (row, grow) in ga.data_mut().chunks_mut(cols).zip(g.data().chunks(w)) {
                        row[*start..*end].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.value(*a).shape())?;
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let ga = Tensor::full(av.shape(), g.item() / av.len() as f64);
                    accumulate(&mut grads, *a, &ga);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagate `loss` and add parameter adjoints into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        self.backward_many(loss, &mut [store])
    }

    /// Backpropagate into several stores. Parameters read from a store that
    /// is not listed are treated as constants.
    pub fn backward_many(&mut self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<(), TensorError> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(key, id), Some(g)) = (&node.op, g) {
                if let Some(store) = stores.iter_mut().find(|s| s.key == *key) {
                    store.accumulate_grad(*id, g)?;
                }
            }
        }
        // mark stores even when none of their parameters was reachable
        for store in stores.iter_mut() {
            store.has_grad = true;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.clone()),
    }
}
