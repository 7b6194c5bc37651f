use crate::scalar::Scalar;

use super::ops;
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward corruption, used to prove the gradient checker bites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Bias gradients come out doubled.
    DoubleBiasGrad,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Relu(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    SoftmaxXent { logits: Var, dlogits: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed ops and the values backward needs.
///
/// Vars are numbered in execution order, so backward walks indices downward.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<BackwardFault>,
    relu_margin: T,
    pool_margin: T,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
            relu_margin: T::infinity(),
            pool_margin: T::infinity(),
        }
    }

    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Tape {
            fault,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite(format!(
                "output of op #{}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
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

    /// Smallest distance of any ReLU input, or any runner-up in a max pool,
    /// from the point where the op stops being differentiable.
    pub fn kink_margin(&self) -> T {
        self.relu_margin.min(self.pool_margin)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var, NumericsError> {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::add_bias(self.value(x), self.value(b))?;
        self.push(out, Op::AddBias(x, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let input = self.value(x);
        let margin = input
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(T::infinity(), T::min);
        let out = ops::relu(input);
        self.relu_margin = self.relu_margin.min(margin);
        self.push(out, Op::Relu(x))
    }

    pub fn max_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        let input = self.value(x);
        let (out, argmax) = ops::masked_max_pool(input, mask)?;
        let mut margin = T::infinity();
        for (j, (&best_row, &best)) in argmax.iter().zip(out.data()).enumerate() {
            for (i, &m) in mask.iter().enumerate() {
                if m && i != best_row {
                    margin = margin.min(best - input.get(i, j));
                }
            }
        }
        self.pool_margin = self.pool_margin.min(margin);
        self.push(out, Op::MaxPool { input: x, argmax })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&values);
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Cross-entropy of a logit row against `gold`; the result is a 1-element tensor.
    pub fn softmax_xent(&mut self, logits: Var, gold: usize) -> Result<Var, NumericsError> {
        let (loss, dlogits) = ops::softmax_xent(self.value(logits).data(), gold)?;
        self.push(Tensor::vector(vec![loss]), Op::SoftmaxXent { logits, dlogits })
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[output.0] = Some(Tensor::full(self.nodes[output.0].value.shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited.push(Var(idx));
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &g)
                        .expect("shapes were checked in forward");
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::AddBias(x, b) => {
                    let mut db = ops::add_bias_backward(&g, self.value(*b).shape());
                    if self.fault == Some(BackwardFault::DoubleBiasGrad) {
                        db.scale(T::of(2.0));
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { input, argmax } => {
                    let rows = self.value(*input).rows();
                    accumulate(
                        &mut grads,
                        *input,
                        ops::masked_max_pool_backward(argmax, rows, &g),
                    );
                }
                Op::Concat(parts) => {
                    let shapes: Vec<Vec<usize>> = parts
                        .iter()
                        .map(|p| self.value(*p).shape().to_vec())
                        .collect();
                    for (p, dp) in parts.iter().zip(ops::concat_backward(&g, &shapes)) {
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::SoftmaxXent { logits, dlogits } => {
                    let scale = g.data()[0];
                    let shape = self.value(*logits).shape().to_vec();
                    let d = Tensor::from_vec(shape, dlogits.iter().map(|&v| v * scale).collect())
                        .expect("dlogits matches logits");
                    accumulate(&mut grads, *logits, d);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads, visited }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Nodes in the order backward processed them.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_visits_in_reverse_execution_order() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64_rows(&[&[1.0, -2.0]])).unwrap();
        let w = tape.leaf(Tensor::from_f64_rows(&[&[1.0, 0.5], &[0.25, 1.0]])).unwrap();
        let b = tape.leaf(Tensor::vector(vec![0.1, 0.2])).unwrap();
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add_bias(h, b).unwrap();
        let h = tape.relu(h).unwrap();
        let loss = tape.softmax_xent(h, 1).unwrap();
        let grads = tape.backward(loss);
        let order: Vec<usize> = grads.visit_order().iter().map(|v| v.index()).collect();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order.first(), Some(&loss.index()));
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn shared_input_accumulates() {
        // loss depends on x twice through concat; gradient must double up.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::row_vector(vec![0.3])).unwrap();
        let c = tape.concat(&[x, x]).unwrap();
        let loss = tape.softmax_xent(c, 0).unwrap();
        let grads = tape.backward(loss);
        // logits equal, so d/dz0 = 0.5 - 1, d/dz1 = 0.5; sum = 0.
        assert!(grads.get(x).unwrap().data()[0].abs() < 1e-15);
    }

    #[test]
    fn kink_margin_tracks_relu_and_pool() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64_rows(&[&[0.5, -0.01], &[0.45, 2.0]])).unwrap();
        let r = tape.relu(x).unwrap();
        assert!((tape.kink_margin() - 0.01).abs() < 1e-15);
        tape.max_pool(r, &[true, true]).unwrap();
        // column 0: 0.5 vs 0.45; column 1: 2.0 vs 0.0
        assert!((tape.kink_margin() - 0.01).abs() < 1e-15);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64_rows(&[&[0.5], &[0.4995]])).unwrap();
        tape.max_pool(x, &[true, true]).unwrap();
        assert!((tape.kink_margin() - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            tape.leaf(Tensor::vector(vec![f64::NAN])),
            Err(NumericsError::NonFinite(_))
        ));
    }
}
