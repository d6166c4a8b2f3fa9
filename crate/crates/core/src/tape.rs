//! Reverse-mode differentiation tape.
//!
//! Every differentiable primitive pushes one node holding its forward value,
//! the ids of its inputs and a [`Backward`] rule. [`Tape::backward`] walks the
//! nodes in reverse and accumulates vector-Jacobian products into per-node
//! cotangents. A tape belongs to a single training step and is never shared.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(index: usize) -> Self {
        Self(index)
    }
}

/// Adjoint rule of a recorded primitive.
pub trait Backward: Send {
    fn name(&self) -> &'static str;

    /// Cotangents of each input given the output cotangent `grad`.
    ///
    /// `None` marks an input that receives no contribution.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input held fixed during differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Records the application of a primitive.
    pub fn push(&mut self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, inputs: inputs.to_vec(), op: Some(Box::new(op)), requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    /// Gradient of a scalar output.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward_scalar needs a single-element output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        self.backward(output, Tensor::new(self.value(output).shape(), vec![1.0])?)
    }

    /// Vector-Jacobian product of `output` with cotangent `seed`.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.value(output).expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let contributions = op.backward(&inputs, &node.value, &grad);
            debug_assert_eq!(contributions.len(), node.inputs.len(), "{} arity", op.name());
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    contribution.shape(),
                    self.nodes[input.0].value.shape(),
                    "{} produced a cotangent of the wrong shape",
                    op.name()
                );
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
            // Leaves keep their gradient; interior nodes are consumed.
            grads[id] = None;
        }
        Ok(Gradients { grads })
    }
}

/// Cotangents of the leaves reached by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;

    impl Backward for Square {
        fn name(&self) -> &'static str {
            "square"
        }

        fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
            vec![Some(inputs[0].zip_map(grad, |x, g| 2.0 * x * g).unwrap())]
        }
    }

    fn square(tape: &mut Tape, x: Var) -> Var {
        let value = tape.value(x).map(|v| v * v);
        tape.push(value, &[x], Square)
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
        let a = square(&mut tape, x);
        let b = square(&mut tape, a);
        // d/dx (x^2 + x^4) = 2x + 4x^3, summed through two branches
        let seed = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let ga = tape.backward(a, seed.clone()).unwrap();
        assert_eq!(ga.get(x).unwrap().data(), &[6.0, -2.0]);
        let gb = tape.backward(b, seed).unwrap();
        assert_eq!(gb.get(x).unwrap().data(), &[108.0, -4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let y = square(&mut tape, c);
        assert!(!tape.requires_grad(y));
        let g = tape.backward_scalar(y).unwrap();
        assert!(g.get(c).is_none());
    }
}
