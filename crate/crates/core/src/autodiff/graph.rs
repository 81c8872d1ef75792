use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule of a recorded operation.
///
/// Receives the forward input values, the forward output, the gradient of
/// the loss with respect to the output, and which inputs need a gradient.
/// Returns one entry per input; `None` means "no contribution".
pub trait Backward<T: Element>: Send {
    fn backward(
        &self,
        inputs: &[&[T]],
        output: &[T],
        grad_output: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

impl<T, F> Backward<T> for F
where
    T: Element,
    F: Fn(&[&[T]], &[T], &[T], &[bool]) -> Vec<Option<Vec<T>>> + Send,
{
    fn backward(
        &self,
        inputs: &[&[T]],
        output: &[T],
        grad_output: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        self(inputs, output, grad_output, needs_grad)
    }
}

struct Node<T: Element> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
}

/// A tape of operations recorded in topological order.
///
/// Nodes are appended as operations run, so every node's inputs have
/// smaller indices than the node itself and a reverse sweep over the tape
/// is a valid reverse topological order.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    op_count: u64,
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
            op_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. Its `requires_grad` flag is kept.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(Node {
            shape,
            value: tensor.into_data(),
            requires_grad,
            grad: None,
            inputs: Vec::new(),
            rule: None,
        })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, value: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(t))
    }

    /// Leaf copied from a trainable parameter.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(Node {
            shape,
            value: tensor.data().to_vec(),
            requires_grad: true,
            grad: None,
            inputs: Vec::new(),
            rule: None,
        })
    }

    /// Records the output of an operation. `rule` is only kept when some
    /// input requires a gradient.
    pub fn record(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<T>,
        rule: impl Backward<T> + 'static,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(shape_err!(
                "op output shape {:?} does not hold {} values",
                shape,
                value.len()
            ));
        }
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(invalid!("variable {} does not belong to this graph", v.0));
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            inputs: inputs.to_vec(),
            rule: if requires_grad {
                Some(Box::new(rule))
            } else {
                None
            },
        }))
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a single-element variable.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone(), n.requires_grad, n.grad.clone())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Arithmetic operations recorded so far (multiply-adds count once).
    pub fn op_count(&self) -> u64 {
        self.op_count
    }

    pub fn count_ops(&mut self, n: u64) {
        self.op_count += n;
    }

    /// Reverse sweep from a scalar output. Gradients are added to whatever
    /// the nodes already hold.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if output.0 >= self.nodes.len() {
            return Err(invalid!("variable {} does not belong to this graph", output.0));
        }
        if self.nodes[output.0].value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].shape
            ));
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<T>>> = Vec::with_capacity(output.0 + 1);
        pending.resize_with(output.0 + 1, || None);
        pending[output.0] = Some(vec![T::one()]);

        for i in (0..=output.0).rev() {
            let Some(g_out) = pending[i].take() else {
                continue;
            };
            let contributions = {
                let node = &self.nodes[i];
                match &node.rule {
                    Some(rule) => {
                        let inputs: Vec<&[T]> = node
                            .inputs
                            .iter()
                            .map(|v| self.nodes[v.0].value.as_slice())
                            .collect();
                        let needs: Vec<bool> = node
                            .inputs
                            .iter()
                            .map(|v| self.nodes[v.0].requires_grad)
                            .collect();
                        let out = rule.backward(&inputs, &node.value, &g_out, &needs);
                        debug_assert_eq!(out.len(), node.inputs.len());
                        node.inputs.iter().copied().zip(out).collect::<Vec<_>>()
                    }
                    None => Vec::new(),
                }
            };
            for (input, g) in contributions {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[input.0].value.len());
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g_out).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(g_out),
            }
        }
        Ok(())
    }
}
