use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{check_finite, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Identifies a node on one specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Backward rule of a recorded operation.
///
/// Receives the upstream gradient (same length as the op's output) and a
/// flag per input saying whether that input needs a gradient. Returns one
/// entry per input; `None` for inputs that were not requested.
pub type BackwardFn = Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    shape: Vec<usize>,
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn>,
}

/// Append-only record of operations, replayed in reverse by [`Tape::backward`].
///
/// Single-threaded; create one per training step.
pub struct Tape {
    id: u64,
    recording: bool,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that evaluates operations without recording them.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Tensors produced earlier keep their values
    /// but their node ids become invalid.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn push(&self, node: Node) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        NodeId {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn owns(&self, id: NodeId) -> bool {
        id.tape == self.id && id.index < self.nodes.borrow().len()
    }

    /// Registers `value` as a differentiable leaf. On a non-recording tape
    /// the value is returned detached.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        if !self.recording {
            return value.detach();
        }
        let id = self.push(Node {
            shape: value.shape().to_vec(),
            inputs: Vec::new(),
            backward: None,
        });
        Tensor::from_parts(value.shape().to_vec(), value.data.clone(), Some(id))
    }

    /// Wraps an already-computed output as a recorded operation.
    ///
    /// The output is linked to the tape only when the tape records and at
    /// least one input carries a node id of this tape. `backward` is called
    /// lazily and must be consistent with the forward values it captured.
    pub fn record<F>(
        &self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: &[&Tensor],
        backward: F,
    ) -> Result<Tensor>
    where
        F: Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + 'static,
    {
        check_finite(op, &data)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidArgument {
                op,
                reason: format!("output shape {shape:?} does not hold {} values", data.len()),
            });
        }
        let mut input_ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            match t.node {
                Some(id) if !self.owns(id) => return Err(TensorError::UnknownNode(id.index)),
                other => input_ids.push(other),
            }
        }
        let node = if self.recording && input_ids.iter().any(Option::is_some) {
            Some(self.push(Node {
                shape: shape.clone(),
                inputs: input_ids,
                backward: Some(Box::new(backward)),
            }))
        } else {
            None
        };
        Ok(Tensor::from_parts(shape, data.into(), node))
    }

    /// Records an op whose output already exists as a tensor (typically a
    /// view sharing its input's buffer). No finiteness check is made.
    pub(crate) fn record_shared<F>(
        &self,
        value: Tensor,
        inputs: &[&Tensor],
        backward: F,
    ) -> Result<Tensor>
    where
        F: Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + 'static,
    {
        let mut input_ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            match t.node {
                Some(id) if !self.owns(id) => return Err(TensorError::UnknownNode(id.index)),
                other => input_ids.push(other),
            }
        }
        let node = if self.recording && input_ids.iter().any(Option::is_some) {
            Some(self.push(Node {
                shape: value.shape.clone(),
                inputs: input_ids,
                backward: Some(Box::new(backward)),
            }))
        } else {
            None
        };
        Ok(Tensor::from_parts(value.shape, value.data, node))
    }

    /// Reverse accumulation from `loss` to every node in `targets`.
    ///
    /// Targets may be leaves or intermediate values. Targets that the loss
    /// does not depend on get an all-zero gradient. The tape is not mutated,
    /// so repeated calls return identical maps.
    pub fn backward(&self, loss: &Tensor, targets: &[NodeId]) -> Result<GradientMap> {
        if loss.shape() != [1] {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let loss_id = loss.node.ok_or(TensorError::LossNotRecorded)?;
        if !self.owns(loss_id) {
            return Err(TensorError::UnknownNode(loss_id.index));
        }
        for t in targets {
            if !self.owns(*t) {
                return Err(TensorError::UnknownNode(t.index));
            }
        }
        let nodes = self.nodes.borrow();
        let mut out = GradientMap::default();
        let Some(stop) = targets.iter().map(|t| t.index).min() else {
            return Ok(out);
        };
        let mut is_target = vec![false; loss_id.index + 1];
        for t in targets {
            if t.index <= loss_id.index {
                is_target[t.index] = true;
            }
        }

        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss_id.index + 1, || None);
        grads[loss_id.index] = Some(vec![1.0]);

        for idx in (stop..=loss_id.index).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if let Some(rule) = &node.backward {
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|i| matches!(i, Some(id) if id.index >= stop))
                    .collect();
                if needs.iter().any(|&n| n) {
                    let input_grads = rule(&grad, &needs);
                    for (slot, g) in node.inputs.iter().zip(input_grads) {
                        let (Some(id), Some(g)) = (slot, g) else {
                            continue;
                        };
                        if id.index < stop {
                            continue;
                        }
                        match &mut grads[id.index] {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&g) {
                                    *a += v;
                                }
                            }
                            empty => *empty = Some(g),
                        }
                    }
                }
            }
            if is_target[idx] {
                grads[idx] = Some(grad);
            }
        }

        for t in targets {
            let shape = nodes[t.index].shape.clone();
            let g = if t.index <= loss_id.index {
                grads[t.index].clone()
            } else {
                None
            };
            let data = g.unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            out.grads.insert(*t, Tensor::new(&shape, data)?);
        }
        Ok(out)
    }
}

/// Gradients keyed by node id, as returned by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, node: NodeId) -> Result<&Tensor> {
        self.grads
            .get(&node)
            .ok_or(TensorError::MissingGradient(node.index))
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.grads.contains_key(&node)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Euclidean norm of the gradient stored for `node`, summed in `f64`.
    pub fn l2_norm(&self, node: NodeId) -> Result<f64> {
        let g = self.get(node)?;
        Ok(g.data()
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt())
    }
}

/// `sqrt(sum g_i^2)` over the gradient of `node`.
pub fn grad_l2_norm(grads: &GradientMap, node: NodeId) -> Result<f64> {
    grads.l2_norm(node)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        let g = tape.backward(&loss, &[x.node().unwrap()]).unwrap();
        assert_eq!(g.get(x.node().unwrap()).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_combination_of_scalars() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::scalar(0.7));
        let b = tape.leaf(&Tensor::scalar(-1.3));
        let (alpha, beta) = (0.25f32, 3.0f32);
        let wa = tape.affine(&a, alpha, 0.0).unwrap();
        let wb = tape.affine(&b, beta, 0.0).unwrap();
        let loss = tape.add(&wa, &wb).unwrap();
        let g = tape
            .backward(&loss, &[a.node().unwrap(), b.node().unwrap()])
            .unwrap();
        assert_eq!(g.get(a.node().unwrap()).unwrap().item(), alpha);
        assert_eq!(g.get(b.node().unwrap()).unwrap().item(), beta);
    }

    #[test]
    fn intermediate_targets_and_repeatability() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![0.5, -1.5]).unwrap());
        let h = tape.affine(&x, 2.0, 1.0).unwrap();
        let hh = tape.mul(&h, &h).unwrap();
        let loss = tape.sum(&hh).unwrap();
        let targets = [h.node().unwrap(), x.node().unwrap()];
        let g1 = tape.backward(&loss, &targets).unwrap();
        let g2 = tape.backward(&loss, &targets).unwrap();
        // h = [2, -2]; dL/dh = 2h; dL/dx = 4h
        assert_eq!(g1.get(targets[0]).unwrap().data(), &[4.0, -4.0]);
        assert_eq!(g1.get(targets[1]).unwrap().data(), &[8.0, -8.0]);
        for t in targets {
            assert!(g1.get(t).unwrap().bit_eq(g2.get(t).unwrap()));
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.relu(&x).unwrap();
        assert!(matches!(
            tape.backward(&y, &[x.node().unwrap()]),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn foreign_target_is_rejected() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0));
        let z = other.leaf(&Tensor::scalar(1.0));
        let loss = tape.mul(&x, &x).unwrap();
        assert!(matches!(
            tape.backward(&loss, &[z.node().unwrap()]),
            Err(TensorError::UnknownNode(_))
        ));
    }

    #[test]
    fn unreached_target_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let unused = tape.leaf(&Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let loss = tape.mul(&x, &x).unwrap();
        let g = tape.backward(&loss, &[unused.node().unwrap()]).unwrap();
        assert_eq!(g.get(unused.node().unwrap()).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_norm_of_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let w = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let loss = tape.sum(&tape.mul(&x, &w).unwrap()).unwrap();
        let g = tape.backward(&loss, &[x.node().unwrap()]).unwrap();
        assert_eq!(grad_l2_norm(&g, x.node().unwrap()).unwrap(), 5.0);
        let zero = tape.leaf(&Tensor::zeros(&[4]));
        let g0 = tape.backward(&loss, &[zero.node().unwrap()]).unwrap();
        assert_eq!(g0.l2_norm(zero.node().unwrap()).unwrap(), 0.0);
        let missing = tape.leaf(&Tensor::scalar(0.0)).node().unwrap();
        assert!(g.l2_norm(missing).is_err());
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::no_grad();
        let x = tape.leaf(&Tensor::scalar(1.0));
        let y = tape.mul(&x, &x).unwrap();
        assert!(y.node().is_none());
        assert!(tape.is_empty());
    }
}
