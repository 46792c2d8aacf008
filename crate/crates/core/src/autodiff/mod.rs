//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive as a node holding its forward value,
//! its parent ids and a backward closure. Node ids are assigned in creation
//! order, so the node list is already topologically sorted and backward is a
//! single reverse sweep.

pub mod conv;
mod elementwise;
pub mod gemm;
mod nn;
mod resample;
pub mod scan;
mod shape;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::{conv_out_extent, ConvSpec};
pub use scan::{selective_scan, ScanParams};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Computes parent gradients from `(grad_out, parent values, output value, needs)`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    op: &'static str,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Mode::Eval, 0)
    }
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            first_nonfinite: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Inserts a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.insert(value, Vec::new(), None, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The first node whose forward value contained NaN or infinity, if any.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.first_nonfinite
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: BackwardFn,
        op: &'static str,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        let backward = requires_grad.then_some(backward);
        self.insert(value, parents, backward, requires_grad, op)
    }

    fn insert(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
        op: &'static str,
    ) -> Var {
        let id = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some((id, op));
        }
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
            op,
        });
        Var(id)
    }

    /// Back-propagates from a one-element `root`.
    ///
    /// Every node is visited once, in reverse creation order. Leaves that
    /// require gradients but are not reachable from `root` report zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if let Some((node, op)) = self.first_nonfinite {
            return Err(Error::NonFinite { op, node });
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, has shape {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_value.shape()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad_out, &inputs, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape(), "grad shape for {}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (id, g) in grads.iter_mut().enumerate() {
            let node = &self.nodes[id];
            if node.backward.is_some() || !node.requires_grad {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape()));
            }
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        op: "backward",
                        node: id,
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with `requires_grad = true`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
