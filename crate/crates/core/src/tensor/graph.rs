use std::fmt;

use super::array::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule: `(upstream grad, parent values, own value) -> grad per parent`.
///
/// Entries for parents that do not require a gradient may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    label: &'static str,
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, so every node's parents have a
/// smaller index and the tape is already topologically sorted. A node
/// requires a gradient when it is a trainable leaf or any parent requires
/// one; ops over constants alone record no backward rule.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            grad: None,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
            label: "leaf",
        })
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            label: "constant",
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.nodes[v.0].parents.is_empty()
    }

    pub fn label(&self, v: Var) -> &'static str {
        self.nodes[v.0].label
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Records an op result. The backward rule is dropped when no parent
    /// requires a gradient.
    pub(crate) fn record(
        &mut self,
        label: &'static str,
        value: Tensor,
        parents: Vec<Var>,
        backward: BackwardFn,
    ) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value,
            grad: None,
            requires_grad,
            parents,
            backward: requires_grad.then_some(backward),
            label,
        })
    }

    /// Populates `grad` on every node that `loss` depends on and that requires
    /// a gradient. Grads from earlier calls are cleared first; contributions
    /// arriving over several paths are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::from_parts(shape, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let parent_grads = {
                let node = &self.nodes[i];
                let (Some(grad), Some(rule)) = (&node.grad, &node.backward) else {
                    continue;
                };
                let parents: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                rule(grad, &parents, &node.value)
            };
            let parents = self.nodes[i].parents.clone();
            debug_assert_eq!(parents.len(), parent_grads.len());
            for (p, g) in parents.into_iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                let parent = &mut self.nodes[p.0];
                if !parent.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), parent.value.shape(), "grad shape for {}", parent.label);
                match &mut parent.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Trainable leaves that `from` depends on through recorded ops.
    ///
    /// This is a structural query over the tape, independent of the
    /// numerical values of any gradient.
    pub fn reachable_leaves(&self, from: Var) -> Vec<Var> {
        let mut seen = vec![false; from.0 + 1];
        seen[from.0] = true;
        let mut leaves = Vec::new();
        for i in (0..=from.0).rev() {
            if !seen[i] {
                continue;
            }
            let node = &self.nodes[i];
            if node.parents.is_empty() {
                if node.requires_grad {
                    leaves.push(Var(i));
                }
                continue;
            }
            // Edges without a backward rule carry no gradient.
            if node.backward.is_none() {
                continue;
            }
            for p in &node.parents {
                seen[p.0] = true;
            }
        }
        leaves.reverse();
        leaves
    }
}
