use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use super::{Element, Tensor};
use crate::error::{Error, Result};

static CHECK_FINITE: AtomicBool = AtomicBool::new(false);

/// Enables or disables the finiteness assertion on every recorded value.
pub fn set_finite_checks(enabled: bool) {
    CHECK_FINITE.store(enabled, Ordering::Relaxed);
}

/// Maps the output gradient to one gradient per input. The mask says which
/// inputs participate in differentiation; entries for the others may be `None`.
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of executed operations.
///
/// A tape is cheap to clone (shared handle) and confined to one thread.
pub struct Tape<T> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let id = self.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value: Rc::new(value),
            node: Some((self.clone(), id)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

/// A tensor value, optionally attached to a tape.
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<(Tape<T>, usize)>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            value: Rc::clone(&self.value),
            node: self.node.clone(),
        }
    }
}

impl<T: Element> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node.as_ref().map(|(_, id)| *id))
            .finish()
    }
}

impl<T: Element> From<Tensor<T>> for Var<T> {
    fn from(t: Tensor<T>) -> Self {
        Var::constant(t)
    }
}

impl<T: Element> Var<T> {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// Detaches from the tape, keeping the value.
    pub fn detach(&self) -> Self {
        Self {
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    /// Records an operation. When no input is attached to a tape the result
    /// is a constant and `backward` is dropped unused.
    pub(crate) fn record<F>(inputs: &[&Var<T>], value: Tensor<T>, backward: F) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if CHECK_FINITE.load(Ordering::Relaxed) {
            value.assert_finite("recorded value");
        }
        let tape = inputs.iter().find_map(|v| v.tape()).cloned();
        let Some(tape) = tape else {
            return Var::constant(value);
        };
        let parents = inputs
            .iter()
            .map(|v| match &v.node {
                Some((t, id)) => {
                    assert!(t.same(&tape), "operands recorded on different tapes");
                    Some(*id)
                }
                None => None,
            })
            .collect();
        let id = tape.push(Node {
            parents,
            backward: Some(Box::new(backward)),
        });
        Var {
            value: Rc::new(value),
            node: Some((tape, id)),
        }
    }

    /// Replays the tape in reverse from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let Some((tape, root)) = &self.node else {
            return Ok(Gradients {
                grads: Vec::new(),
                tape: None,
            });
        };
        let nodes = tape.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[*root] = Some(Tensor::full(self.shape(), T::one()));
        for id in (0..=*root).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else { continue };
            let mask: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &mask);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (parent, ig) in node.parents.iter().zip(input_grads) {
                let (Some(p), Some(ig)) = (parent, ig) else { continue };
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients {
            grads,
            tape: Some(tape.clone()),
        })
    }
}

/// Gradients of a scalar with respect to every leaf on its tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    tape: Option<Tape<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `var`, or `None` when it is constant or unreachable.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        let (tape, id) = var.node.as_ref()?;
        if !self.tape.as_ref().is_some_and(|t| t.same(tape)) {
            return None;
        }
        self.grads.get(*id)?.as_ref()
    }

    /// Gradient for `var`, with zeros for leaves the loss does not reach.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<T> fmt::Debug for Gradients<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let present = self.grads.iter().filter(|g| g.is_some()).count();
        write!(f, "Gradients({present} of {} nodes)", self.grads.len())
    }
}
