//! Parameter trees that can hold tensors, tape variables or gradients.
//!
//! Each model component is a struct generic over its leaf type. Storage
//! uses `Tensor`; a forward pass binds the tree to a tape with
//! [`ParamTree::try_map`], yielding the same struct over [`crate::tape::Var`].
//! `try_map` and `visit` walk leaves in the same order as `named`.

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub trait ParamTree<T> {
    type Mapped<U>;

    fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<Self::Mapped<U>>;

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T));

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>);

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U> {
        self.try_map(&mut |t| Ok(f(t))).expect("infallible map")
    }

    fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.named("", &mut out);
        out.into_iter().map(|(_, t)| t).collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Puts every tensor of `tree` on `tape` as a leaf.
pub fn bind<P>(tape: &mut Tape, tree: &P, requires_grad: bool) -> Result<P::Mapped<Var>>
where
    P: ParamTree<Tensor>,
{
    tree.try_map(&mut |t| tape.leaf(t.clone(), requires_grad))
}

/// Collects the gradient of every bound leaf.
pub fn collect_grads<P>(bound: &P, grads: &Gradients) -> Result<P::Mapped<Tensor>>
where
    P: ParamTree<Var>,
{
    bound.try_map(&mut |&v| grads.get(v).cloned().ok_or(Error::ForeignVar))
}

/// Total number of scalar parameters.
pub fn count<P: ParamTree<Tensor>>(tree: &P) -> usize {
    tree.leaves().iter().map(|t| t.len()).sum()
}
