//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type so that the same
//! layout holds stored weights (`Tensor`), tape handles (`Var`) and
//! gradients. Leaves are addressed by dotted paths such as
//! `layer0.a2v.psi_conv`.

use std::collections::BTreeMap;

use crate::tensor::{Gradients, Tape, Tensor, Var};

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Named<P> {
    type With<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::With<Q>;

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));

    fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.map_named(prefix, &mut |name, p| f(name, p));
    }
}

impl<P, T: Named<P>> Named<P> for Vec<T> {
    type With<Q> = Vec<T::With<Q>>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Vec<T::With<Q>> {
        self.iter()
            .enumerate()
            .map(|(i, item)| item.map_named(&join(prefix, &i.to_string()), f))
            .collect()
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.for_each_named_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Registers every leaf on `tape`, trainable or frozen.
pub fn bind<'t, T: Named<Tensor>>(params: &T, tape: &'t Tape, trainable: bool) -> T::With<Var<'t>> {
    params.map_named("", &mut |_, t| {
        if trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        }
    })
}

pub fn named_tensors<T: Named<Tensor>>(params: &T, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    params.for_each_named(prefix, &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn count<T: Named<Tensor>>(params: &T) -> usize {
    let mut n = 0;
    params.for_each_named("", &mut |_, t| n += t.len());
    n
}

/// Gradients of bound leaves keyed by path; unreached leaves read as zeros.
pub fn collect_grads<'t, T: Named<Var<'t>>>(
    bound: &T,
    prefix: &str,
    grads: &Gradients,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    bound.for_each_named(prefix, &mut |name, v| {
        out.insert(name.to_string(), grads.wrt(v));
    });
    out
}

/// Mutable access to the leaf at `path`, if any.
pub fn with_leaf_mut<T: Named<Tensor>>(params: &mut T, path: &str, f: impl FnOnce(&mut Tensor)) -> bool {
    let mut f = Some(f);
    params.for_each_named_mut("", &mut |name, t| {
        if name == path {
            if let Some(f) = f.take() {
                f(t);
            }
        }
    });
    f.is_none()
}
