//! Named parameter traversal shared by every trainable structure.
//!
//! Gradients are stored in the same types as the parameters they belong
//! to, so the optimizer, checkpointing and finite-difference checks can
//! all work through one visitor.

use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Parameterized {
    /// Visits every parameter tensor in a fixed order with its dotted name.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor));

    /// Mutable counterpart of [`Parameterized::visit`]; same order.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t)));
        out
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(0.0));
        z
    }

    /// Elementwise `self += other`; both must share structure.
    fn accumulate(&mut self, other: &Self) {
        let mut theirs = Vec::new();
        other.visit("", &mut |_, t| theirs.push(t));
        let mut it = theirs.into_iter();
        self.visit_mut("", &mut |_, t| {
            t.add_assign(it.next().expect("parameter structures differ"))
        });
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, t| t.scale(factor));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.is_finite());
        ok
    }

    /// Reads scalar `index` in the flattened visitation order.
    fn scalar(&self, index: usize) -> f64 {
        let mut offset = 0;
        let mut value = None;
        self.visit("", &mut |_, t| {
            if value.is_none() && index < offset + t.len() {
                value = Some(t.data()[index - offset]);
            }
            offset += t.len();
        });
        value.expect("parameter index out of range")
    }

    fn set_scalar(&mut self, index: usize, v: f64) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, t| {
            if index >= offset && index < offset + t.len() {
                t.data_mut()[index - offset] = v;
            }
            offset += t.len();
        });
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
