//! Named parameter arrays and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Places every parameter on the tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`) and a zero bias for a
    /// `k x k` convolution.
    pub fn init_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) {
        let fan_in = (cin * k * k) as f64;
        self.insert(
            format!("{prefix}.w"),
            Tensor::randn(&[cout, cin, k, k], (2.0 / fan_in).sqrt(), rng),
        );
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binding assembled from existing tape handles.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradient per parameter name; parameters that did not influence the
    /// loss get zeros.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// `conv2d` using the `<prefix>.w` / `<prefix>.b` pair of a bound store.
pub fn conv(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.w"))?;
    let b = bound.var(&format!("{prefix}.b"))?;
    tape.conv2d(x, w, Some(b), stride, pad)
}
