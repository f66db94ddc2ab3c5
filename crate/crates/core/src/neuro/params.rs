//! Named parameter tensors and a plain MLP built on them.

use rand_chacha::ChaCha8Rng;

use super::gradcheck::random_mat;
use super::tape::{Gradients, Mat, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

/// Tape leaves for every tensor of a [`ParamSet`], in order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects adjoints in parameter order, zero-filled for unused tensors.
    pub fn gradients(&self, params: &ParamSet, grads: &Gradients) -> Result<Vec<Mat>> {
        self.vars
            .iter()
            .zip(params.iter())
            .map(|(v, (name, m))| {
                let g = grads.get_or_zeros(*v, m.dim());
                if g.iter().all(|x| x.is_finite()) {
                    Ok(g)
                } else {
                    Err(Error::NonFiniteGradient(name.to_string()))
                }
            })
            .collect()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        Bound { vars: self.tensors.iter().map(|m| tape.param(m)).collect() }
    }

    /// Replaces every tensor, checking names and shapes match.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format("parameter names differ".into()));
        }
        for ((name, mine), theirs) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if mine.dim() != theirs.dim() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    theirs.dim(),
                    mine.dim()
                )));
            }
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer `output`. Weights are Gaussian with std `1/sqrt(fan_in)`, the last
    /// layer scaled by `out_gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        out_gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let gain = if k == last { out_gain } else { 1.0 };
                let std = gain / (w[0] as f64).sqrt();
                Layer {
                    weight: params.insert(format!("{prefix}.{k}.weight"), random_mat(rng, w[0], w[1], std)),
                    bias: params.insert(format!("{prefix}.{k}.bias"), Mat::zeros((1, w[1]))),
                    activation: if k == last { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        self.layers.iter().fold(x, |h, layer| {
            let z = tape.matmul(h, bound.var(layer.weight));
            let z = tape.add_row(z, bound.var(layer.bias));
            layer.activation.apply(tape, z)
        })
    }
}
