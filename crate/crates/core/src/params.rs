//! Named parameter storage and the small layers built on it.

use std::collections::HashMap;

use crate::autograd::{Graph, Var};
use crate::checkpoint::AnyTensor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Stable index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Whether AdamW applies weight decay.
    pub decay: bool,
}

/// Ordered collection of named parameters. Registration order is the
/// iteration, serialization and optimizer order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `graph` as a gradient-tracked leaf.
    pub fn bind(&self, graph: &mut Graph<F>) -> Bound {
        Bound(self.params.iter().map(|p| graph.param(p.value.clone())).collect())
    }

    /// Places every parameter on `graph` as a constant.
    pub fn bind_frozen(&self, graph: &mut Graph<F>) -> Bound {
        Bound(self.params.iter().map(|p| graph.constant(p.value.clone())).collect())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn to_entries(&self, prefix: &str) -> Vec<(String, AnyTensor)>
    where
        AnyTensor: From<Tensor<F>>,
    {
        self.params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), AnyTensor::from(p.value.clone())))
            .collect()
    }

    /// Overwrites every parameter from `entries` (names prefixed by `prefix`).
    pub fn load_entries(&mut self, entries: &[(String, AnyTensor)], prefix: &str) -> Result<()> {
        let map: HashMap<&str, &AnyTensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in self.params.iter_mut() {
            let key = format!("{prefix}{}", p.name);
            let t = map
                .get(key.as_str())
                .ok_or_else(|| Error::Lookup(format!("checkpoint has no entry `{key}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "checkpoint entry `{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.to_real();
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in store order, e.g. leaves created by a caller.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Affine map over the last axis: `x·W + b`, `W` stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            rng.trunc_normal_tensor(&[input, output], init_std(input)),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[output]), false));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn zeros<F: Real>(store: &mut ParamStore<F>, name: &str, input: usize, output: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[input, output]), true);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[output]), false));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_broadcast(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Gain and shift of a layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-6;

impl Norm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], F::one()), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], F::of(LN_EPS))
    }
}

/// Truncated-normal std for a weight with `fan_in` inputs. A flat 0.02
/// leaves these narrow layers nearly linear at init, and training then
/// sits on a long plateau before any motion feature appears.
pub fn init_std(fan_in: usize) -> f64 {
    0.5 / (fan_in.max(1) as f64).sqrt()
}
