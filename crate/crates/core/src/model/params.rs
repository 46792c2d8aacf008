//! Named parameter storage.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal truncated at two standard deviations.
    Normal(f64),
    /// `log(1..=n)` along the last axis.
    LogRange,
    /// Softplus inverse of a log-uniform step in `[lo, hi]`.
    StepBias(f64, f64),
    /// Leading half ones, trailing half zeros.
    FilmBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter specs under a name prefix.
#[derive(Default)]
pub struct SpecBuilder {
    pub specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    /// Weight `[in, out]` plus optional bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64, bias: bool) {
        self.add(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Normal(std));
        if bias {
            self.add(format!("{prefix}.bias"), &[fan_out], Init::Zeros);
        }
    }

    /// Kernel `[out, in / groups, k, k, k]` with He-scaled init plus bias.
    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, groups: usize) {
        let fan_in = cin / groups * k * k * k;
        self.add(
            format!("{prefix}.weight"),
            &[cout, cin / groups, k, k, k],
            Init::Normal((2.0 / fan_in as f64).sqrt()),
        );
        self.add(format!("{prefix}.bias"), &[cout], Init::Zeros);
    }

    pub fn norm(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.gain"), &[c], Init::Const(1.0));
        self.add(format!("{prefix}.bias"), &[c], Init::Zeros);
    }
}

fn materialize(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = &spec.shape;
    match spec.init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Const(v) => Tensor::full(shape, v),
        Init::Normal(std) => Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        }),
        Init::LogRange => {
            let n = *shape.last().unwrap_or(&1);
            Tensor::from_fn(shape, |i| ((i % n + 1) as f64).ln())
        }
        Init::StepBias(lo, hi) => Tensor::from_fn(shape, |_| {
            let dt = (rng.gen::<f64>() * (hi.ln() - lo.ln()) + lo.ln()).exp();
            // Inverse softplus.
            dt + (-(-dt).exp_m1()).ln()
        }),
        Init::FilmBias => {
            let half = spec.numel() / 2;
            Tensor::from_fn(shape, |i| if i < half { 1.0 } else { 0.0 })
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, name-indexed parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    /// Draws every spec in order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::default();
        for s in specs {
            store.insert(s.name.clone(), materialize(s, &mut rng))?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.params[i].value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.position(name) {
            Some(i) => Ok(&mut self.params[i].value),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    /// Overwrites a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(
                "set parameter",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on the tape; those rejected by `trainable` become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable(&p.name)))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Parameters placed on one graph.
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Vars in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
