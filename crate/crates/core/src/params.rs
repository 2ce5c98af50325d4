//! Named parameter storage, seeded initialization and tape binding.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered `name -> Parameter` store. Insertion order is the canonical
/// order used by the optimizer and the checkpoint manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    params: IndexMap<String, Parameter>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name.clone(), Parameter { name, value, trainable: true });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter `{name}`")))
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}`: expected {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Exact number of scalar parameters.
    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Sum of element counts of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .values()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Register every parameter on `tape`: trainable ones as gradient
    /// leaves, frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .values()
            .map(|p| {
                let v = if p.trainable { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) };
                (p.name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters registered on a particular tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, Var)>,
        S: Into<String>,
    {
        Bound { vars: pairs.into_iter().map(|(n, v)| (n.into(), v)).collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("parameter `{name}` is not bound")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated to two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// 64-bit FNV-1a, used to derive a per-parameter seed from its name so
/// that adding or removing a module does not shift any other module's
/// initial values.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn init_tensor(shape: &[usize], init: Init, seed: u64, name: &str) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::ones(shape.to_vec()),
        Init::TruncNormal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
            Tensor::from_fn(shape.to_vec(), |_| loop {
                let z: f64 = StandardNormal.sample(&mut rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
        }
    }
}

/// Convenience wrapper that creates parameters with the documented
/// initialization scheme.
pub struct ParamBuilder {
    seed: u64,
    store: ModelParams,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder { seed, store: ModelParams::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<()> {
        let name = name.into();
        let value = init_tensor(shape, init, self.seed, &name);
        self.store.insert(name, value)
    }

    /// `<prefix>.weight` [d_in, d_out] and optionally `<prefix>.bias` [d_out].
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Result<()> {
        self.add(format!("{prefix}.weight"), &[d_in, d_out], Init::TruncNormal(INIT_STD))?;
        if bias {
            self.add(format!("{prefix}.bias"), &[d_out], Init::Zeros)?;
        }
        Ok(())
    }

    /// `<prefix>.gamma` (ones) and `<prefix>.beta` (zeros).
    pub fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.add(format!("{prefix}.gamma"), &[d], Init::Ones)?;
        self.add(format!("{prefix}.beta"), &[d], Init::Zeros)
    }

    pub fn conv(&mut self, prefix: &str, shape: [usize; 4], weight_init: Init) -> Result<()> {
        self.add(format!("{prefix}.weight"), &shape, weight_init)?;
        self.add(format!("{prefix}.bias"), &[shape[0]], Init::Zeros)
    }

    pub fn finish(self) -> ModelParams {
        self.store
    }
}
