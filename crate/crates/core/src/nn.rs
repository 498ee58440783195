//! Parameter layouts for the small dense layers shared by the planner.

use rand::Rng;
use serde::{Deserialize, Serialize};
use spacetoken_diff::{Bindings, ParameterStore, Scalar, Tensor};

use crate::error::Result;

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn init_uniform<T: Scalar>(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Self { prefix: prefix.into(), input, output }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn register<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        let w = init_uniform(rng, self.input, self.input * self.output);
        store.insert(self.weight_name(), &[self.input, self.output], w)?;
        store.insert(self.bias_name(), &[self.output], vec![T::zero(); self.output])?;
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, params: &Bindings<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(params.get(&self.weight_name())?)?;
        Ok(y.add(params.get(&self.bias_name())?)?)
    }
}

/// `linear -> GELU -> linear`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(prefix: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            first: Linear::new(format!("{prefix}.fc1"), input, hidden),
            second: Linear::new(format!("{prefix}.fc2"), hidden, output),
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.first.register(store, rng)?;
        self.second.register(store, rng)
    }

    pub fn forward<T: Scalar>(&self, params: &Bindings<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.first.forward(params, x)?.gelu();
        self.second.forward(params, &h)
    }
}
