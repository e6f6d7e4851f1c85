//! Parameterized building blocks shared by the network stages.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully connected layer `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{name}.w` (uniform fan-in init) and, if requested, a zero
    /// `{name}.b`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.w"), in_dim, out_dim, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(1, out_dim))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        if x.cols() != self.in_dim {
            return dim_err(
                "linear",
                format!("layer expects {} inputs, got {}", self.in_dim, x.cols()),
            );
        }
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, &w, b.as_ref())
    }

    /// `relu(x·W + b)`.
    pub fn forward_relu(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let y = self.forward(tape, store, x)?;
        tape.relu(&y)
    }
}
