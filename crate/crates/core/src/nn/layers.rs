use rand::Rng;

use super::{ParamInit, INIT_STD};
use crate::error::Result;
use crate::tensor::{Float, ParamId, ParamStore, Tape, Var};

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng>(init: &mut ParamInit<'_, T, R>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: init.normal("weight", &[in_dim, out_dim], INIT_STD),
            bias: bias.then(|| init.zeros("bias", &[out_dim])),
            in_dim,
            out_dim,
        }
    }

    /// Same as [`Linear::new`] with an all-zero weight.
    pub fn zeroed<T: Float, R: Rng>(init: &mut ParamInit<'_, T, R>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: init.zeros("weight", &[in_dim, out_dim]),
            bias: bias.then(|| init.zeros("bias", &[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add(tape.param(store, b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Float, R: Rng>(init: &mut ParamInit<'_, T, R>, dim: usize) -> Self {
        Self {
            gamma: init.ones("weight", &[dim]),
            beta: init.zeros("bias", &[dim]),
        }
    }

    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(tape.param(store, self.gamma), tape.param(store, self.beta), Self::EPS)
    }
}

/// Two-layer feed-forward block with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float, R: Rng>(init: &mut ParamInit<'_, T, R>, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(&mut init.sub("fc1"), dim, hidden, true),
            fc2: Linear::new(&mut init.sub("fc2"), hidden, dim, true),
        }
    }

    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(tape, store, x)?.gelu();
        self.fc2.forward(tape, store, h)
    }
}
