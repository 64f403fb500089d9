use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numeric::{Graph, Matrix, ParamId, ParameterStore, Scalar, Var};

/// How a weight matrix is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    FanIn,
    /// Fan-in uniform scaled by the factor; used for the last layer of a
    /// residual branch so the block starts close to the identity.
    Scaled(f64),
    Zero,
}

/// Registers named parameters under a dotted prefix.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParameterStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParameterStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            prefix: self.name(name),
            store: &mut *self.store,
            rng: &mut *self.rng,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn weight(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        let bound = match init {
            Init::FanIn => 1.0 / (rows.max(1) as f64).sqrt(),
            Init::Scaled(s) => s / (rows.max(1) as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let name = self.name(name);
        self.store.add_uniform(name, rows, cols, bound, self.rng)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Result<ParamId> {
        let name = self.name(name);
        self.store.add(name, Matrix::filled(rows, cols, T::of(value)))
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize, init: Init) -> Result<Linear> {
        let mut s = self.scope(name);
        Ok(Linear {
            w: s.weight("w", din, dout, init)?,
            b: s.constant("b", 1, dout, 0.0)?,
        })
    }

    pub fn affine(&mut self, name: &str, d: usize) -> Result<Affine> {
        let mut s = self.scope(name);
        Ok(Affine {
            gamma: s.constant("gamma", 1, d, 1.0)?,
            beta: s.constant("beta", 1, d, 0.0)?,
        })
    }
}

/// Per-row `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = g.param(self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Learnable per-channel scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Affine {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        let y = g.mul_row(x, gamma)?;
        g.add_row(y, beta)
    }
}

/// Context norm, affine, ReLU.
#[derive(Clone, Copy, Debug)]
pub struct NormAct {
    pub affine: Affine,
}

impl NormAct {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            affine: b.affine(name, d)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = g.context_norm(x)?;
        let h = self.affine.forward(g, h)?;
        g.relu(h)
    }
}
