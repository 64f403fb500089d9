use std::collections::HashMap;

use rand::{Rng, RngExt};

use super::graph::Gradients;
use super::{Matrix, Scalar};
use crate::error::{Error, Result};

/// Handle to a parameter in a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    first_moment: Matrix<T>,
    second_moment: Matrix<T>,
}

/// Adaptive-moment optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable matrices with their gradients and optimizer state.
#[derive(Clone, Default)]
pub struct ParameterStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: Matrix::zeros(r, c),
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Registers a `rows x cols` matrix drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let value = Matrix::from_fn(rows, cols, |_, _| {
            if bound > 0.0 {
                T::of(rng.random_range(-bound..bound))
            } else {
                T::zero()
            }
        });
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + use<T> {
        (0..self.params.len()).map(ParamId)
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Matrix<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        p.value.same_shape(&value, "set_value")?;
        p.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Adds the parameter gradients of one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected adaptive-moment update from the stored gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one, lr, eps) = (T::one(), T::of(cfg.learning_rate), T::of(cfg.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for p in &mut self.params {
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_grad_keeps_values() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::<f64>::new();
        let id = store.add_uniform("w", 2, 3, 1.0, &mut rng).unwrap();
        let before = store.value(id).clone();
        store.params[id.0].grad = Matrix::filled(2, 3, 5.0);
        store.zero_grad();
        assert_eq!(store.value(id), &before);
        assert_eq!(store.grad(id).max_abs(), 0.0);
        assert_eq!(store.grad(id).shape(), store.value(id).shape());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParameterStore::<f32>::new();
        store.add("a", Matrix::zeros(1, 1)).unwrap();
        assert!(matches!(store.add("a", Matrix::zeros(1, 1)), Err(Error::DuplicateParameter(_))));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParameterStore::<f64>::new();
        let id = store.add("x", Matrix::row_vector(vec![1.0, -1.0])).unwrap();
        store.params[id.0].grad = Matrix::row_vector(vec![2.0, -3.0]);
        store.adam_step(&AdamConfig::default());
        // First bias-corrected step has magnitude lr regardless of gradient scale.
        let v = store.value(id);
        assert!((v.get(0, 0) - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v.get(0, 1) - (-1.0 + 1e-3)).abs() < 1e-9);
    }
}
