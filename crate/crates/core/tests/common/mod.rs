#![allow(dead_code)]

use corrlab_core::blocks::ParamBuilder;
use corrlab_core::numeric::{
    finite_diff_check_resampled, GradCheck, Graph, Matrix, ParameterStore, Var,
};
use corrlab_core::Result;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Builds parameters with `build`, then overwrites every value with uniform
/// noise in `[-scale, scale]` so no layer sits at its special initialization.
pub fn randomized<B>(seed: u64, scale: f64, build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<B>) -> (B, ParameterStore<f64>) {
    let mut store = ParameterStore::new();
    let mut r = rng(seed);
    let block = {
        let mut b = ParamBuilder::new(&mut store, &mut r);
        build(&mut b).unwrap()
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (rows, cols) = store.value(id).shape();
        store.set_value(id, random(rows, cols, &mut r).map(|v| v * scale)).unwrap();
    }
    (block, store)
}

pub fn zero_params(store: &mut ParameterStore<f64>) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (rows, cols) = store.value(id).shape();
        store.set_value(id, Matrix::zeros(rows, cols)).unwrap();
    }
}

/// `sum(y ⊙ W)` for a fixed random `W`, turning a matrix op into a scalar.
pub fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let (rows, cols) = g.value(y).shape();
    let w = g.input(random(rows, cols, &mut r))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Finite-difference check of `f` at random points of the given shape,
/// resampling away from non-smooth points.
pub fn fd_check(
    store: &ParameterStore<f64>,
    shape: (usize, usize),
    seed: u64,
    f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
) -> GradCheck {
    let mut r = rng(seed);
    finite_diff_check_resampled(store, f, || random(shape.0, shape.1, &mut r).map(|v| 2.0 * v), 1e-6, 100).unwrap()
}

/// Evaluates `f` on a single input and returns the output value.
pub fn eval(store: &ParameterStore<f64>, x: &Matrix<f64>, f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>) -> Matrix<f64> {
    let mut g = Graph::new(store);
    let v = g.input(x.clone()).unwrap();
    let out = f(&mut g, v).unwrap();
    g.value(out).clone()
}
