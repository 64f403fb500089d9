use nalgebra::{DMatrix, SMatrix, SVector};

use super::{residual_parts, CorrespondenceSet, EssentialMatrix, Mat3, Vec3, RESIDUAL_DENOM_FLOOR};
use crate::error::{Error, Result};
use crate::numeric::{CustomOp, Graph, Matrix, Scalar, Var};

/// Weights at or below this do not count towards the eight required
/// correspondences.
pub const EFFECTIVE_WEIGHT: f64 = 1e-8;

/// Relative size of the eighth singular value below which the coefficient
/// matrix is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Relative eigen/singular gap below which the derivative is undefined.
const GAP_TOL: f64 = 1e-12;

type Vec9 = SVector<f64, 9>;
type Mat9 = SMatrix<f64, 9, 9>;

/// Similarity moving the centroid to the origin and the mean distance to √2.
pub fn hartley_transform(points: impl Iterator<Item = [f64; 2]> + Clone) -> Mat3 {
    let n = points.clone().count().max(1) as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points.map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { 2f64.sqrt() / mean_dist } else { 1.0 };
    Mat3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Closest rank-2 matrix in Frobenius norm.
pub fn project_rank2(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut s = svd.singular_values;
    s[2] = 0.0;
    u * Mat3::from_diagonal(&s) * vt
}

/// Everything the forward pass knows that the backward pass needs.
#[derive(Clone, Debug)]
struct Solve {
    e: Mat3,
    /// Columns are eigenvectors of the weighted normal matrix, ascending.
    eigvecs: Mat9,
    eigvals: [f64; 9],
    /// Unweighted constraint rows for every correspondence.
    rows: Vec<Vec9>,
    t1: Mat3,
    t2: Mat3,
    u: Mat3,
    s: Vec3,
    v: Mat3,
    p_norm: f64,
    w_scale: f64,
}

fn solve(set: &CorrespondenceSet, w: &[f64]) -> Result<Solve> {
    if w.len() != set.len() {
        return Err(Error::Shape {
            op: "weighted_eight_point",
            detail: format!("{} weights for {} correspondences", w.len(), set.len()),
        });
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config("eight-point weights must be finite and nonnegative".into()));
    }
    let effective = w.iter().filter(|&&v| v > EFFECTIVE_WEIGHT).count();
    if effective < 8 {
        return Err(Error::TooFewCorrespondences(effective));
    }
    let w_scale = w.iter().copied().fold(0.0, f64::max);

    let t1 = hartley_transform((0..set.len()).map(|i| set.first(i)));
    let t2 = hartley_transform((0..set.len()).map(|i| set.second(i)));
    let rows: Vec<Vec9> = (0..set.len())
        .map(|i| {
            let [x, y] = set.first(i);
            let [xp, yp] = set.second(i);
            let a = t1 * Vec3::new(x, y, 1.0);
            let b = t2 * Vec3::new(xp, yp, 1.0);
            Vec9::from_fn(|k, _| b[k / 3] * a[k % 3])
        })
        .collect();

    let active: Vec<usize> = (0..set.len()).filter(|&i| w[i] > 0.0).collect();
    let mut m = DMatrix::<f64>::zeros(active.len().max(9), 9);
    for (r, &i) in active.iter().enumerate() {
        let sw = (w[i] / w_scale).sqrt();
        for k in 0..9 {
            m[(r, k)] = sw * rows[i][k];
        }
    }
    let svd = m.svd(false, true);
    let sigma = &svd.singular_values;
    let vt = svd.v_t.expect("v requested");
    if sigma[7] <= RANK_TOL * sigma[0] {
        return Err(Error::Degenerate(
            "coefficient matrix has rank below 8".into(),
        ));
    }
    let mut eigvecs = Mat9::zeros();
    let mut eigvals = [0.0; 9];
    for k in 0..9 {
        let src = 8 - k;
        eigvals[k] = sigma[src] * sigma[src];
        for c in 0..9 {
            eigvecs[(c, k)] = vt[(src, c)];
        }
    }
    // Deterministic sign: largest-magnitude component positive.
    let null = eigvecs.column(0).into_owned();
    let imax = null.iamax();
    if null[imax] < 0.0 {
        let neg = -null;
        eigvecs.set_column(0, &neg);
    }
    let null = eigvecs.column(0);
    let f = Mat3::from_fn(|r, c| null[3 * r + c]);
    let x = t2.transpose() * f * t1;

    let xsvd = x.svd(true, true);
    let (u, v) = (xsvd.u.expect("u requested"), xsvd.v_t.expect("v requested").transpose());
    let s = xsvd.singular_values;
    let p = u * Mat3::from_diagonal(&Vec3::new(s[0], s[1], 0.0)) * v.transpose();
    let p_norm = p.norm();
    if !(p_norm > 0.0) {
        return Err(Error::Degenerate("estimated matrix has rank below 2".into()));
    }
    Ok(Solve {
        e: p / p_norm,
        eigvecs,
        eigvals,
        rows,
        t1,
        t2,
        u,
        s,
        v,
        p_norm,
        w_scale,
    })
}

/// Unit-norm minimizer of `Σ wᵢ (p'ᵢᵀ E pᵢ)²`, projected to rank 2.
pub fn weighted_eight_point(set: &CorrespondenceSet, w: &[f64]) -> Result<EssentialMatrix> {
    Ok(EssentialMatrix(solve(set, w)?.e))
}

impl Solve {
    /// `dL/dw` from `dL/dE`.
    fn backward(&self, grad_e: &Mat3) -> Result<Vec<f64>> {
        // E = P / ‖P‖
        let e = &self.e;
        let dp = (grad_e - e * grad_e.dot(e)) / self.p_norm;

        // P = X - s3 u3 v3ᵀ
        let s = &self.s;
        if s[1] - s[2] <= GAP_TOL * s[0] {
            return Err(Error::Degenerate(
                "rank-2 projection at a singular-value tie".into(),
            ));
        }
        let gb = self.u.transpose() * dp * self.v;
        let mut h = gb;
        h[(2, 2)] = 0.0;
        let s3 = s[2];
        for i in 0..2 {
            let si = s[i];
            let den = si * si - s3 * s3;
            h[(i, 2)] = (gb[(i, 2)] * si * si + gb[(2, i)] * si * s3) / den;
            h[(2, i)] = (gb[(2, i)] * si * si + gb[(i, 2)] * si * s3) / den;
        }
        let dx = self.u * h * self.v.transpose();

        // X = T2ᵀ F T1
        let df = self.t2 * dx * self.t1.transpose();
        let g = Vec9::from_fn(|k, _| df[(k / 3, k % 3)]);

        // F is the smallest eigenvector of A(w) = Σ wᵢ aᵢ aᵢᵀ.
        let lambda0 = self.eigvals[0];
        let lmax = self.eigvals[8];
        if self.eigvals[1] - lambda0 <= GAP_TOL * lmax {
            return Err(Error::Degenerate(
                "smallest singular value is not simple".into(),
            ));
        }
        let v0 = self.eigvecs.column(0).into_owned();
        let mut hvec = Vec9::zeros();
        for j in 1..9 {
            let uj = self.eigvecs.column(j);
            hvec += uj * (uj.dot(&g) / (lambda0 - self.eigvals[j]));
        }
        Ok(self
            .rows
            .iter()
            .map(|a| hvec.dot(a) * a.dot(&v0) / self.w_scale)
            .collect())
    }
}

/// Differentiable weighted eight-point solve as a graph node.
pub struct EightPointOp {
    solve: Solve,
}

impl EightPointOp {
    /// Adds `E(w)` (a 3x3 node) to the graph; `weights` must be `N x 1`.
    pub fn apply<T: Scalar>(
        g: &mut Graph<'_, T>,
        set: &CorrespondenceSet,
        weights: Var,
    ) -> Result<(Var, EssentialMatrix)> {
        let w: Vec<f64> = g.value(weights).data().iter().map(|v| v.f64()).collect();
        let solve = solve(set, &w)?;
        let e = solve.e;
        let value = Matrix::from_fn(3, 3, |r, c| T::of(e[(r, c)]));
        let var = g.custom(&[weights], value, Box::new(Self { solve }))?;
        Ok((var, EssentialMatrix(e)))
    }
}

impl<T: Scalar> CustomOp<T> for EightPointOp {
    fn name(&self) -> &'static str {
        "weighted_eight_point"
    }

    fn backward(&self, inputs: &[&Matrix<T>], _output: &Matrix<T>, grad: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let ge = Mat3::from_fn(|r, c| grad.get(r, c).f64());
        let dw = self.solve.backward(&ge)?;
        let (r, c) = inputs[0].shape();
        Ok(vec![Matrix::new(r, c, dw.into_iter().map(T::of).collect())?])
    }
}

struct EpipolarLossOp {
    points: Vec<[f64; 4]>,
}

impl EpipolarLossOp {
    fn eval(&self, e: &Mat3, want_grad: bool) -> (f64, Mat3) {
        let mut total = 0.0;
        let mut grad = Mat3::zeros();
        for p in &self.points {
            let (num, den) = residual_parts(e, [p[0], p[1]], [p[2], p[3]]);
            let clamped = den < RESIDUAL_DENOM_FLOOR;
            let den = den.max(RESIDUAL_DENOM_FLOOR);
            total += num * num / den;
            if want_grad {
                let x = Vec3::new(p[0], p[1], 1.0);
                let xp = Vec3::new(p[2], p[3], 1.0);
                let ex = e * x;
                let etxp = e.transpose() * xp;
                grad += xp * x.transpose() * (2.0 * num / den);
                if !clamped {
                    let k = -num * num / (den * den) * 2.0;
                    for r in 0..2 {
                        // ∂(E x)_r / ∂E = e_r xᵀ and ∂(Eᵀ x')_r / ∂E = x' e_rᵀ
                        for c in 0..3 {
                            grad[(r, c)] += k * ex[r] * x[c];
                            grad[(c, r)] += k * etxp[r] * xp[c];
                        }
                    }
                }
            }
        }
        let n = self.points.len() as f64;
        (total / n, grad / n)
    }
}

impl<T: Scalar> CustomOp<T> for EpipolarLossOp {
    fn name(&self) -> &'static str {
        "epipolar_loss"
    }

    fn backward(&self, inputs: &[&Matrix<T>], _output: &Matrix<T>, grad: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let e = Mat3::from_fn(|r, c| inputs[0].get(r, c).f64());
        let (_, ge) = self.eval(&e, true);
        let scale = grad.get(0, 0).f64();
        Ok(vec![Matrix::from_fn(3, 3, |r, c| T::of(scale * ge[(r, c)]))])
    }
}

/// Mean epipolar residual of the selected correspondences under a 3x3
/// matrix node (used as-is, without renormalization).
pub fn epipolar_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    e: Var,
    set: &CorrespondenceSet,
    index: &[usize],
) -> Result<Var> {
    if g.value(e).shape() != (3, 3) {
        return Err(Error::Shape {
            op: "epipolar_loss",
            detail: format!("{:?}", g.value(e).shape()),
        });
    }
    if index.is_empty() {
        return Err(Error::TooFewRows {
            op: "epipolar_loss",
            need: 1,
            got: 0,
        });
    }
    let op = EpipolarLossOp {
        points: index.iter().map(|&i| set.points()[i]).collect(),
    };
    let em = Mat3::from_fn(|r, c| g.value(e).get(r, c).f64());
    let (value, _) = op.eval(&em, false);
    g.custom(&[e], Matrix::scalar(T::of(value)), Box::new(op))
}
