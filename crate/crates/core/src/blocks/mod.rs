//! PointCN residual block, Order-Aware cluster block and squeeze-excitation fusion.

mod layers;

pub use layers::{Affine, Init, Linear, NormAct, ParamBuilder};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Matrix, Scalar, Var};

/// Channel reduction ratio of the SE excitation bottleneck.
pub const SE_REDUCTION: usize = 4;

/// Scale of the last layer in every residual branch.
pub const RESIDUAL_INIT: f64 = 0.1;

/// `f + L2(NA2(L1(NA1(f))))` where `NA` is context norm, affine, ReLU.
#[derive(Clone, Debug)]
pub struct PointCn {
    na1: NormAct,
    l1: Linear,
    na2: NormAct,
    l2: Linear,
}

impl PointCn {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize) -> Result<Self> {
        Ok(Self {
            na1: NormAct::new(b, "na1", d)?,
            l1: b.linear("l1", d, d, Init::FanIn)?,
            na2: NormAct::new(b, "na2", d)?,
            l2: b.linear("l2", d, d, Init::Scaled(RESIDUAL_INIT))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        let h = self.na1.forward(g, f)?;
        let h = self.l1.forward(g, h)?;
        let h = self.na2.forward(g, h)?;
        let h = self.l2.forward(g, h)?;
        g.add(f, h)
    }
}

/// Soft pooling of N rows to m clusters, cluster-space mixing and soft
/// unpooling, added back to the input.
#[derive(Clone, Debug)]
pub struct OrderAware {
    clusters: usize,
    down_na: NormAct,
    down: Linear,
    mix_clusters: Linear,
    mix_channels: Linear,
    up_na: NormAct,
    up: Linear,
    out: Linear,
}

/// Intermediate values of [`OrderAware::forward_parts`].
#[derive(Clone, Copy, Debug)]
pub struct OrderAwareParts {
    /// `N x m` pooling assignment, rows sum to one.
    pub assign: Var,
    /// `m x d` assignment-weighted cluster means.
    pub pooled: Var,
    pub output: Var,
}

impl OrderAware {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("order-aware block needs at least one cluster".into()));
        }
        Ok(Self {
            clusters: m,
            down_na: NormAct::new(b, "down_na", d)?,
            down: b.linear("down", d, m, Init::FanIn)?,
            mix_clusters: b.linear("mix_clusters", m, m, Init::Scaled(RESIDUAL_INIT))?,
            mix_channels: b.linear("mix_channels", d, d, Init::Scaled(RESIDUAL_INIT))?,
            up_na: NormAct::new(b, "up_na", d)?,
            up: b.linear("up", d, m, Init::FanIn)?,
            out: b.linear("out", d, d, Init::Scaled(RESIDUAL_INIT))?,
        })
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        Ok(self.forward_parts(g, f)?.output)
    }

    pub fn forward_parts<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<OrderAwareParts> {
        let n = g.value(f).rows();
        let h = self.down_na.forward(g, f)?;
        let logits = self.down.forward(g, h)?;
        let assign = g.softmax_rows(logits)?;

        // Column-normalize so each cluster row is a weighted mean.
        let ones = g.input(Matrix::filled(1, n, T::one()))?;
        let mass = g.matmul(ones, assign)?;
        let inv = g.recip(mass)?;
        let weights = g.mul_row(assign, inv)?;
        let pooled = g.matmul_t(weights, true, f, false)?;

        let pt = g.transpose(pooled)?;
        let a = g.relu(pt)?;
        let a = self.mix_clusters.forward(g, a)?;
        let pt = g.add(pt, a)?;
        let p = g.transpose(pt)?;
        let c = g.relu(p)?;
        let c = self.mix_channels.forward(g, c)?;
        let p = g.add(p, c)?;

        let h = self.up_na.forward(g, f)?;
        let up_logits = self.up.forward(g, h)?;
        let up = g.softmax_rows(up_logits)?;
        let u = g.matmul(up, p)?;
        let u = self.out.forward(g, u)?;
        let output = g.add(f, u)?;
        Ok(OrderAwareParts {
            assign,
            pooled,
            output,
        })
    }
}

/// Squeeze-excitation over channel-concatenated inputs, compressed back to d.
#[derive(Clone, Debug)]
pub struct SeFuse {
    inputs: usize,
    d: usize,
    excite1: Linear,
    excite2: Linear,
    compress: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct SeParts {
    /// `1 x dL` per-channel means of the concatenation.
    pub squeezed: Var,
    /// `1 x dL`, strictly inside (0, 1).
    pub gates: Var,
    /// `N x dL` concatenation scaled by the gates.
    pub gated: Var,
    pub output: Var,
}

impl SeFuse {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize, inputs: usize) -> Result<Self> {
        if inputs == 0 {
            return Err(Error::Config("se fusion needs at least one input".into()));
        }
        let c = d * inputs;
        let hidden = (c / SE_REDUCTION).max(1);
        Ok(Self {
            inputs,
            d,
            excite1: b.linear("excite1", c, hidden, Init::FanIn)?,
            excite2: b.linear("excite2", hidden, c, Init::FanIn)?,
            compress: b.linear("compress", c, d, Init::FanIn)?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, zs: &[Var]) -> Result<Var> {
        Ok(self.forward_parts(g, zs)?.output)
    }

    pub fn forward_parts<T: Scalar>(&self, g: &mut Graph<'_, T>, zs: &[Var]) -> Result<SeParts> {
        if zs.is_empty() {
            return Err(Error::TooFewRows {
                op: "se_fuse",
                need: 1,
                got: 0,
            });
        }
        if zs.len() != self.inputs {
            return Err(Error::Shape {
                op: "se_fuse",
                detail: format!("built for {} inputs, got {}", self.inputs, zs.len()),
            });
        }
        if let Some(z) = zs.iter().find(|&&z| g.value(z).cols() != self.d) {
            return Err(Error::Shape {
                op: "se_fuse",
                detail: format!("input width {} != {}", g.value(*z).cols(), self.d),
            });
        }
        let cat = g.concat_cols(zs)?;
        let squeezed = g.mean_rows(cat)?;
        let h = self.excite1.forward(g, squeezed)?;
        let h = g.relu(h)?;
        let h = self.excite2.forward(g, h)?;
        let gates = g.sigmoid(h)?;
        let gated = g.mul_row(cat, gates)?;
        let output = self.compress.forward(g, gated)?;
        Ok(SeParts {
            squeezed,
            gates,
            gated,
            output,
        })
    }
}
