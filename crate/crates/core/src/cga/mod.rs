//! Contextual geometric attention: content plus position attention over the
//! correspondence set, and a multi-branch feed-forward network.

use serde::{Deserialize, Serialize};

use crate::blocks::{Affine, Init, Linear, ParamBuilder, RESIDUAL_INIT};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpaConfig {
    /// Divide the geometric logits by √d as well.
    pub scale_geometric: bool,
    /// Use one positional encoder for both views.
    pub share_encoders: bool,
}

/// Linear map, context norm, affine, ReLU.
#[derive(Clone, Debug)]
struct Projection {
    linear: Linear,
    affine: Affine,
}

impl Projection {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, d: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            linear: s.linear("linear", d, d, Init::FanIn)?,
            affine: s.affine("norm", d)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.linear.forward(g, x)?;
        let h = g.context_norm(h)?;
        let h = self.affine.forward(g, h)?;
        g.relu(h)
    }
}

/// Two-layer coordinate encoder `2 -> d -> d`.
#[derive(Clone, Debug)]
struct Encoder {
    l1: Linear,
    l2: Linear,
}

impl Encoder {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, d: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            l1: s.linear("l1", 2, d, Init::FanIn)?,
            l2: s.linear("l2", d, d, Init::FanIn)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, p: Var) -> Result<Var> {
        let h = self.l1.forward(g, p)?;
        let h = g.relu(h)?;
        self.l2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Cpa {
    d: usize,
    config: CpaConfig,
    q: Projection,
    k: Projection,
    v: Projection,
    enc1: Encoder,
    enc2: Option<Encoder>,
}

/// Intermediate values of [`Cpa::forward_parts`].
#[derive(Clone, Copy, Debug)]
pub struct CpaParts {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub position: Var,
    /// `N x N` content attention.
    pub a_f: Var,
    /// `N x N` geometric attention.
    pub a_g: Var,
    pub output: Var,
}

impl Cpa {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize, config: CpaConfig) -> Result<Self> {
        Ok(Self {
            d,
            config,
            q: Projection::new(b, "q", d)?,
            k: Projection::new(b, "k", d)?,
            v: Projection::new(b, "v", d)?,
            enc1: Encoder::new(b, "enc1", d)?,
            enc2: if config.share_encoders {
                None
            } else {
                Some(Encoder::new(b, "enc2", d)?)
            },
        })
    }

    /// `f` is `N x d`; `p1`, `p2` are the `N x 2` coordinates of each view.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var, p1: Var, p2: Var) -> Result<Var> {
        Ok(self.forward_parts(g, f, p1, p2)?.output)
    }

    pub fn forward_parts<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var, p1: Var, p2: Var) -> Result<CpaParts> {
        let (n, d) = g.value(f).shape();
        if d != self.d {
            return Err(Error::Shape {
                op: "cpa",
                detail: format!("feature width {d} != {}", self.d),
            });
        }
        if g.value(p1).shape() != (n, 2) || g.value(p2).shape() != (n, 2) {
            return Err(Error::Shape {
                op: "cpa",
                detail: "coordinates must be N x 2 for both views".into(),
            });
        }
        let q = self.q.forward(g, f)?;
        let k = self.k.forward(g, f)?;
        let v = self.v.forward(g, f)?;

        let scale = T::of(1.0 / (self.d as f64).sqrt());
        let logits_f = g.matmul_t(q, false, k, true)?;
        let logits_f = g.scale(logits_f, scale)?;
        let a_f = g.softmax_rows(logits_f)?;

        let e1 = self.enc1.forward(g, p1)?;
        let e2 = self.enc2.as_ref().unwrap_or(&self.enc1).forward(g, p2)?;
        let position = g.add(e1, e2)?;
        let mut logits_g = g.matmul_t(q, false, position, true)?;
        if self.config.scale_geometric {
            logits_g = g.scale(logits_g, scale)?;
        }
        let a_g = g.softmax_rows(logits_g)?;

        let a = g.add(a_g, a_f)?;
        let output = g.matmul(a, v)?;
        Ok(CpaParts {
            q,
            k,
            v,
            position,
            a_f,
            a_g,
            output,
        })
    }
}

/// Linear, normalization, GELU, linear. Pooled branches see a single row,
/// where context norm is undefined, so they use the affine part only.
#[derive(Clone, Debug)]
struct Cbgc {
    l1: Linear,
    norm: Affine,
    l2: Linear,
    context: bool,
}

impl Cbgc {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, d: usize, context: bool) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            l1: s.linear("l1", d, d, Init::FanIn)?,
            norm: s.affine("norm", d)?,
            l2: s.linear("l2", d, d, Init::Scaled(RESIDUAL_INIT))?,
            context,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.l1.forward(g, x)?;
        if self.context {
            h = g.context_norm(h)?;
        }
        let h = self.norm.forward(g, h)?;
        let h = g.gelu(h)?;
        self.l2.forward(g, h)
    }
}

/// Layer norm followed by average-pool, max-pool and identity branches,
/// each through its own CBGC, summed.
#[derive(Clone, Debug)]
pub struct MbFfn {
    avg: Cbgc,
    max: Cbgc,
    id: Cbgc,
}

#[derive(Clone, Copy, Debug)]
pub struct MbFfnParts {
    pub normed: Var,
    /// `1 x d` branch inputs before their CBGC.
    pub avg_in: Var,
    pub max_in: Var,
    pub output: Var,
}

impl MbFfn {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize) -> Result<Self> {
        Ok(Self {
            avg: Cbgc::new(b, "avg", d, false)?,
            max: Cbgc::new(b, "max", d, false)?,
            id: Cbgc::new(b, "id", d, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        Ok(self.forward_parts(g, f)?.output)
    }

    pub fn forward_parts<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<MbFfnParts> {
        let n = g.value(f).rows();
        let normed = g.layer_norm(f)?;
        let avg_in = g.mean_rows(normed)?;
        let max_in = g.max_rows(normed)?;
        let a = self.avg.forward(g, avg_in)?;
        let a = g.broadcast_rows(a, n)?;
        let m = self.max.forward(g, max_in)?;
        let m = g.broadcast_rows(m, n)?;
        let c = self.id.forward(g, normed)?;
        let s = g.add(a, m)?;
        let output = g.add(s, c)?;
        Ok(MbFfnParts {
            normed,
            avg_in,
            max_in,
            output,
        })
    }
}
