//! The multi-stage inlier classifier and its hybrid loss.

mod checkpoint;
mod train;

pub use checkpoint::{Checkpoint, NamedParameter, CHECKPOINT_VERSION};
pub use train::{
    hybrid_loss, LossTerms, Prediction, StageLoss, TrainRecord, Trainer,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Init, Linear, OrderAware, ParamBuilder, PointCn, RESIDUAL_INIT};
use crate::cga::{Cpa, CpaConfig, MbFfn};
use crate::csmgc::{Csmgc, CsmgcShape, StageFeatureBundle};
use crate::error::{Error, Result};
use crate::geometry::{weighted_eight_point, CorrespondenceSet, EssentialMatrix, EFFECTIVE_WEIGHT};
use crate::numeric::{Graph, Matrix, ParameterStore, Scalar, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Feature width.
    pub d: usize,
    /// Stage count when iterating.
    pub n_stages: usize,
    /// Neighbors per k-NN graph.
    pub k: usize,
    /// Ring size of the annular convolution.
    pub ring: usize,
    pub oa_clusters: usize,
    pub use_iter: bool,
    pub use_cga: bool,
    pub use_csmgc: bool,
    /// Weight of the epipolar term.
    pub gamma: f64,
    /// Epipolar residual below which a correspondence is an inlier.
    pub label_threshold: f64,
    /// A correspondence is predicted inlier when its logit exceeds this.
    pub logit_threshold: f64,
    /// Average the loss over all stages instead of using the last one only.
    pub deep_supervision: bool,
    pub cpa: CpaConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_stages: 3,
            k: 3,
            ring: 3,
            oa_clusters: 64,
            use_iter: true,
            use_cga: true,
            use_csmgc: true,
            gamma: 0.5,
            label_threshold: 1e-4,
            logit_threshold: 0.0,
            deep_supervision: true,
            cpa: CpaConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.oa_clusters == 0 {
            return bad("oa_clusters must be positive".into());
        }
        if self.n_stages == 0 {
            return bad("n_stages must be positive".into());
        }
        if self.ring == 0 || self.k == 0 || !self.k.is_multiple_of(self.ring) {
            return bad(format!("ring size {} must divide k = {}", self.ring, self.k));
        }
        if self.use_csmgc && !(self.use_iter && self.n_stages >= 3) {
            return bad("use_csmgc needs use_iter and n_stages >= 3".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and nonnegative".into());
        }
        if !(self.label_threshold > 0.0) {
            return bad("label_threshold must be positive".into());
        }
        Ok(())
    }

    /// Stages actually run.
    pub fn stages(&self) -> usize {
        if self.use_iter { self.n_stages } else { 1 }
    }

    pub fn with_ablation(&self, a: Ablation) -> Self {
        let (use_iter, use_cga, use_csmgc) = a.flags();
        Self {
            use_iter,
            use_cga,
            use_csmgc,
            ..self.clone()
        }
    }
}

/// The six module combinations compared in the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    Baseline,
    Cga,
    Iter,
    IterCga,
    IterCsmgc,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Baseline,
        Ablation::Cga,
        Ablation::Iter,
        Ablation::IterCga,
        Ablation::IterCsmgc,
        Ablation::Full,
    ];

    /// `(use_iter, use_cga, use_csmgc)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Ablation::Baseline => (false, false, false),
            Ablation::Cga => (false, true, false),
            Ablation::Iter => (true, false, false),
            Ablation::IterCga => (true, true, false),
            Ablation::IterCsmgc => (true, false, true),
            Ablation::Full => (true, true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Cga => "cga",
            Ablation::Iter => "iter",
            Ablation::IterCga => "iter+cga",
            Ablation::IterCsmgc => "iter+csmgc",
            Ablation::Full => "full",
        }
    }
}

/// Graph nodes produced by one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub features: Var,
    /// `N x 1`.
    pub logits: Var,
    /// `tanh(relu(logits))`, `N x 1`.
    pub weights: Var,
    pub bundle: StageFeatureBundle,
}

#[derive(Clone, Debug)]
struct Stage {
    embed: Linear,
    cga: Option<[(Cpa, MbFfn); 2]>,
    pcn1: PointCn,
    oa: OrderAware,
    pcn2: PointCn,
    csmgc: Option<Csmgc>,
    mlp1: Linear,
    mlp2: Linear,
    head: Linear,
}

/// Coordinate inputs shared by every stage.
#[derive(Clone, Copy, Debug)]
pub struct Inputs {
    /// `N x 4`.
    pub s: Var,
    pub p1: Var,
    pub p2: Var,
}

impl Inputs {
    pub fn new<T: Scalar>(g: &mut Graph<'_, T>, set: &CorrespondenceSet) -> Result<Self> {
        Ok(Self {
            s: g.input(set.to_matrix())?,
            p1: g.input(set.view_matrix(0))?,
            p2: g.input(set.view_matrix(1))?,
        })
    }
}

impl Stage {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &NetworkConfig, index: usize) -> Result<Self> {
        let d = cfg.d;
        let width = if index == 0 { 4 } else { 6 };
        let last = index + 1 == cfg.stages();
        let cga = if cfg.use_cga {
            let mut pair = |name: &str| -> Result<(Cpa, MbFfn)> {
                Ok((
                    Cpa::new(&mut b.scope(&format!("cpa{name}")), d, cfg.cpa)?,
                    MbFfn::new(&mut b.scope(&format!("mbffn{name}")), d)?,
                ))
            };
            Some([pair("1")?, pair("2")?])
        } else {
            None
        };
        let csmgc = if cfg.use_csmgc && last {
            Some(Csmgc::new(
                &mut b.scope("csmgc"),
                CsmgcShape {
                    d,
                    k: cfg.k,
                    ring: cfg.ring,
                    history: cfg.stages() - 2,
                },
            )?)
        } else {
            None
        };
        Ok(Self {
            embed: b.linear("embed", width, d, Init::FanIn)?,
            cga,
            pcn1: PointCn::new(&mut b.scope("pointcn1"), d)?,
            oa: OrderAware::new(&mut b.scope("oa"), d, cfg.oa_clusters)?,
            pcn2: PointCn::new(&mut b.scope("pointcn2"), d)?,
            csmgc,
            mlp1: b.linear("mlp1", d, d, Init::FanIn)?,
            mlp2: b.linear("mlp2", d, d, Init::Scaled(RESIDUAL_INIT))?,
            head: b.linear("head", d, 1, Init::FanIn)?,
        })
    }

    fn attend<T: Scalar>(&self, g: &mut Graph<'_, T>, which: usize, f: Var, x: &Inputs) -> Result<Var> {
        let Some(blocks) = &self.cga else {
            return Ok(f);
        };
        let (cpa, mbffn) = &blocks[which];
        let a = cpa.forward(g, f, x.p1, x.p2)?;
        let f = g.add(f, a)?;
        let m = mbffn.forward(g, f)?;
        g.add(f, m)
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: &Inputs,
        carry: Option<&StageOutput>,
        history: &[StageOutput],
    ) -> Result<StageOutput> {
        let n = g.value(x.s).rows();
        let input = match carry {
            Some(c) => {
                if g.value(c.logits).shape() != (n, 1) || g.value(c.weights).shape() != (n, 1) {
                    return Err(Error::Shape {
                        op: "stage_forward",
                        detail: format!("carry does not match {n} correspondences"),
                    });
                }
                g.concat_cols(&[x.s, c.logits, c.weights])?
            }
            None => x.s,
        };
        if g.value(input).cols() != g.store().value(self.embed.w).rows() {
            return Err(Error::Shape {
                op: "stage_forward",
                detail: "carry presence does not match the stage position".into(),
            });
        }
        let f = self.embed.forward(g, input)?;
        let f = self.attend(g, 0, f, x)?;
        let z1 = f;
        let f = self.pcn1.forward(g, f)?;
        let f = self.oa.forward(g, f)?;
        let f = self.pcn2.forward(g, f)?;
        let mut f = self.attend(g, 1, f, x)?;
        let z2 = f;
        if let Some(cs) = &self.csmgc {
            let m = history.len();
            let prev = history
                .last()
                .ok_or_else(|| Error::Config("cross-stage module without earlier stages".into()))?;
            let fused: Vec<Var> = history[..m - 1].iter().map(|s| s.bundle.z3).collect();
            let c = cs.forward(g, prev.bundle, &fused)?;
            f = g.add(f, c)?;
        }
        let h = self.mlp1.forward(g, f)?;
        let h = g.relu(h)?;
        let h = self.mlp2.forward(g, h)?;
        let z3 = g.add(f, h)?;
        let logits = self.head.forward(g, z3)?;
        let r = g.relu(logits)?;
        let weights = g.tanh(r)?;
        Ok(StageOutput {
            features: z3,
            logits,
            weights,
            bundle: StageFeatureBundle { z1, z2, z3 },
        })
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    stages: Vec<Stage>,
}

/// Values read off a forward pass.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    pub stages: Vec<StageOutput>,
    pub inputs: Inputs,
    /// Final-stage logits and weights.
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    /// `None` when even the fallback solve failed.
    pub e_hat: Option<EssentialMatrix>,
    /// Fewer than eight positive final weights; Ê came from the top-8 logits.
    pub fallback: bool,
}

/// Unit weights on the eight largest logits (ties to the lower index).
pub fn top8_weights(logits: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut w = vec![0.0; logits.len()];
    for &i in idx.iter().take(8) {
        w[i] = 1.0;
    }
    w
}

impl Network {
    /// Builds the network and registers freshly initialized parameters.
    pub fn init<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<(Self, ParameterStore<T>)> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let stages = (0..config.stages())
            .map(|i| Stage::new(&mut b.scope(&format!("stage{i}")), config, i))
            .collect::<Result<_>>()?;
        Ok((
            Self {
                config: config.clone(),
                stages,
            },
            store,
        ))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Runs every stage and estimates Ê from the final weights.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, set: &CorrespondenceSet) -> Result<NetworkOutput> {
        if set.len() < 16 {
            return Err(Error::TooFewRows {
                op: "network_forward",
                need: 16,
                got: set.len(),
            });
        }
        let inputs = Inputs::new(g, set)?;
        let mut outs: Vec<StageOutput> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let out = stage.forward(g, &inputs, outs.last(), &outs)?;
            outs.push(out);
        }
        let last = outs.last().expect("at least one stage");
        let col = |m: &Matrix<T>| m.data().iter().map(|v| v.f64()).collect::<Vec<f64>>();
        let logits = col(g.value(last.logits));
        let weights = col(g.value(last.weights));
        let positive = weights.iter().filter(|&&w| w > EFFECTIVE_WEIGHT).count();
        let fallback = positive < 8;
        let solve_w = if fallback { top8_weights(&logits) } else { weights.clone() };
        let e_hat = weighted_eight_point(set, &solve_w).ok();
        Ok(NetworkOutput {
            stages: outs,
            inputs,
            logits,
            weights,
            e_hat,
            fallback,
        })
    }
}
