use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{top8_weights, Network, NetworkConfig, NetworkOutput};
use crate::error::{Error, Result};
use crate::geometry::{epipolar_loss, CorrespondenceSet, EightPointOp, EssentialMatrix, EFFECTIVE_WEIGHT};
use crate::numeric::{AdamConfig, Graph, Matrix, ParameterStore, Scalar, Var};
use crate::synthgen::ScenePair;

/// Loss terms of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub l_c: f64,
    pub l_e: f64,
    /// The scene has no inliers; `l_e` is 0.
    pub no_inliers: bool,
    /// Fewer than eight positive weights; Ê came from the top-8 logits and
    /// `l_e` carries no gradient to the weights.
    pub fallback: bool,
    /// The weighted solve was degenerate; `l_e` is 0.
    pub solve_failed: bool,
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    /// Scalar node to differentiate.
    pub total: Var,
    pub stages: Vec<StageLoss>,
    /// Means over the supervised stages.
    pub l_c: f64,
    pub l_e: f64,
    pub total_value: f64,
}

/// `mean_s (l_c + gamma * l_e)` over the supervised stages.
///
/// `l_c` is class-rebalanced BCE on the logits (positives weighted by
/// `n_neg / n_pos`); `l_e` is the mean epipolar residual of the ground-truth
/// inliers under the stage's weighted eight-point estimate.
pub fn hybrid_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    out: &NetworkOutput,
    set: &CorrespondenceSet,
    labels: &[bool],
    config: &NetworkConfig,
) -> Result<LossTerms> {
    let n = set.len();
    if labels.len() != n {
        return Err(Error::Shape {
            op: "hybrid_loss",
            detail: format!("{} labels for {n} correspondences", labels.len()),
        });
    }
    let inliers: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    let n_pos = inliers.len();
    let n_neg = n - n_pos;
    let pos_weight = if n_pos > 0 { n_neg as f64 / n_pos as f64 } else { 1.0 };
    let targets: Vec<T> = labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect();
    let weights: Vec<T> = labels.iter().map(|&l| T::of(if l { pos_weight } else { 1.0 })).collect();

    let supervised = if config.deep_supervision {
        &out.stages[..]
    } else {
        &out.stages[out.stages.len() - 1..]
    };
    let mut totals = Vec::with_capacity(supervised.len());
    let mut stages = Vec::with_capacity(supervised.len());
    for st in supervised {
        let l_c = g.weighted_bce(st.logits, &targets, &weights)?;
        let mut info = StageLoss {
            l_c: g.value(l_c).item()?.f64(),
            l_e: 0.0,
            no_inliers: n_pos == 0,
            fallback: false,
            solve_failed: false,
        };
        let mut total = l_c;
        if n_pos > 0 {
            let w: Vec<f64> = g.value(st.weights).data().iter().map(|v| v.f64()).collect();
            let positive = w.iter().filter(|&&v| v > EFFECTIVE_WEIGHT).count();
            g.note_branch(positive >= 8);
            let solve_input = if positive >= 8 {
                st.weights
            } else {
                info.fallback = true;
                let logits: Vec<f64> = g.value(st.logits).data().iter().map(|v| v.f64()).collect();
                let top = top8_weights(&logits);
                g.note_branch(top.iter().map(|&v| v > 0.0).collect::<Vec<_>>());
                let fw = top.into_iter().map(T::of).collect();
                g.input(Matrix::new(n, 1, fw)?)?
            };
            match EightPointOp::apply(g, set, solve_input) {
                Ok((e, _)) => {
                    let l_e = epipolar_loss(g, e, set, &inliers)?;
                    info.l_e = g.value(l_e).item()?.f64();
                    let scaled = g.scale(l_e, T::of(config.gamma))?;
                    total = g.add(l_c, scaled)?;
                }
                Err(Error::Degenerate(_)) | Err(Error::TooFewCorrespondences(_)) => info.solve_failed = true,
                Err(e) => return Err(e),
            }
        }
        totals.push(total);
        stages.push(info);
    }
    let s = stages.len() as f64;
    let mut total = totals[0];
    for &t in &totals[1..] {
        total = g.add(total, t)?;
    }
    let total = g.scale(total, T::of(1.0 / s))?;
    Ok(LossTerms {
        total,
        l_c: stages.iter().map(|x| x.l_c).sum::<f64>() / s,
        l_e: stages.iter().map(|x| x.l_e).sum::<f64>() / s,
        total_value: g.value(total).item()?.f64(),
        stages,
    })
}

/// One optimizer step's worth of bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub scene_id: u64,
    pub stages: Vec<StageLoss>,
    pub l_c: f64,
    pub l_e: f64,
    pub total: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

impl TrainRecord {
    /// Equality ignoring the wall-time field.
    pub fn same_numbers(&self, other: &Self) -> bool {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        } == Self {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// Inference result for one correspondence set.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    /// `logit > logit_threshold`.
    pub inliers: Vec<bool>,
    pub e_hat: Option<EssentialMatrix>,
    pub fallback: bool,
}

/// Network, parameters and optimizer state.
#[derive(Clone)]
pub struct Trainer<T: Scalar> {
    pub network: Network,
    pub store: ParameterStore<T>,
    pub adam: AdamConfig,
    /// Rescale gradients whose norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &NetworkConfig, seed: u64, adam: AdamConfig) -> Result<Self> {
        let (network, store) = Network::init(config, seed)?;
        Ok(Self {
            network,
            store,
            adam,
            grad_clip: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        self.network.config()
    }

    /// Norm of each stage's parameters, for divergence reports.
    fn stage_norms(&self) -> String {
        let mut out: Vec<(String, f64)> = Vec::new();
        for (_, p) in self.store.iter() {
            let stage = p.name.split('.').next().unwrap_or("").to_string();
            let sq: f64 = p.value.data().iter().map(|v| v.f64() * v.f64()).sum();
            match out.last_mut() {
                Some((s, acc)) if *s == stage => *acc += sq,
                _ => out.push((stage, sq)),
            }
        }
        out.iter()
            .map(|(s, sq)| format!("{s}={:.4e}", sq.sqrt()))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn diverged(&self, what: impl std::fmt::Display) -> Error {
        Error::Diverged(format!("{what}; parameter norms: {}", self.stage_norms()))
    }

    /// Loss terms and gradients without touching the parameters.
    pub fn loss_and_grads(&self, scene: &ScenePair) -> Result<(LossTerms, crate::numeric::Gradients<T>)> {
        let mut g = Graph::new(&self.store);
        let out = self.network.forward(&mut g, &scene.correspondences)?;
        let terms = hybrid_loss(&mut g, &out, &scene.correspondences, &scene.labels, self.config())?;
        let grads = g.backward(terms.total)?;
        Ok((terms, grads))
    }

    /// Forward, loss, backward and one Adam update.
    pub fn train_step(&mut self, scene: &ScenePair, scene_id: u64) -> Result<TrainRecord> {
        let start = Instant::now();
        let (terms, grads) = match self.loss_and_grads(scene) {
            Ok(x) => x,
            Err(Error::NonFinite(op)) => return Err(self.diverged(format!("non-finite value in {op}"))),
            Err(e) => return Err(e),
        };
        if !terms.total_value.is_finite() {
            return Err(self.diverged("non-finite loss"));
        }
        self.store.zero_grad();
        self.store.accumulate(&grads)?;
        let grad_norm = self.store.grad_norm();
        if !grad_norm.is_finite() {
            return Err(self.diverged("non-finite gradient"));
        }
        if let Some(clip) = self.grad_clip
            && grad_norm > clip
        {
            self.store.scale_grads(T::of(clip / grad_norm));
        }
        self.store.adam_step(&self.adam);
        Ok(TrainRecord {
            scene_id,
            stages: terms.stages,
            l_c: terms.l_c,
            l_e: terms.l_e,
            total: terms.total_value,
            grad_norm,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    pub fn predict(&self, set: &CorrespondenceSet) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let out = self.network.forward(&mut g, set)?;
        let threshold = self.config().logit_threshold;
        Ok(Prediction {
            inliers: out.logits.iter().map(|&l| l > threshold).collect(),
            logits: out.logits,
            weights: out.weights,
            e_hat: out.e_hat,
            fallback: out.fallback,
        })
    }
}
