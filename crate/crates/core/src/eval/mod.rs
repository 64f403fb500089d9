//! Classification and pose metrics, plus a RANSAC reference.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_error, residuals, weighted_eight_point, CorrespondenceSet, EssentialMatrix};
use crate::synthgen::ScenePair;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// The ground truth has no positives, so recall is reported as 0.
    pub no_positive_labels: bool,
}

impl ClassificationReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f_score,
            no_positive_labels: tp + fn_ == 0,
        }
    }

    /// Pools the confusion counts of several reports.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a Self>) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for r in reports {
            tp += r.tp;
            fp += r.fp;
            fn_ += r.fn_;
            tn += r.tn;
        }
        Self::from_counts(tp, fp, fn_, tn)
    }
}

pub fn prf(predictions: &[bool], labels: &[bool]) -> Result<ClassificationReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "prf",
            detail: format!("{} predictions, {} labels", predictions.len(), labels.len()),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(ClassificationReport::from_counts(tp, fp, fn_, tn))
}

/// Rotation and translation errors of one scene, in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rot_deg: f64,
    pub trans_deg: f64,
}

impl PoseError {
    /// Error assigned when no pose could be estimated.
    pub const FAILED: PoseError = PoseError {
        rot_deg: 180.0,
        trans_deg: 180.0,
    };

    pub fn combined(&self) -> f64 {
        self.rot_deg.max(self.trans_deg)
    }
}

/// Fraction of scenes whose combined error is at most `t_deg`.
pub fn pose_accuracy(errors: &[PoseError], t_deg: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::TooFewRows {
            op: "pose_accuracy",
            need: 1,
            got: 0,
        });
    }
    Ok(errors.iter().filter(|e| e.combined() <= t_deg).count() as f64 / errors.len() as f64)
}

fn check_threshold(t_deg: u32) -> Result<()> {
    if t_deg == 0 || !t_deg.is_multiple_of(5) {
        return Err(Error::Config(format!("pose threshold must be a positive multiple of 5, got {t_deg}")));
    }
    Ok(())
}

/// Mean of the accuracies at 5, 10, ..., `t_deg` degrees.
pub fn pose_map(errors: &[PoseError], t_deg: u32) -> Result<f64> {
    check_threshold(t_deg)?;
    let steps = t_deg / 5;
    let mut total = 0.0;
    for i in 1..=steps {
        total += pose_accuracy(errors, f64::from(5 * i))?;
    }
    Ok(total / f64::from(steps))
}

/// Area under the cumulative accuracy curve on `[0, t_deg]`, trapezoid rule
/// at 1° spacing, divided by `t_deg`.
pub fn pose_auc(errors: &[PoseError], t_deg: u32) -> Result<f64> {
    if t_deg == 0 {
        return Err(Error::Config("pose threshold must be positive".into()));
    }
    let acc = (0..=t_deg)
        .map(|t| pose_accuracy(errors, f64::from(t)))
        .collect::<Result<Vec<f64>>>()?;
    let area: f64 = acc.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok(area / f64::from(t_deg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Epipolar residual below which a correspondence supports a hypothesis.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_threshold: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub labels: Vec<bool>,
    pub essential: EssentialMatrix,
    /// Consensus size of the best hypothesis (before refitting).
    pub support: usize,
}

fn consensus(e: &EssentialMatrix, s: &CorrespondenceSet, threshold: f64) -> Vec<bool> {
    residuals(e, s).into_iter().map(|r| r < threshold).collect()
}

/// Hypothesize-and-verify with eight-point minimal samples; the winner is
/// refit on its consensus set and the labels recomputed.
pub fn ransac_baseline(s: &CorrespondenceSet, config: &RansacConfig) -> Result<RansacResult> {
    let n = s.len();
    if n < 8 {
        return Err(Error::TooFewCorrespondences(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, EssentialMatrix)> = None;
    for _ in 0..config.iterations {
        let mut w = vec![0.0; n];
        for i in sample(&mut rng, n, 8) {
            w[i] = 1.0;
        }
        let Ok(e) = weighted_eight_point(s, &w) else {
            continue;
        };
        let support = consensus(&e, s, config.inlier_threshold).iter().filter(|&&c| c).count();
        if best.as_ref().is_none_or(|(b, _)| support > *b) {
            best = Some((support, e));
        }
    }
    let (support, e) = match best {
        Some((support, e)) if support >= 8 => (support, e),
        other => {
            return Err(Error::Degenerate(format!(
                "no hypothesis reached 8 inliers (best {})",
                other.map_or(0, |b| b.0)
            )))
        }
    };
    let labels = consensus(&e, s, config.inlier_threshold);
    let w: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let (essential, labels) = match weighted_eight_point(s, &w) {
        Ok(refit) => {
            let refit_labels = consensus(&refit, s, config.inlier_threshold);
            let refit_support = refit_labels.iter().filter(|&&c| c).count();
            if refit_support >= support {
                (refit, refit_labels)
            } else {
                (e, labels)
            }
        }
        Err(_) => (e, labels),
    };
    Ok(RansacResult {
        labels,
        essential,
        support,
    })
}

/// Classification and pose outcome of one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub report: ClassificationReport,
    pub pose: PoseError,
}

/// Scores predicted labels and an estimated essential matrix against the
/// scene's ground truth. A missing estimate or a failed pose recovery counts
/// as [`PoseError::FAILED`]; `weights` select the correspondences used for
/// the cheirality vote.
pub fn score_scene(
    scene: &ScenePair,
    inliers: &[bool],
    e_hat: Option<&EssentialMatrix>,
    weights: &[f64],
) -> Result<SceneScore> {
    let report = prf(inliers, &scene.labels)?;
    let pose = match e_hat.map(|e| pose_error(e, &scene.pose_gt, &scene.correspondences, weights)) {
        Some(Ok((rot_deg, trans_deg))) => PoseError { rot_deg, trans_deg },
        Some(Err(e)) if e.is_numeric() => PoseError::FAILED,
        Some(Err(e)) => return Err(e),
        None => PoseError::FAILED,
    };
    Ok(SceneScore { report, pose })
}

/// RANSAC on one scene, scored like a learned prediction. When no hypothesis
/// reaches eight inliers every correspondence is rejected.
pub fn ransac_scene(scene: &ScenePair, config: &RansacConfig) -> Result<SceneScore> {
    match ransac_baseline(&scene.correspondences, config) {
        Ok(r) => {
            let w: Vec<f64> = r.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
            score_scene(scene, &r.labels, Some(&r.essential), &w)
        }
        Err(Error::Degenerate(_)) => score_scene(scene, &vec![false; scene.labels.len()], None, &[]),
        Err(e) => Err(e),
    }
}

/// Mean per-scene precision, recall and F-score plus pose summaries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scenes: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub map5: f64,
    pub map20: f64,
    pub auc5: f64,
    pub auc20: f64,
}

impl Aggregate {
    pub fn of(scores: &[SceneScore]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::TooFewRows {
                op: "aggregate",
                need: 1,
                got: 0,
            });
        }
        let n = scores.len() as f64;
        let mean = |f: fn(&SceneScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let poses: Vec<PoseError> = scores.iter().map(|s| s.pose).collect();
        Ok(Self {
            scenes: scores.len(),
            precision: mean(|s| s.report.precision),
            recall: mean(|s| s.report.recall),
            f_score: mean(|s| s.report.f_score),
            map5: pose_map(&poses, 5)?,
            map20: pose_map(&poses, 20)?,
            auc5: pose_auc(&poses, 5)?,
            auc20: pose_auc(&poses, 20)?,
        })
    }
}
