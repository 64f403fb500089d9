//! The generate, train, eval and ablate commands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use corrlab_core::eval::{prf, ransac_scene, score_scene, Aggregate, SceneScore};
use corrlab_core::geometry::EssentialMatrix;
use corrlab_core::network::{Ablation, Checkpoint, NetworkConfig, TrainRecord, Trainer};
use corrlab_core::numeric::{AdamConfig, Scalar};
use corrlab_core::synthgen::{generate_split, read_dataset, write_dataset, ScenePair};

use crate::config::{Precision, RunConfig, Split};
use crate::{CliError, Logger};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub split: Split,
    pub scenes: usize,
    pub correspondences: usize,
    pub outlier_ratio: f64,
    pub path: PathBuf,
}

pub fn outlier_ratio(scenes: &[ScenePair]) -> f64 {
    let total: usize = scenes.iter().map(|s| s.labels.len()).sum();
    let inliers: usize = scenes.iter().map(|s| s.labels.iter().filter(|&&l| l).count()).sum();
    if total == 0 { 0.0 } else { 1.0 - inliers as f64 / total as f64 }
}

/// Writes the three splits and prints one summary line per split.
pub fn generate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<SplitSummary>, CliError> {
    std::fs::create_dir_all(&cfg.paths.data_dir).map_err(|e| io_err(&cfg.paths.data_dir, e))?;
    let mut summaries = Vec::new();
    for split in Split::ALL {
        let scenes = generate_split(&cfg.scene, cfg.split_seed(split), cfg.split_size(split))?;
        let path = cfg.paths.split(split);
        write_dataset(&scenes, &path).map_err(|e| io_err(&path, e))?;
        let s = SplitSummary {
            split,
            scenes: scenes.len(),
            correspondences: scenes.iter().map(|s| s.labels.len()).sum(),
            outlier_ratio: outlier_ratio(&scenes),
            path,
        };
        writeln!(
            out,
            "split={} scenes={} correspondences={} outlier_ratio={:.4} first_seed={} path={}",
            split.name(),
            s.scenes,
            s.correspondences,
            s.outlier_ratio,
            cfg.split_seed(split),
            s.path.display()
        )?;
        summaries.push(s);
    }
    Ok(summaries)
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<ScenePair>, CliError> {
    let path = cfg.paths.split(split);
    let scenes = read_dataset(&path).map_err(|e| io_err(&path, e))?;
    if scenes.is_empty() {
        return Err(io_err(&path, "dataset is empty"));
    }
    Ok(scenes)
}

/// The splits a training run reads.
pub struct Data {
    pub train: Vec<ScenePair>,
    pub val: Vec<ScenePair>,
    pub test: Vec<ScenePair>,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        Ok(Self {
            train: load_split(cfg, Split::Train)?,
            val: load_split(cfg, Split::Val)?,
            test: load_split(cfg, Split::Test)?,
        })
    }
}

pub struct TrainOutcome<T: Scalar> {
    /// Parameters at the best validation F-score.
    pub best: Trainer<T>,
    pub best_val_f: f64,
    /// Iterations completed when the best model was taken.
    pub best_iteration: usize,
    pub records: Vec<TrainRecord>,
}

/// Mean per-scene F-score of the network's inlier predictions.
pub fn validation_f<T: Scalar>(trainer: &Trainer<T>, scenes: &[ScenePair]) -> Result<f64, CliError> {
    let mut total = 0.0;
    for s in scenes {
        let p = trainer.predict(&s.correspondences)?;
        total += prf(&p.inliers, &s.labels)?.f_score;
    }
    Ok(total / scenes.len() as f64)
}

fn header(cfg: &RunConfig, network: &NetworkConfig, train: usize, val: usize) -> String {
    format!(
        "run=train precision={} seed={} iterations={} gamma={} learning_rate={} d={} stages={} k={} oa_clusters={} use_iter={} use_cga={} use_csmgc={} train_scenes={train} val_scenes={val}",
        cfg.train.precision.name(),
        cfg.seed,
        cfg.train.iterations,
        network.gamma,
        cfg.train.learning_rate,
        network.d,
        network.stages(),
        network.k,
        network.oa_clusters,
        network.use_iter,
        network.use_cga,
        network.use_csmgc,
    )
}

/// Trains for `cfg.train.iterations` steps, cycling through `train`, and
/// keeps the parameters with the best validation F-score.
pub fn fit<T: Scalar>(
    cfg: &RunConfig,
    network: &NetworkConfig,
    train: &[ScenePair],
    val: &[ScenePair],
    log: &mut Logger<'_>,
) -> Result<TrainOutcome<T>, CliError> {
    let adam = AdamConfig {
        learning_rate: cfg.train.learning_rate,
        ..AdamConfig::default()
    };
    let mut trainer = Trainer::<T>::new(network, cfg.seed, adam)?;
    trainer.grad_clip = cfg.train.grad_clip;
    log.note(&header(cfg, network, train.len(), val.len()))?;
    let first_seed = cfg.split_seed(Split::Train);
    let mut best: Option<(f64, usize, Trainer<T>)> = None;
    let mut records = Vec::with_capacity(cfg.train.iterations);
    for it in 0..cfg.train.iterations {
        let index = it % train.len();
        let scene_id = first_seed.wrapping_add(index as u64);
        let r = match trainer.train_step(&train[index], scene_id) {
            Ok(r) => r,
            Err(e) => {
                log.note(&format!("diverged iter={it} scene={scene_id} error={e}"))?;
                log.flush()?;
                return Err(e.into());
            }
        };
        log.record(&format!(
            "iter={it} scene={scene_id} total={} l_c={} l_e={} grad_norm={} fallback_stages={} solve_failed_stages={} wall_time_s={:.6}",
            r.total,
            r.l_c,
            r.l_e,
            r.grad_norm,
            r.stages.iter().filter(|s| s.fallback).count(),
            r.stages.iter().filter(|s| s.solve_failed).count(),
            r.wall_time_s,
        ))?;
        records.push(r);
        let done = it + 1;
        if done % cfg.train.eval_interval == 0 || done == cfg.train.iterations {
            let f = validation_f(&trainer, val)?;
            let improved = best.as_ref().is_none_or(|(b, _, _)| f > *b);
            log.note(&format!("eval iter={done} val_f={f} best={improved}"))?;
            if improved {
                best = Some((f, done, trainer.clone()));
            }
        }
    }
    let (best_val_f, best_iteration, best) = best.expect("at least one validation pass");
    log.note(&format!("done best_iter={best_iteration} best_val_f={best_val_f}"))?;
    log.flush()?;
    Ok(TrainOutcome {
        best,
        best_val_f,
        best_iteration,
        records,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub precision: Precision,
    pub best_val_f: f64,
    pub best_iteration: usize,
    pub iterations: usize,
}

fn train_with<T: Scalar>(cfg: &RunConfig, data: &Data, log: &mut Logger<'_>) -> Result<TrainSummary, CliError> {
    let o = fit::<T>(cfg, &cfg.network, &data.train, &data.val, log)?;
    let path = &cfg.paths.checkpoint;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Checkpoint::capture(&cfg.network, &o.best.store)
        .save(path)
        .map_err(|e| io_err(path, e))?;
    log.note(&format!("checkpoint path={} iter={}", path.display(), o.best_iteration))?;
    log.flush()?;
    Ok(TrainSummary {
        precision: cfg.train.precision,
        best_val_f: o.best_val_f,
        best_iteration: o.best_iteration,
        iterations: o.records.len(),
    })
}

/// Trains on the train split, validates on the val split, writes the
/// best-validation checkpoint and the training log.
pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainSummary, CliError> {
    let data = Data {
        train: load_split(cfg, Split::Train)?,
        val: load_split(cfg, Split::Val)?,
        test: Vec::new(),
    };
    let log_path = &cfg.paths.train_log;
    let mut log = Logger::to_file(log_path, out).map_err(|e| io_err(log_path, e))?;
    match cfg.train.precision {
        Precision::F64 => train_with::<f64>(cfg, &data, &mut log),
        Precision::F32 => train_with::<f32>(cfg, &data, &mut log),
    }
}

/// What a classifier reports for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Predicted {
    pub inliers: Vec<bool>,
    pub e_hat: Option<EssentialMatrix>,
    /// Weights for the cheirality vote of pose recovery.
    pub weights: Vec<f64>,
}

impl Predicted {
    pub fn from_network<T: Scalar>(trainer: &Trainer<T>, scene: &ScenePair) -> Result<Self, CliError> {
        let p = trainer.predict(&scene.correspondences)?;
        Ok(Self {
            inliers: p.inliers,
            e_hat: p.e_hat,
            weights: p.weights,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub network: Vec<SceneScore>,
    pub ransac: Vec<SceneScore>,
    pub network_agg: Aggregate,
    pub ransac_agg: Aggregate,
}

pub fn score_ransac(cfg: &RunConfig, scenes: &[ScenePair]) -> Result<Vec<SceneScore>, CliError> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(ransac_scene(s, &cfg.ransac_for(i))?))
        .collect()
}

/// Scores `predict` and the RANSAC baseline on the same scenes.
pub fn evaluate_with(
    cfg: &RunConfig,
    scenes: &[ScenePair],
    mut predict: impl FnMut(&ScenePair) -> Result<Predicted, CliError>,
) -> Result<EvalSummary, CliError> {
    let network = scenes
        .iter()
        .map(|s| {
            let p = predict(s)?;
            Ok(score_scene(s, &p.inliers, p.e_hat.as_ref(), &p.weights)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let ransac = score_ransac(cfg, scenes)?;
    Ok(EvalSummary {
        network_agg: Aggregate::of(&network)?,
        ransac_agg: Aggregate::of(&ransac)?,
        network,
        ransac,
    })
}

pub const REPORT_HEADER: &str = "method,scene,precision,recall,f_score,rot_err_deg,trans_err_deg,map5,map20,auc5,auc20";

fn aggregate_row(method: &str, a: &Aggregate) -> String {
    format!(
        "{method},mean,{},{},{},,,{},{},{},{}",
        a.precision, a.recall, a.f_score, a.map5, a.map20, a.auc5, a.auc20
    )
}

/// Header, one row per scene and method, then one aggregate row per method.
pub fn write_report(path: &Path, summary: &EvalSummary) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for (method, scores) in [("network", &summary.network), ("ransac", &summary.ransac)] {
            for (i, s) in scores.iter().enumerate() {
                writeln!(
                    w,
                    "{method},{i},{},{},{},{},{},,,,",
                    s.report.precision, s.report.recall, s.report.f_score, s.pose.rot_deg, s.pose.trans_deg
                )?;
            }
        }
        writeln!(w, "{}", aggregate_row("network", &summary.network_agg))?;
        writeln!(w, "{}", aggregate_row("ransac", &summary.ransac_agg))?;
        w.flush()
    };
    body().map_err(|e| io_err(path, e))
}

fn summary_line(method: &str, a: &Aggregate) -> String {
    format!(
        "method={method} scenes={} precision={:.4} recall={:.4} f_score={:.4} map5={:.4} map20={:.4} auc5={:.4} auc20={:.4}",
        a.scenes, a.precision, a.recall, a.f_score, a.map5, a.map20, a.auc5, a.auc20
    )
}

fn eval_with<T: Scalar>(cfg: &RunConfig, ckpt: &Checkpoint, scenes: &[ScenePair]) -> Result<EvalSummary, CliError> {
    let trainer = ckpt.restore::<T>(Some(&cfg.network), AdamConfig::default())?;
    evaluate_with(cfg, scenes, |s| Predicted::from_network(&trainer, s))
}

/// Scores the checkpoint and RANSAC on the test split and writes the report.
pub fn eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<EvalSummary, CliError> {
    let path = &cfg.paths.checkpoint;
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        corrlab_core::Error::Config(m) => CliError::Usage(format!("{}: {m}", path.display())),
        e => io_err(path, e),
    })?;
    let scenes = load_split(cfg, Split::Test)?;
    let summary = match Precision::parse(&ckpt.precision)? {
        Precision::F64 => eval_with::<f64>(cfg, &ckpt, &scenes)?,
        Precision::F32 => eval_with::<f32>(cfg, &ckpt, &scenes)?,
    };
    write_report(&cfg.paths.report, &summary)?;
    writeln!(out, "{}", summary_line("network", &summary.network_agg))?;
    writeln!(out, "{}", summary_line("ransac", &summary.ransac_agg))?;
    writeln!(out, "report path={}", cfg.paths.report.display())?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub test: Aggregate,
    pub best_val_f: f64,
}

fn ablation_with<T: Scalar>(
    cfg: &RunConfig,
    network: &NetworkConfig,
    data: &Data,
    log: &mut Logger<'_>,
) -> Result<(Aggregate, f64), CliError> {
    let o = fit::<T>(cfg, network, &data.train, &data.val, log)?;
    let scores = data
        .test
        .iter()
        .map(|s| {
            let p = Predicted::from_network(&o.best, s)?;
            Ok(score_scene(s, &p.inliers, p.e_hat.as_ref(), &p.weights)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((Aggregate::of(&scores)?, o.best_val_f))
}

/// Trains and tests one module combination with the run's seed and data.
pub fn run_ablation(cfg: &RunConfig, ablation: Ablation, data: &Data, log: &mut Logger<'_>) -> Result<AblationRow, CliError> {
    let network = cfg.network.with_ablation(ablation);
    network.validate()?;
    log.set_prefix(format!("config={}", ablation.label()));
    let (test, best_val_f) = match cfg.train.precision {
        Precision::F64 => ablation_with::<f64>(cfg, &network, data, log)?,
        Precision::F32 => ablation_with::<f32>(cfg, &network, data, log)?,
    };
    log.set_prefix("");
    Ok(AblationRow {
        ablation,
        test,
        best_val_f,
    })
}

pub const ABLATION_HEADER: &str = "config,iter,cga,csmgc,precision,recall,f_score,map5,map20,auc5,auc20,best_val_f";

pub fn ablation_line(r: &AblationRow) -> String {
    let (iter, cga, csmgc) = r.ablation.flags();
    let t = &r.test;
    format!(
        "{},{iter},{cga},{csmgc},{},{},{},{},{},{},{},{}",
        r.ablation.label(),
        t.precision,
        t.recall,
        t.f_score,
        t.map5,
        t.map20,
        t.auc5,
        t.auc20,
        r.best_val_f
    )
}

/// The six module combinations under one seed, as a table.
pub fn ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<AblationRow>, CliError> {
    let data = Data::load(cfg)?;
    let log_path = &cfg.paths.train_log;
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    {
        let mut log = Logger::to_file(log_path, out).map_err(|e| io_err(log_path, e))?;
        for a in Ablation::ALL {
            rows.push(run_ablation(cfg, a, &data, &mut log)?);
        }
    }
    let path = &cfg.paths.ablation;
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        text.push_str(&ablation_line(r));
        text.push('\n');
    }
    std::fs::write(path, &text).map_err(|e| io_err(path, e))?;
    write!(out, "{text}")?;
    Ok(rows)
}
