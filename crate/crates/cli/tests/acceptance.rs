//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 5 and 6 train the desk-scale network several times and
//! take tens of CPU minutes.

use std::path::Path;
use std::process::ExitCode;

use corrlab::commands::{self, Data};
use corrlab::{gradcheck, Logger, RunConfig, Split};
use corrlab_core::eval::{pose_auc, pose_map, prf, PoseError};
use corrlab_core::geometry::{compose_essential, epipolar_loss, epipolar_residual, pose_error, weighted_eight_point};
use corrlab_core::network::{Ablation, Network, NetworkConfig};
use corrlab_core::numeric::{Graph, Matrix, ParameterStore};
use corrlab_core::synthgen::{generate_scene, SceneConfig, ScenePair};
use cpu_time::ProcessTime;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_CPU_LIMIT_S: f64 = 300.0;
const LEARNING_CPU_LIMIT_S: f64 = 1800.0;
const MIN_F: f64 = 0.85;
const GAMMA: f64 = 0.5;
/// One point of F-score.
const INVERSION_SLACK: f64 = 0.01;
const SEED: u64 = 0;

struct Verdict {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Verdict {
    fn print(&self) {
        println!(
            "criterion={} name={} status={} {}",
            self.id,
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.detail
        );
    }
}

fn clean_scene(seed: u64, n: usize, outlier_ratio: f64) -> ScenePair {
    generate_scene(&SceneConfig {
        n_correspondences: n,
        outlier_ratio,
        pixel_noise_std: 0.0,
        seed,
        ..SceneConfig::default()
    })
    .expect("scene")
}

fn gradient_suite() -> Verdict {
    let start = ProcessTime::now();
    let mut lines = Vec::new();
    let report = gradcheck::run_suite(SEED, &mut lines).expect("gradient suite runs");
    let cpu = start.elapsed().as_secs_f64();
    let worst = |pick: fn(&str) -> bool| {
        report
            .blocks
            .iter()
            .filter(|b| pick(b.name))
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    };
    Verdict {
        id: 1,
        name: "gradient_suite",
        pass: report.passed() && cpu < GRAD_CPU_LIMIT_S,
        detail: format!(
            "blocks={} failed=[{}] worst_block={:.3e} end_to_end={:.3e} cpu_s={cpu:.1}",
            report.blocks.len(),
            report.failures().join(","),
            worst(|n| n != "end_to_end"),
            worst(|n| n == "end_to_end"),
        ),
    }
}

fn equivariance() -> Verdict {
    let (net, store) = Network::init::<f64>(&NetworkConfig::default(), SEED).expect("init");
    let run = |set: &corrlab_core::geometry::CorrespondenceSet| {
        let mut g = Graph::new(&store);
        net.forward(&mut g, set).expect("forward")
    };
    // A scene whose estimate exists, so the Ê comparison is not vacuous.
    let (scene, base) = (0..)
        .map(|s| {
            let sc = generate_scene(&SceneConfig { n_correspondences: 64, seed: 100 + s, ..SceneConfig::default() }).expect("scene");
            let out = run(&sc.correspondences);
            (sc, out)
        })
        .find(|(_, o)| o.e_hat.is_some())
        .expect("some scene solves");
    let base_e = base.e_hat.expect("estimate");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut logit_dev, mut e_dev) = (0.0f64, 0.0f64);
    let mut missing = 0;
    for _ in 0..50 {
        let mut p: Vec<usize> = (0..64).collect();
        p.shuffle(&mut rng);
        let out = run(&scene.correspondences.select(&p));
        for (i, &j) in p.iter().enumerate() {
            logit_dev = logit_dev.max((out.logits[i] - base.logits[j]).abs());
        }
        match &out.e_hat {
            Some(e) => e_dev = e_dev.max(e.distance_up_to_sign(&base_e)),
            None => missing += 1,
        }
    }
    Verdict {
        id: 2,
        name: "equivariance",
        pass: logit_dev < 1e-8 && e_dev < 1e-8 && missing == 0,
        detail: format!("n=64 permutations=50 max_logit_dev={logit_dev:.3e} max_e_dev={e_dev:.3e} missing_e={missing}"),
    }
}

fn geometric_oracles() -> Verdict {
    let (mut solve, mut residual, mut pose) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let sc = clean_scene(seed, 512, 0.7);
        let w: Vec<f64> = sc.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let e = weighted_eight_point(&sc.correspondences, &w).expect("solve");
        solve = solve.max(e.distance_up_to_sign(&sc.essential_gt));
        for i in sc.inlier_indices() {
            let r = epipolar_residual(&sc.essential_gt, sc.correspondences.first(i), sc.correspondences.second(i));
            residual = residual.max(r);
        }
        let composed = compose_essential(&sc.pose_gt);
        let (r, t) = pose_error(&composed, &sc.pose_gt, &sc.correspondences, &w).expect("pose");
        pose = pose.max(r.abs()).max(t.abs());
    }
    Verdict {
        id: 3,
        name: "geometric_oracles",
        pass: solve < 1e-8 && residual < 1e-12 && pose < 1e-6,
        detail: format!("scenes=100 eight_point_err={solve:.3e} max_residual={residual:.3e} max_pose_err_deg={pose:.3e}"),
    }
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut prf_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let p: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let count = |a: bool, b: bool| p.iter().zip(&l).filter(|&(&x, &y)| x == a && y == b).count();
        let (tp, fp, fn_, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        let (pr, re) = (ratio(tp, fp), ratio(tp, fn_));
        let f = if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) };
        let r = prf(&p, &l).expect("prf");
        if (r.tp, r.fp, r.fn_, r.tn) != (tp, fp, fn_, tn) || r.precision != pr || r.recall != re || r.f_score != f {
            prf_mismatch += 1;
        }
    }
    let errs = |v: &[f64]| v.iter().map(|&e| PoseError { rot_deg: e, trans_deg: e }).collect::<Vec<_>>();
    let e5 = errs(&[1.0, 4.0, 7.0, 12.0, 30.0]);
    let hand = [
        pose_map(&errs(&[3.0, 7.0, 12.0]), 20).unwrap() == 0.75,
        pose_map(&e5, 5).unwrap() == 0.4,
        (pose_map(&e5, 20).unwrap() - (0.4 + 0.6 + 0.8 + 0.8) / 4.0).abs() < 1e-15,
        pose_map(&errs(&[5.0]), 5).unwrap() == 1.0,
        pose_map(&[PoseError::FAILED], 20).unwrap() == 0.0,
        pose_auc(&errs(&[0.0]), 5).unwrap() == 1.0,
        pose_auc(&errs(&[100.0]), 20).unwrap() == 0.0,
        (pose_auc(&errs(&[2.0]), 5).unwrap() - 3.5 / 5.0).abs() < 1e-15,
    ];
    let hand_fail = hand.iter().filter(|&&ok| !ok).count();
    Verdict {
        id: 4,
        name: "metric_oracles",
        pass: prf_mismatch == 0 && hand_fail == 0,
        detail: format!("prf_vectors=1000 prf_mismatches={prf_mismatch} hand_cases={} hand_failures={hand_fail}", hand.len()),
    }
}

fn desk_config(seed: u64, root: &Path) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.paths.data_dir = root.join("data");
    cfg.paths.checkpoint = root.join("model.json");
    cfg.paths.train_log = root.join("train.log");
    cfg.paths.report = root.join("report.csv");
    cfg.paths.ablation = root.join("ablation.csv");
    cfg
}

struct Learning {
    verdict: Verdict,
    full_f: f64,
    log: String,
}

fn learning(cfg: &RunConfig) -> Learning {
    let start = ProcessTime::now();
    let mut sink = std::io::sink();
    commands::generate(cfg, &mut sink).expect("generate");
    commands::train(cfg, &mut sink).expect("train");
    let s = commands::eval(cfg, &mut sink).expect("eval");
    let cpu = start.elapsed().as_secs_f64();
    let (n, r) = (&s.network_agg, &s.ransac_agg);
    Learning {
        verdict: Verdict {
            id: 5,
            name: "learning",
            pass: n.f_score >= MIN_F && n.f_score > r.f_score && n.map5 >= r.map5 && cpu < LEARNING_CPU_LIMIT_S,
            detail: format!(
                "net_f={:.4} ransac_f={:.4} net_map5={:.4} ransac_map5={:.4} net_precision={:.4} net_recall={:.4} cpu_s={cpu:.0}",
                n.f_score, r.f_score, n.map5, r.map5, n.precision, n.recall
            ),
        },
        full_f: n.f_score,
        log: std::fs::read_to_string(&cfg.paths.train_log).expect("train log"),
    }
}

/// Test F-scores of (full, iter+cga, iter+csmgc, baseline).
type Scores = [f64; 4];

fn ablation_scores(cfg: &RunConfig, full: Option<f64>) -> Scores {
    let data = Data::load(cfg).expect("data");
    let mut sink = std::io::sink();
    let path = cfg.paths.train_log.with_file_name("ablation.log");
    let mut log = Logger::to_file(&path, &mut sink).expect("log");
    let mut f = |a| commands::run_ablation(cfg, a, &data, &mut log).expect("ablation").test.f_score;
    let full = full.unwrap_or_else(|| f(Ablation::Full));
    [full, f(Ablation::IterCga), f(Ablation::IterCsmgc), f(Ablation::Baseline)]
}

/// Signed margins of Full ≥ Iter+CGA, Full ≥ Iter+CSMGC, Iter+CSMGC ≥ Baseline.
fn margins(s: &Scores) -> [f64; 3] {
    [s[0] - s[1], s[0] - s[2], s[2] - s[3]]
}

fn fmt_scores(s: &Scores) -> String {
    format!("full={:.4} iter+cga={:.4} iter+csmgc={:.4} baseline={:.4}", s[0], s[1], s[2], s[3])
}

fn ablation(cfg: &RunConfig, full_f: f64, root: &Path) -> Verdict {
    let first = ablation_scores(cfg, Some(full_f));
    let m = margins(&first);
    let inversions: Vec<f64> = m.iter().copied().filter(|&d| d < 0.0).collect();
    let mut detail = format!("seed={} {}", cfg.seed, fmt_scores(&first));
    let pass = match inversions.as_slice() {
        [] => true,
        [d] if -d <= INVERSION_SLACK => {
            let mut votes = m.map(|d| usize::from(d >= 0.0));
            for extra in 1..=2 {
                let dir = root.join(format!("rerun{extra}"));
                let c = desk_config(cfg.seed + extra, &dir);
                commands::generate(&c, &mut std::io::sink()).expect("generate");
                let s = ablation_scores(&c, None);
                for (v, d) in votes.iter_mut().zip(margins(&s)) {
                    *v += usize::from(d >= 0.0);
                }
                detail.push_str(&format!(" | seed={} {}", c.seed, fmt_scores(&s)));
            }
            detail.push_str(&format!(" majority_votes={votes:?}"));
            votes.iter().all(|&v| v >= 2)
        }
        _ => false,
    };
    Verdict {
        id: 6,
        name: "ablation_order",
        pass,
        detail,
    }
}

fn field(line: &str, key: &str) -> Option<f64> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
        .and_then(|v| v.parse().ok())
}

fn loss_identity(log: &str) -> Verdict {
    let header_gamma = log.lines().next().and_then(|l| field(l, "gamma"));
    let mut worst = 0.0f64;
    let mut steps = 0;
    for l in log.lines().filter(|l| l.starts_with("iter=")) {
        let (Some(t), Some(c), Some(e)) = (field(l, "total"), field(l, "l_c"), field(l, "l_e")) else {
            worst = f64::INFINITY;
            continue;
        };
        worst = worst.max((t - (c + GAMMA * e)).abs());
        steps += 1;
    }
    let mut gt = 0.0f64;
    let store = ParameterStore::<f64>::new();
    for seed in 0..20 {
        let sc = clean_scene(seed, 512, 0.7);
        let mut g = Graph::new(&store);
        let e = g
            .input(Matrix::new(3, 3, sc.essential_gt.row_major().to_vec()).expect("3x3"))
            .expect("input");
        let l = epipolar_loss(&mut g, e, &sc.correspondences, &sc.inlier_indices()).expect("loss");
        gt = gt.max(g.value(l).item().expect("scalar"));
    }
    Verdict {
        id: 7,
        name: "loss_identity",
        pass: header_gamma == Some(GAMMA) && steps > 0 && worst < 1e-10 && gt < 1e-12,
        detail: format!("gamma={header_gamma:?} logged_steps={steps} max_identity_err={worst:.3e} l_e_at_gt={gt:.3e}"),
    }
}

fn strip_wall_time(log: &str) -> String {
    log.lines()
        .map(|l| l.split_whitespace().filter(|kv| !kv.starts_with("wall_time_s=")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs generate, train and eval twice with the same configuration and
/// paths, comparing every artifact and console line.
fn determinism(root: &Path) -> Verdict {
    let dir = root.join("determinism");
    let run = || {
        let _ = std::fs::remove_dir_all(&dir);
        let mut cfg = desk_config(7, &dir);
        cfg.scene.n_correspondences = 96;
        cfg.network.d = 8;
        cfg.network.oa_clusters = 4;
        cfg.train.iterations = 30;
        cfg.train.eval_interval = 10;
        cfg.splits.train = 8;
        cfg.splits.val = 3;
        cfg.splits.test = 3;
        let mut console = Vec::new();
        commands::generate(&cfg, &mut console).expect("generate");
        commands::train(&cfg, &mut console).expect("train");
        commands::eval(&cfg, &mut console).expect("eval");
        let read = |p: &Path| std::fs::read(p).expect("artifact");
        let mut files: Vec<Vec<u8>> = Split::ALL.iter().map(|&s| read(&cfg.paths.split(s))).collect();
        files.push(read(&cfg.paths.checkpoint));
        files.push(read(&cfg.paths.report));
        let log = strip_wall_time(&String::from_utf8(read(&cfg.paths.train_log)).expect("utf8"));
        (files, log, console)
    };
    let a = run();
    let b = run();
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2];
    Verdict {
        id: 8,
        name: "determinism",
        pass: same.iter().all(|&s| s),
        detail: format!("artifacts_identical={} train_log_identical={} console_identical={}", same[0], same[1], same[2]),
    }
}

/// Criteria named on the command line (all when none are); 6 and 7 reuse
/// the training run of 5.
fn selected() -> Vec<u8> {
    let ids: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if ids.is_empty() { (1..=8).collect() } else { ids }
}

fn main() -> ExitCode {
    let ids = selected();
    let want = |id: u8| ids.contains(&id);
    let root = tempfile::tempdir().expect("temp dir");
    let mut verdicts = Vec::new();
    let mut report = |v: Verdict| {
        v.print();
        verdicts.push(v.pass);
    };
    if want(1) {
        report(gradient_suite());
    }
    if want(2) {
        report(equivariance());
    }
    if want(3) {
        report(geometric_oracles());
    }
    if want(4) {
        report(metric_oracles());
    }
    if want(5) || want(6) || want(7) {
        let cfg = desk_config(SEED, &root.path().join("desk"));
        let learned = learning(&cfg);
        let (full_f, log) = (learned.full_f, learned.log.clone());
        if want(5) {
            report(learned.verdict);
        }
        if want(6) {
            report(ablation(&cfg, full_f, root.path()));
        }
        if want(7) {
            report(loss_identity(&log));
        }
    }
    if want(8) {
        report(determinism(root.path()));
    }
    let failed = verdicts.iter().filter(|&&p| !p).count();
    println!("acceptance criteria={} failed={failed}", verdicts.len());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
