//! Finite-difference suite over every differentiable block, in f64.

use std::io::Write;

use corrlab_core::blocks::{OrderAware, ParamBuilder, PointCn, SeFuse};
use corrlab_core::cga::{Cpa, CpaConfig, MbFfn};
use corrlab_core::csmgc::{Csmgc, CsmgcShape, StageFeatureBundle};
use corrlab_core::network::{hybrid_loss, Inputs, Network, NetworkConfig, NetworkOutput, StageOutput};
use corrlab_core::numeric::{finite_diff_check, param_diff_check, GradCheck, Graph, Matrix, ParameterStore, Var};
use corrlab_core::synthgen::{generate_scene, SceneConfig, ScenePair};
use corrlab_core::Result;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CliError;

/// Seeds per block.
pub const SEEDS: usize = 20;
/// Tolerance for single blocks.
pub const BLOCK_TOL: f64 = 1e-4;
/// Tolerance for the whole network through the eight-point solve.
pub const END_TO_END_TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Probe points tried per seed before giving up on finding a smooth one.
const MAX_TRIES: usize = 100;
const D: usize = 4;
const ROWS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    pub name: &'static str,
    /// Seeds that produced a usable probe point.
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.seeds == SEEDS && self.max_rel_error < self.tol
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub blocks: Vec<BlockResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(BlockResult::passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.blocks.iter().filter(|b| !b.passed()).map(|b| b.name.to_string()).collect()
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

/// Builds a block, then replaces every parameter with uniform noise so no
/// layer sits at its special initialization.
fn randomized<B>(seed: u64, build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<B>) -> Result<(B, ParameterStore<f64>)> {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = build(&mut ParamBuilder::new(&mut store, &mut rng))?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (r, c) = store.value(id).shape();
        store.set_value(id, random(r, c, &mut rng).map(|v| v / 2.0))?;
    }
    Ok((block, store))
}

/// `sum(y ⊙ W)` for a fixed random `W`.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (r, c) = g.value(y).shape();
    let w = g.input(random(r, c, &mut rng))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Input-gradient check at the first probe point clear of every kink and
/// branch switch.
fn smooth_check(
    store: &ParameterStore<f64>,
    shape: (usize, usize),
    seed: u64,
    f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
) -> Result<Option<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_TRIES {
        let c = finite_diff_check(store, &f, &random(shape.0, shape.1, &mut rng), STEP)?;
        if !c.nonsmooth && !c.branch_changed {
            return Ok(Some(c));
        }
    }
    Ok(None)
}

fn block(
    name: &'static str,
    mut one: impl FnMut(u64) -> Result<Option<GradCheck>>,
    base: u64,
    out: &mut dyn Write,
) -> Result<BlockResult, CliError> {
    let mut r = BlockResult {
        name,
        seeds: 0,
        max_rel_error: 0.0,
        tol: BLOCK_TOL,
    };
    for s in 0..SEEDS as u64 {
        if let Some(c) = one(base.wrapping_add(s))? {
            r.seeds += 1;
            r.max_rel_error = r.max_rel_error.max(c.max_rel_error);
        }
    }
    report_line(&r, out)?;
    Ok(r)
}

fn report_line(r: &BlockResult, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(
        out,
        "block={} seeds={} max_rel_error={:.3e} tol={:.0e} status={}",
        r.name,
        r.seeds,
        r.max_rel_error,
        r.tol,
        if r.passed() { "pass" } else { "fail" }
    )
}

fn split(g: &mut Graph<'_, f64>, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let v = g.slice_cols(x, start, start + w);
            start += w;
            v
        })
        .collect()
}

fn scene(n: usize, outlier_ratio: f64, seed: u64) -> Result<ScenePair> {
    generate_scene(&SceneConfig {
        n_correspondences: n,
        outlier_ratio,
        seed,
        ..SceneConfig::default()
    })
}

/// The loss on a single stage whose logits are the probed input.
fn loss_on_logits(g: &mut Graph<'_, f64>, x: Var, sc: &ScenePair, cfg: &NetworkConfig) -> Result<Var> {
    let r = g.relu(x)?;
    let w = g.tanh(r)?;
    let col = |m: &Matrix<f64>| m.data().to_vec();
    let out = NetworkOutput {
        stages: vec![StageOutput {
            features: x,
            logits: x,
            weights: w,
            bundle: StageFeatureBundle { z1: x, z2: x, z3: x },
        }],
        inputs: Inputs::new(g, &sc.correspondences)?,
        logits: col(g.value(x)),
        weights: col(g.value(w)),
        e_hat: None,
        fallback: false,
    };
    Ok(hybrid_loss(g, &out, &sc.correspondences, &sc.labels, cfg)?.total)
}

const END_TO_END_PARAMS: [&str; 6] = [
    "stage0.embed.w",
    "stage1.cpa2.q.linear.w",
    "stage1.oa.down.w",
    "stage2.csmgc.align.w",
    "stage2.csmgc.fuse.excite1.w",
    "stage2.head.w",
];

/// Full loss against selected parameters of every stage, on configurations
/// where each stage solves through its own weights. A probe that flips a
/// discrete branch disqualifies the configuration.
fn end_to_end(base: u64, out: &mut dyn Write) -> Result<BlockResult, CliError> {
    let cfg = NetworkConfig {
        d: D,
        oa_clusters: 2,
        ..NetworkConfig::default()
    };
    let mut r = BlockResult {
        name: "end_to_end",
        seeds: 0,
        max_rel_error: 0.0,
        tol: END_TO_END_TOL,
    };
    for i in 0..20 * SEEDS as u64 {
        if r.seeds == SEEDS {
            break;
        }
        let seed = base.wrapping_add(i);
        let sc = scene(24, 0.4, seed.wrapping_add(1000))?;
        let (net, store) = Network::init::<f64>(&cfg, seed)?;
        let f = |g: &mut Graph<'_, f64>| {
            let o = net.forward(g, &sc.correspondences)?;
            Ok(hybrid_loss(g, &o, &sc.correspondences, &sc.labels, &cfg)?.total)
        };
        let solved = {
            let mut g = Graph::new(&store);
            let o = net.forward(&mut g, &sc.correspondences)?;
            let t = hybrid_loss(&mut g, &o, &sc.correspondences, &sc.labels, &cfg)?;
            t.stages.iter().all(|s| !s.fallback && !s.solve_failed)
        };
        if !solved {
            continue;
        }
        let mut worst = 0.0f64;
        let mut clean = true;
        for name in END_TO_END_PARAMS {
            let id = store.id(name)?;
            let c = param_diff_check(&store, id, f, STEP)?;
            if c.branch_changed {
                clean = false;
                break;
            }
            worst = worst.max(c.max_rel_error);
        }
        if clean {
            r.seeds += 1;
            r.max_rel_error = r.max_rel_error.max(worst);
        }
    }
    report_line(&r, out)?;
    Ok(r)
}

/// Runs every block check; `seed` offsets all random draws.
pub fn run_suite(seed: u64, out: &mut dyn Write) -> Result<GradReport, CliError> {
    let mut blocks = Vec::new();
    let base = seed.wrapping_mul(1 << 20);
    let empty = ParameterStore::<f64>::new();

    blocks.push(block("context_norm", |s| smooth_check(&empty, (ROWS, D), s, |g, x| {
        let y = g.context_norm(x)?;
        project(g, y, s)
    }), base, out)?);

    blocks.push(block("pointcn", |s| {
        let (m, st) = randomized(s + 100, |b| PointCn::new(b, D))?;
        smooth_check(&st, (ROWS, D), s, |g, x| {
            let y = m.forward(g, x)?;
            project(g, y, s)
        })
    }, base, out)?);

    blocks.push(block("order_aware", |s| {
        let (m, st) = randomized(s + 200, |b| OrderAware::new(b, D, 3))?;
        smooth_check(&st, (ROWS, D), s, |g, x| {
            let y = m.forward(g, x)?;
            project(g, y, s)
        })
    }, base, out)?);

    blocks.push(block("se_fuse", |s| {
        let (m, st) = randomized(s + 300, |b| SeFuse::new(b, D, 2))?;
        smooth_check(&st, (ROWS, 2 * D), s, |g, x| {
            let zs = split(g, x, &[D, D])?;
            let y = m.forward(g, &zs)?;
            project(g, y, s)
        })
    }, base, out)?);

    blocks.push(block("cpa_forward", |s| {
        let cfg = CpaConfig {
            scale_geometric: s % 2 == 0,
            share_encoders: s % 3 == 0,
        };
        let (m, st) = randomized(s + 400, |b| Cpa::new(b, D, cfg))?;
        smooth_check(&st, (ROWS, D + 4), s, |g, x| {
            let p = split(g, x, &[D, 2, 2])?;
            let y = m.forward(g, p[0], p[1], p[2])?;
            project(g, y, s)
        })
    }, base, out)?);

    blocks.push(block("mbffn_forward", |s| {
        let (m, st) = randomized(s + 500, |b| MbFfn::new(b, D))?;
        smooth_check(&st, (ROWS, D), s, |g, x| {
            let y = m.forward(g, x)?;
            project(g, y, s)
        })
    }, base, out)?);

    let shape = CsmgcShape { d: D, k: 6, ring: 3, history: 2 };
    blocks.push(block("align_features", |s| {
        let (m, st) = randomized(s + 600, |b| Csmgc::new(b, shape))?;
        smooth_check(&st, (ROWS * shape.k, 8 * D), s, |g, x| {
            let y = m.align_features(g, x)?;
            project(g, y, s)
        })
    }, base, out)?);

    blocks.push(block("annular_conv", |s| {
        let (m, st) = randomized(s + 700, |b| Csmgc::new(b, shape))?;
        smooth_check(&st, (ROWS * shape.k, D), s, |g, x| {
            let y = m.annular_conv(g, x)?;
            project(g, y, s)
        })
    }, base, out)?);

    let loss_cfg = NetworkConfig {
        deep_supervision: false,
        ..NetworkConfig::default()
    };
    blocks.push(block("hybrid_loss", |s| {
        let sc = scene(24, 0.4, s.wrapping_add(2000))?;
        smooth_check(&empty, (sc.labels.len(), 1), s, |g, x| loss_on_logits(g, x, &sc, &loss_cfg))
    }, base, out)?);

    blocks.push(end_to_end(base, out)?);
    Ok(GradReport { blocks })
}
