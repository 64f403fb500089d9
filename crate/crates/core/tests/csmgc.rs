mod common;

use common::*;
use corrlab_core::csmgc::{build_knn_graph, concat_graphs, edge_features, graph_edges, Csmgc, CsmgcShape, StageFeatureBundle};
use corrlab_core::numeric::{Graph, Matrix, ParameterStore, Var};
use corrlab_core::Result;
use proptest::prelude::*;

const D: usize = 4;

fn shape(k: usize, ring: usize, history: usize) -> CsmgcShape {
    CsmgcShape { d: D, k, ring, history }
}

fn brute_knn(z: &Matrix<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = z.rows();
    (0..n)
        .map(|i| {
            let mut c: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((0..z.cols()).map(|c| (z.get(i, c) - z.get(j, c)).powi(2)).sum(), j))
                .collect();
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

#[test]
fn knn_on_a_line() {
    let z = Matrix::new(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
    let g = build_knn_graph(&z, 1).unwrap();
    assert_eq!(g.neighbors(0), &[1]);
    assert_eq!(g.neighbors(1), &[0]);
    assert_eq!(g.neighbors(2), &[1]);
    assert_eq!(g.affinities(2).collect::<Vec<_>>(), vec![-4.0]);
    let g = build_knn_graph(&z, 2).unwrap();
    assert_eq!(g.neighbors(0), &[1, 2]);
    assert_eq!(g.neighbors(1), &[0, 2]);
    assert_eq!(g.neighbors(2), &[1, 0]);
}

#[test]
fn knn_rejects_bad_k() {
    let z = random(5, 2, &mut rng(1));
    assert!(build_knn_graph(&z, 0).is_err());
    assert!(build_knn_graph(&z, 5).is_err());
    let full = build_knn_graph(&z, 4).unwrap();
    for i in 0..5 {
        let mut n = full.neighbors(i).to_vec();
        n.sort();
        assert_eq!(n, (0..5).filter(|&j| j != i).collect::<Vec<_>>());
    }
}

proptest! {
    #[test]
    fn knn_matches_brute_force(seed in 0u64..10_000, n in 4usize..30, k in 1usize..4) {
        let z = random(n, 3, &mut rng(seed));
        let g = build_knn_graph(&z, k).unwrap();
        let oracle = brute_knn(&z, k);
        for (i, expect) in oracle.iter().enumerate() {
            prop_assert_eq!(g.neighbors(i), &expect[..]);
            let aff: Vec<f64> = g.affinities(i).collect();
            prop_assert!(aff.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}

#[test]
fn edge_features_are_anchor_and_offset() {
    let store = ParameterStore::<f64>::new();
    let z = random(6, D, &mut rng(2));
    let knn = build_knn_graph(&z, 2).unwrap();
    let mut g = Graph::new(&store);
    let zv = g.input(z.clone()).unwrap();
    let e = edge_features(&mut g, zv, &knn).unwrap();
    let e = g.value(e);
    assert_eq!(e.shape(), (12, 2 * D));
    for i in 0..6 {
        for (r, &j) in knn.neighbors(i).iter().enumerate() {
            for c in 0..D {
                assert_eq!(e.get(i * 2 + r, c), z.get(i, c));
                assert_eq!(e.get(i * 2 + r, D + c), z.get(j, c) - z.get(i, c));
            }
        }
    }
}

#[test]
fn identical_graphs_concatenate_to_a_repeat() {
    let store = ParameterStore::<f64>::new();
    let z = random(7, D, &mut rng(3));
    let mut g = Graph::new(&store);
    let zv = g.input(z).unwrap();
    let (knn, e) = graph_edges(&mut g, zv, 3).unwrap();
    let cat = concat_graphs(&mut g, &[(&knn, e), (&knn, e), (&knn, e), (&knn, e)]).unwrap();
    let (e, cat) = (g.value(e), g.value(cat));
    assert_eq!(cat.shape(), (21, 8 * D));
    for i in 0..21 {
        for c in 0..8 * D {
            assert_eq!(cat.get(i, c), e.get(i, c % (2 * D)));
        }
    }
}

#[test]
fn concat_rejects_mismatched_graphs() {
    let store = ParameterStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.input(random(7, D, &mut rng(4))).unwrap();
    let (g2, e2) = graph_edges(&mut g, a, 2).unwrap();
    let (g3, e3) = graph_edges(&mut g, a, 3).unwrap();
    assert!(concat_graphs(&mut g, &[(&g2, e2), (&g3, e3)]).is_err());
    assert!(concat_graphs(&mut g, &[]).is_err());
}

#[test]
fn ring_size_must_divide_k() {
    assert!(randomized_module(1, shape(4, 3, 2)).is_err());
    assert!(randomized_module(1, shape(3, 3, 0)).is_err());
    assert!(randomized_module(1, shape(6, 3, 2)).is_ok());
}

fn randomized_module(seed: u64, s: CsmgcShape) -> Result<(Csmgc, ParameterStore<f64>)> {
    let mut store = ParameterStore::new();
    let mut r = rng(seed);
    let m = Csmgc::new(&mut corrlab_core::blocks::ParamBuilder::new(&mut store, &mut r), s)?;
    Ok((m, store))
}

#[test]
fn averaging_kernel_returns_ring_means() {
    let (m, mut store) = randomized(5, 1.0, |b| Csmgc::new(b, shape(6, 3, 2)));
    // Each ring kernel averages its three edges; combine adds the two rings.
    for lin in m.ring_linears() {
        store
            .set_value(lin.w, Matrix::from_fn(3 * D, D, |i, j| if i % D == j { 1.0 / 3.0 } else { 0.0 }))
            .unwrap();
        store.set_value(lin.b, Matrix::zeros(1, D)).unwrap();
    }
    let c = m.combine_linear();
    store.set_value(c.w, Matrix::from_fn(2 * D, D, |i, j| if i % D == j { 1.0 } else { 0.0 })).unwrap();
    store.set_value(c.b, Matrix::zeros(1, D)).unwrap();

    let edges = random(5 * 6, D, &mut rng(6));
    let out = eval(&store, &edges, |g, e| m.aggregate_rings(g, e));
    assert_eq!(out.shape(), (5, D));
    for i in 0..5 {
        for j in 0..D {
            let near = (0..3).map(|r| edges.get(i * 6 + r, j)).sum::<f64>() / 3.0;
            let far = (3..6).map(|r| edges.get(i * 6 + r, j)).sum::<f64>() / 3.0;
            assert!((out.get(i, j) - near - far).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_alignment_gives_zero_edges() {
    let (m, mut store) = randomized(7, 1.0, |b| Csmgc::new(b, shape(3, 3, 2)));
    let a = m.align_linear();
    store.set_value(a.w, Matrix::zeros(8 * D, D)).unwrap();
    store.set_value(a.b, Matrix::zeros(1, D)).unwrap();
    let fused = random(12, 8 * D, &mut rng(8));
    let out = eval(&store, &fused, |g, e| m.align_features(g, e));
    assert_eq!(out.shape(), (12, D));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn aggregate_rejects_bad_edge_shapes() {
    let (m, store) = randomized(9, 1.0, |b| Csmgc::new(b, shape(3, 3, 2)));
    let mut g = Graph::new(&store);
    let e = g.input(random(10, D, &mut rng(1))).unwrap();
    assert!(m.aggregate_rings(&mut g, e).is_err());
    let e = g.input(random(9, D + 1, &mut rng(1))).unwrap();
    assert!(m.aggregate_rings(&mut g, e).is_err());
    assert!(m.cross_stage_fuse(&mut g, &[]).is_err());
}

/// Module input packed as `[z1 | z2 | z3 | h1 | h2]`.
fn run_module(m: &Csmgc, g: &mut Graph<'_, f64>, x: Var) -> Result<Var> {
    let cols: Vec<Var> = (0..5).map(|i| g.slice_cols(x, i * D, (i + 1) * D)).collect::<Result<_>>()?;
    let bundle = StageFeatureBundle { z1: cols[0], z2: cols[1], z3: cols[2] };
    m.forward(g, bundle, &cols[3..])
}

#[test]
fn module_shape_and_equivariance() {
    let (m, store) = randomized(10, 1.0, |b| Csmgc::new(b, shape(6, 3, 2)));
    let mut r = rng(11);
    for _ in 0..10 {
        let x = random(13, 5 * D, &mut r);
        let p = permutation(13, &mut r);
        let run = |x: &Matrix<f64>| eval(&store, x, |g, x| run_module(&m, g, x));
        let base = run(&x);
        assert_eq!(base.shape(), (13, D));
        assert!(run(&x.gather_rows(&p)).max_abs_diff(&base.gather_rows(&p)).unwrap() < 1e-10);
    }
}

#[test]
fn module_passes_finite_differences() {
    for seed in 0..20 {
        let (m, s) = randomized(100 + seed, 1.0, |b| Csmgc::new(b, shape(3, 3, 2)));
        let c = fd_check(&s, (8, 5 * D), seed, |g, x| {
            let y = run_module(&m, g, x)?;
            project(g, y, seed)
        });
        assert!(c.passes(1e-4), "csmgc {seed}: {c:?}");
    }
}
