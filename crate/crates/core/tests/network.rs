use corrlab_core::geometry::{epipolar_loss, EightPointOp};
use corrlab_core::network::{hybrid_loss, top8_weights, Ablation, Checkpoint, Network, NetworkConfig, Trainer};
use corrlab_core::numeric::{param_diff_check, AdamConfig, Graph, Matrix, ParameterStore};
use corrlab_core::synthgen::{generate_scene, SceneConfig, ScenePair};
use corrlab_core::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn small() -> NetworkConfig {
    NetworkConfig {
        d: 8,
        oa_clusters: 4,
        ..NetworkConfig::default()
    }
}

fn scene(n: usize, outlier_ratio: f64, seed: u64) -> ScenePair {
    generate_scene(&SceneConfig {
        n_correspondences: n,
        outlier_ratio,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

#[test]
fn config_validation() {
    assert!(NetworkConfig::default().validate().is_ok());
    let bad = [
        NetworkConfig { use_iter: false, ..NetworkConfig::default() },
        NetworkConfig { n_stages: 2, ..NetworkConfig::default() },
        NetworkConfig { k: 4, ..NetworkConfig::default() },
        NetworkConfig { gamma: -1.0, ..NetworkConfig::default() },
        NetworkConfig { d: 0, ..NetworkConfig::default() },
        NetworkConfig { label_threshold: 0.0, ..NetworkConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
    let parsed: NetworkConfig = serde_json::from_str(r#"{"d": 16}"#).unwrap();
    assert_eq!(parsed, NetworkConfig { d: 16, ..NetworkConfig::default() });
    assert!(serde_json::from_str::<NetworkConfig>(r#"{"width": 16}"#).is_err());
}

#[test]
fn ablations_select_modules() {
    let names = |a: Ablation| {
        let (_, store) = Network::init::<f64>(&small().with_ablation(a), 0).unwrap();
        store.iter().map(|(_, p)| p.name.clone()).collect::<Vec<_>>()
    };
    for a in Ablation::ALL {
        let cfg = small().with_ablation(a);
        let (iter, cga, csmgc) = a.flags();
        let n = names(a);
        assert_eq!(cfg.stages(), if iter { 3 } else { 1 }, "{}", a.label());
        assert_eq!(n.iter().any(|s| s.contains(".cpa")), cga, "{}", a.label());
        assert_eq!(n.iter().any(|s| s.contains(".csmgc.")), csmgc, "{}", a.label());
        assert!(!n.iter().any(|s| s.starts_with("stage0.csmgc")));
    }
}

#[test]
fn forward_outputs() {
    let (net, store) = Network::init::<f64>(&small(), 1).unwrap();
    let sc = scene(40, 0.5, 2);
    let mut g = Graph::new(&store);
    let out = net.forward(&mut g, &sc.correspondences).unwrap();
    assert_eq!(out.stages.len(), 3);
    assert_eq!(out.logits.len(), 40);
    for st in &out.stages {
        let (l, w) = (g.value(st.logits), g.value(st.weights));
        assert_eq!(l.shape(), (40, 1));
        for (&l, &w) in l.data().iter().zip(w.data()) {
            assert_eq!(w, l.max(0.0).tanh());
            assert!((0.0..1.0).contains(&w));
        }
    }
    if !out.fallback {
        assert!(out.e_hat.is_some());
    }

    let tiny = scene(16, 0.5, 3).correspondences.select(&(0..15).collect::<Vec<_>>());
    let mut g = Graph::new(&store);
    assert!(matches!(net.forward(&mut g, &tiny), Err(Error::TooFewRows { .. })));
}

#[test]
fn top8_prefers_lower_index_on_ties() {
    let logits = [1.0, 3.0, 3.0, 0.0, 3.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0];
    let w = top8_weights(&logits);
    assert_eq!(w, vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn network_is_permutation_equivariant() {
    let (net, store) = Network::init::<f64>(&NetworkConfig::default(), 5).unwrap();
    let sc = scene(64, 0.5, 6);
    let run = |set: &corrlab_core::geometry::CorrespondenceSet| {
        let mut g = Graph::new(&store);
        net.forward(&mut g, set).unwrap()
    };
    let base = run(&sc.correspondences);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let mut p: Vec<usize> = (0..64).collect();
        p.shuffle(&mut rng);
        let out = run(&sc.correspondences.select(&p));
        for (i, &j) in p.iter().enumerate() {
            assert!((out.logits[i] - base.logits[j]).abs() < 1e-8);
        }
        if let (Some(a), Some(b)) = (&out.e_hat, &base.e_hat) {
            assert!(a.distance_up_to_sign(b) < 1e-8);
        }
        assert_eq!(out.e_hat.is_some(), base.e_hat.is_some());
    }
}

#[test]
fn loss_combines_terms() {
    let sc = scene(48, 0.5, 8);
    for gamma in [0.0, 0.5, 2.0] {
        let cfg = NetworkConfig { gamma, ..small() };
        let (net, store) = Network::init::<f64>(&cfg, 9).unwrap();
        let mut g = Graph::new(&store);
        let out = net.forward(&mut g, &sc.correspondences).unwrap();
        let t = hybrid_loss(&mut g, &out, &sc.correspondences, &sc.labels, &cfg).unwrap();
        assert_eq!(t.stages.len(), 3);
        let expect = t.stages.iter().map(|s| s.l_c + gamma * s.l_e).sum::<f64>() / 3.0;
        assert!((t.total_value - expect).abs() < 1e-10);
        assert!((t.total_value - (t.l_c + gamma * t.l_e)).abs() < 1e-10);
        if gamma == 0.0 {
            assert_eq!(t.total_value, t.l_c);
        }
    }
    let cfg = NetworkConfig { deep_supervision: false, ..small() };
    let (net, store) = Network::init::<f64>(&cfg, 9).unwrap();
    let mut g = Graph::new(&store);
    let out = net.forward(&mut g, &sc.correspondences).unwrap();
    let t = hybrid_loss(&mut g, &out, &sc.correspondences, &sc.labels, &cfg).unwrap();
    assert_eq!(t.stages.len(), 1);
}

#[test]
fn weighted_bce_matches_hand_values() {
    let store = ParameterStore::<f64>::new();
    let mut g = Graph::new(&store);
    let logits = [2.0, -1.0, 0.5, 0.0];
    let y = [1.0, 0.0, 0.0, 1.0];
    let w = [3.0, 1.0, 1.0, 3.0];
    let x = g.input(Matrix::new(4, 1, logits.to_vec()).unwrap()).unwrap();
    let l = g.weighted_bce(x, &y, &w).unwrap();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let expect = (0..4)
        .map(|i| -w[i] * (y[i] * sig(logits[i]).ln() + (1.0 - y[i]) * (1.0 - sig(logits[i])).ln()))
        .sum::<f64>()
        / 4.0;
    assert!((g.value(l).item().unwrap() - expect).abs() < 1e-14);

    let sure = g.input(Matrix::new(4, 1, vec![40.0, -40.0, -40.0, 40.0]).unwrap()).unwrap();
    let l = g.weighted_bce(sure, &y, &w).unwrap();
    assert!(g.value(l).item().unwrap() < 1e-15);
}

#[test]
fn epipolar_term_vanishes_at_ground_truth_weights() {
    let sc = generate_scene(&SceneConfig {
        n_correspondences: 64,
        outlier_ratio: 0.5,
        pixel_noise_std: 0.0,
        seed: 10,
        ..SceneConfig::default()
    })
    .unwrap();
    let store = ParameterStore::<f64>::new();
    let mut g = Graph::new(&store);
    let w: Vec<f64> = sc.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let wv = g.input(Matrix::new(64, 1, w).unwrap()).unwrap();
    let (e, est) = EightPointOp::apply(&mut g, &sc.correspondences, wv).unwrap();
    assert!(est.distance_up_to_sign(&sc.essential_gt) < 1e-8);
    let l = epipolar_loss(&mut g, e, &sc.correspondences, &sc.inlier_indices()).unwrap();
    assert!(g.value(l).item().unwrap() < 1e-15);
}

#[test]
fn scenes_without_inliers_skip_the_epipolar_term() {
    let sc = scene(32, 1.0, 11);
    let cfg = small();
    let (net, store) = Network::init::<f64>(&cfg, 12).unwrap();
    let mut g = Graph::new(&store);
    let out = net.forward(&mut g, &sc.correspondences).unwrap();
    let t = hybrid_loss(&mut g, &out, &sc.correspondences, &sc.labels, &cfg).unwrap();
    assert!(t.stages.iter().all(|s| s.no_inliers && s.l_e == 0.0));
    assert_eq!(t.total_value, t.l_c);
    assert!(g.backward(t.total).is_ok());
}

#[test]
fn label_count_must_match() {
    let sc = scene(32, 0.5, 13);
    let (net, store) = Network::init::<f64>(&small(), 0).unwrap();
    let mut g = Graph::new(&store);
    let out = net.forward(&mut g, &sc.correspondences).unwrap();
    assert!(hybrid_loss(&mut g, &out, &sc.correspondences, &sc.labels[1..], &small()).is_err());
}

#[test]
fn training_overfits_one_scene() {
    let sc = scene(64, 0.5, 14);
    let adam = AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() };
    let mut t = Trainer::<f64>::new(&small(), 15, adam).unwrap();
    let losses: Vec<f64> = (0..50).map(|i| t.train_step(&sc, i).unwrap().total).collect();
    let head = losses[..5].iter().sum::<f64>() / 5.0;
    let tail = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn training_is_deterministic() {
    let sc = scene(48, 0.6, 16);
    let run = || {
        let mut t = Trainer::<f64>::new(&small(), 17, AdamConfig::default()).unwrap();
        (0..5).map(|i| t.train_step(&sc, i).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.same_numbers(y));
        assert!(x.grad_norm > 0.0 && x.grad_norm.is_finite());
    }
}

#[test]
fn gradient_clipping_bounds_the_update() {
    let sc = scene(48, 0.6, 18);
    let mut a = Trainer::<f64>::new(&small(), 19, AdamConfig::default()).unwrap();
    a.grad_clip = Some(1e-12);
    let before = a.store.clone();
    let rec = a.train_step(&sc, 0).unwrap();
    assert!(rec.grad_norm > 1e-12);
    // Adam normalizes the step size, so clipping shows up only in the moments.
    let moved = a.store.iter().zip(before.iter()).any(|((_, p), (_, q))| p.value != q.value);
    assert!(moved);
}

#[test]
fn checkpoint_round_trip() {
    let dir = std::env::temp_dir().join(format!("corrlab-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.json");
    let sc = scene(40, 0.5, 20);
    let mut t = Trainer::<f64>::new(&small(), 21, AdamConfig::default()).unwrap();
    t.train_step(&sc, 0).unwrap();
    Checkpoint::capture(t.config(), &t.store).save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    let r: Trainer<f64> = loaded.restore(Some(&small()), AdamConfig::default()).unwrap();
    assert_eq!(r.predict(&sc.correspondences).unwrap(), t.predict(&sc.correspondences).unwrap());

    let other = NetworkConfig { d: 16, ..small() };
    assert!(matches!(loaded.restore::<f64>(Some(&other), AdamConfig::default()), Err(Error::Config(_))));

    let mut broken = loaded.clone();
    broken.params.pop();
    assert!(broken.restore::<f64>(None, AdamConfig::default()).is_err());
    let mut broken = loaded.clone();
    broken.params[0].rows += 1;
    assert!(broken.restore::<f64>(None, AdamConfig::default()).is_err());

    std::fs::write(&path, "{not json").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Parse { .. })));
    std::fs::remove_dir_all(&dir).unwrap();
}

/// Gradient of the full training loss, through every stage and the weighted
/// eight-point solve, against central differences on selected parameters.
#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = NetworkConfig { d: 4, oa_clusters: 2, ..NetworkConfig::default() };
    let names = [
        "stage0.embed.w",
        "stage1.cpa2.q.linear.w",
        "stage1.oa.down.w",
        "stage2.csmgc.align.w",
        "stage2.csmgc.fuse.excite1.w",
        "stage2.head.w",
    ];
    let mut checked = 0;
    for seed in 0..400u64 {
        if checked == 20 {
            break;
        }
        let sc = scene(24, 0.4, 1000 + seed);
        let (net, store) = Network::init::<f64>(&cfg, seed).unwrap();
        let f = |g: &mut Graph<'_, f64>| {
            let out = net.forward(g, &sc.correspondences)?;
            Ok(hybrid_loss(g, &out, &sc.correspondences, &sc.labels, &cfg)?.total)
        };
        // Only configurations where every stage differentiates through the solve.
        let solved = {
            let mut g = Graph::new(&store);
            let out = net.forward(&mut g, &sc.correspondences).unwrap();
            let t = hybrid_loss(&mut g, &out, &sc.correspondences, &sc.labels, &cfg).unwrap();
            t.stages.iter().all(|s| !s.fallback && !s.solve_failed)
        };
        if !solved {
            continue;
        }
        let checks: Vec<_> = names
            .iter()
            .map(|n| param_diff_check(&store, store.id(n).unwrap(), f, 1e-6).unwrap())
            .collect();
        if checks.iter().any(|c| c.branch_changed) {
            continue;
        }
        for (n, c) in names.iter().zip(&checks) {
            assert!(c.passes_on_branch(1e-3), "seed {seed} {n}: {c:?}");
        }
        checked += 1;
    }
    assert_eq!(checked, 20, "too few smooth configurations");
}
