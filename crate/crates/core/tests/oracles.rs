mod common;

use common::*;
use gatecade::cascade::{
    argmax_rows, calibrate, decision_log, evaluate, gate_scores, roc_curve, split_scores, Cascade,
    GatingThreshold, Outcome,
};
use gatecade::data::{generate_dataset, ClassMap, DatasetSpec, Generator, Task, BACKGROUND};
use gatecade::gc::{GcLayer, GcMode};
use gatecade::island::{energy_from_decisions, simulate_empirical, Deployment};
use gatecade::nn::{AttentionBlock, BackboneSpec, Network};
use gatecade::power::SystemConfig;
use gatecade::rng::rng;
use gatecade::tensor::{Graph, ParamStore, Tensor};
use rand::Rng as _;

fn set(store: &mut ParamStore, name: &str, rows: usize, cols: usize, data: &[f64]) {
    let id = store.id(name).unwrap();
    *store.get_mut(id) = Tensor::matrix(rows, cols, data.to_vec());
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn two_unit_relu_network_matches_hand_evaluation() {
    let spec = BackboneSpec::Mlp {
        input_dim: 2,
        width: 2,
        depth: 2,
    };
    let mut store = ParamStore::new();
    let net = Network::new(&spec, 2, &mut store, &mut rng(0)).unwrap();
    set(&mut store, "u0.w", 2, 2, &[1.0, -1.0, 0.5, 2.0]);
    set(&mut store, "u0.b", 1, 2, &[0.1, -0.2]);
    set(&mut store, "u1.w", 2, 2, &[0.5, -1.0, 0.0, 0.25]);
    set(&mut store, "u1.b", 1, 2, &[0.0, -1.0]);
    set(&mut store, "head.w", 2, 2, &[1.0, 0.0, -1.0, 2.0]);
    set(&mut store, "head.b", 1, 2, &[0.0, 0.5]);
    let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.2]);

    // Sample 1: stem [2.1, 2.8]; branch [1.05, -2.4].
    // Sample 2: stem [0, 1.2]; branch [0, -0.7].
    let s = 1.0 / 2f64.sqrt();
    let h1 = [2.1 + 1.05 * s, 2.8 - 2.4 * s];
    let h2 = [0.0, 1.2 - 0.7 * s];
    let expected = [
        h1[0] - h1[1],
        2.0 * h1[1] + 0.5,
        h2[0] - h2[1],
        2.0 * h2[1] + 0.5,
    ];

    let h = net.eval_units(&store, &x, 0..2).unwrap();
    let plain = net.eval_head(&store, &h).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let hv = net.forward_units(&mut g, &store, xv, 0..2).unwrap();
    let lv = net.forward_head(&mut g, &store, hv).unwrap();
    for (i, e) in expected.iter().enumerate() {
        assert!((plain.data()[i] - e).abs() < 1e-12, "plain {i}");
        assert!((g.value(lv).data()[i] - e).abs() < 1e-12, "graph {i}");
    }
}

/// Straight-line single-head attention plus MLP on one sample.
fn attention_by_hand(store: &ParamStore, x: &[Vec<f64>], key_dim: usize) -> Vec<Vec<f64>> {
    let get = |n: &str| store.get(store.id(n).unwrap()).clone();
    let (wq, wk, wv) = (get("a.wq"), get("a.wk"), get("a.wv"));
    let (w1, b1, w2, b2) = (
        get("a.mlp1.w"),
        get("a.mlp1.b"),
        get("a.mlp2.w"),
        get("a.mlp2.b"),
    );
    let mat = |x: &[f64], w: &Tensor| -> Vec<f64> {
        (0..w.cols())
            .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum())
            .collect()
    };
    let q: Vec<Vec<f64>> = x.iter().map(|r| mat(r, &wq)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| mat(r, &wk)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| mat(r, &wv)).collect();
    let mut out = Vec::new();
    for i in 0..x.len() {
        let scores: Vec<f64> = (0..x.len())
            .map(|j| {
                q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (key_dim as f64).sqrt()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let h: Vec<f64> = (0..x[i].len())
            .map(|c| x[i][c] + (0..x.len()).map(|j| e[j] / z * v[j][c]).sum::<f64>())
            .collect();
        let hidden: Vec<f64> = mat(&h, &w1)
            .iter()
            .zip(b1.data())
            .map(|(a, b)| (a + b).max(0.0))
            .collect();
        let mlp = mat(&hidden, &w2);
        out.push((0..h.len()).map(|c| h[c] + mlp[c] + b2.data()[c]).collect());
    }
    out
}

#[test]
fn two_token_attention_matches_straight_line_evaluation() {
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "a", 3, 2, 4, &mut rng(0)).unwrap();
    let b1 = store.id("a.mlp1.b").unwrap();
    *store.get_mut(b1) = Tensor::row(vec![0.1, -0.2, 0.05, 0.3]);
    let rows = vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]];
    let x = Tensor::matrix(2, 3, rows.concat());
    let expected = attention_by_hand(&store, &rows, 2);
    let plain = block.eval(&store, &x).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let yv = block.forward(&mut g, &store, xv).unwrap();
    for i in 0..2 {
        for c in 0..3 {
            assert!((plain.get(i, c) - expected[i][c]).abs() < 1e-12);
            assert!((g.value(yv).get(i, c) - expected[i][c]).abs() < 1e-12);
        }
    }
    let w = block.attention_weights(&store, &x).unwrap();
    for i in 0..2 {
        assert!((w.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gc_forward_matches_hand_evaluation() {
    let mut store = ParamStore::new();
    let mut gc = GcLayer::new(&mut store, 4, 0.5, 1.0, 0.5, 0.0, &mut rng(0)).unwrap();
    gc.set_temperature(0.5).unwrap();
    set(&mut store, "gc.mask", 1, 4, &[1.0, -0.5, 0.0, 2.0]);
    set(&mut store, "gc.gate.w", 4, 1, &[0.5, -1.0, 0.25, 2.0]);
    set(&mut store, "gc.gate.b", 1, 1, &[-0.3]);
    // Two samples of two rows each.
    let f = Tensor::matrix(
        4,
        4,
        vec![
            1.0, 2.0, 0.0, -1.0, 3.0, 0.0, 2.0, 1.0, 0.0, 0.5, 1.0, 1.0, 2.0, 0.5, -1.0, 0.0,
        ],
    );
    let means = [[2.0, 1.0, 1.0, 0.0], [1.0, 0.5, 0.0, 0.5]];
    let w = [0.5, -1.0, 0.25, 2.0];
    let gates: Vec<f64> = means
        .iter()
        .map(|m| sigmoid(m.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 0.3))
        .collect();
    let soft = [sigmoid(2.0), sigmoid(-1.0), 0.5, sigmoid(4.0)];
    let hard = [1.0, 0.0, 1.0, 1.0];

    let train = gc.eval(&store, &f, 2, GcMode::Train).unwrap();
    let infer = gc.eval(&store, &f, 2, GcMode::Infer).unwrap();
    assert_eq!(infer.binary_mask, hard);
    for i in 0..2 {
        assert!((train.gate_scores[i] - gates[i]).abs() < 1e-12);
    }
    for k in 0..16 {
        assert!((train.gated_features.data()[k] - f.data()[k] * soft[k % 4]).abs() < 1e-12);
        assert_eq!(infer.gated_features.data()[k], f.data()[k] * hard[k % 4]);
    }
    let mut g = Graph::new();
    let fv = g.input(f.clone());
    let out = gc.forward(&mut g, &store, fv, 2, GcMode::Train).unwrap();
    for k in 0..16 {
        assert!((g.value(out.gated).data()[k] - train.gated_features.data()[k]).abs() < 1e-12);
    }
    for i in 0..2 {
        assert!((g.value(out.gate_scores).data()[i] - gates[i]).abs() < 1e-12);
    }
}

#[test]
fn cascade_matches_brute_force_two_pass_inference() {
    let (model, splits) = small_model(0.5, 0.5, 4);
    let scores = gate_scores(&model, &splits.val).unwrap();
    let (pos, _) = split_scores(&scores, &splits.val);
    let threshold = calibrate(&pos, 0.05).unwrap().threshold;
    let cascade = Cascade::new(&model, threshold);
    let decisions = cascade.run(&splits.test).unwrap();
    let mask = model.gc.binary_mask(&model.store);
    let gate = &model.gc.gate;
    let (mut stopped, mut sparse_worst) = (0, 0.0f64);
    for (i, d) in decisions.iter().enumerate() {
        let features = model.prefix_features(&splits.test.sample(i)).unwrap();
        let z: f64 = (0..features.cols())
            .map(|c| features.get(0, c) * model.store.get(gate.w).get(c, 0))
            .sum::<f64>()
            + model.store.get(gate.b).data()[0];
        let score = sigmoid(z);
        assert!((score - d.gate_score).abs() < 1e-12);
        if score >= threshold.tau {
            stopped += 1;
            assert_eq!(d.outcome, Outcome::EarlyStopped);
            continue;
        }
        let gated = Tensor::matrix(
            1,
            features.cols(),
            features
                .data()
                .iter()
                .zip(&mask)
                .map(|(a, m)| a * m)
                .collect(),
        );
        let dense = model.suffix_logits_dense(&gated).unwrap();
        let sparse = model.suffix_logits(&gated).unwrap();
        for (a, b) in dense.data().iter().zip(sparse.data()) {
            sparse_worst = sparse_worst.max((a - b).abs());
        }
        assert_eq!(d.outcome, Outcome::FullInference(argmax_rows(&dense)[0]));
        let zeros =
            gated.data().iter().filter(|v| **v == 0.0).count() as f64 / gated.numel() as f64;
        assert_eq!(d.transmitted_sparsity, Some(zeros));
    }
    assert!(sparse_worst < 1e-12, "{sparse_worst:e}");
    assert!(stopped > 0 && stopped < decisions.len());
    assert_eq!(cascade.suffix_evaluations(), decisions.len() - stopped);
}

#[test]
fn evaluation_metrics_match_confusion_matrix_from_decision_log() {
    let (model, splits) = small_model(0.5, 0.5, 5);
    for tau in [0.3, 0.6, 0.9, 0.99] {
        let eval = evaluate(
            &model,
            GatingThreshold::new(tau, 0.01).unwrap(),
            &splits.test,
        )
        .unwrap();
        let log = decision_log(&eval.decisions, &splits.test.classes);
        let (mut pos, mut neg, mut pos_stop, mut neg_stop, mut tp, mut pred_pos) =
            (0, 0, 0, 0, 0, 0);
        for r in &log {
            assert_eq!(r.stopped, r.gate_score >= tau);
            if r.label == BACKGROUND {
                neg += 1;
                neg_stop += r.stopped as usize;
            } else {
                pos += 1;
                pos_stop += r.stopped as usize;
            }
            if r.predicted_class != BACKGROUND {
                pred_pos += 1;
                tp += (r.predicted_class == r.label) as usize;
            }
        }
        let s = eval.stats;
        assert_eq!(s.correct_gating_rate, Some(neg_stop as f64 / neg as f64));
        assert_eq!(s.incorrect_gating_rate, Some(pos_stop as f64 / pos as f64));
        assert_eq!(s.recall, Some(tp as f64 / pos as f64));
        assert_eq!(
            s.precision,
            (pred_pos > 0).then(|| tp as f64 / pred_pos as f64)
        );
    }
}

#[test]
fn roc_curve_equals_threshold_enumeration() {
    let mut r = rng(8);
    for _ in 0..20 {
        let np = r.gen_range(1..40);
        let nn = r.gen_range(1..40);
        // Coarse grid so ties occur.
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_range(0..=20) as f64 / 20.0).collect() };
        let pos = draw(np);
        let neg = draw(nn);
        let roc = roc_curve(&pos, &neg).unwrap();
        let mut thresholds: Vec<f64> = pos.iter().chain(&neg).cloned().collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        thresholds.insert(0, f64::INFINITY);
        assert_eq!(roc.len(), thresholds.len());
        for (p, &t) in roc.iter().zip(&thresholds) {
            assert_eq!(p.threshold, t);
            let fs = pos.iter().filter(|&&s| s >= t).count() as f64 / np as f64;
            let cs = neg.iter().filter(|&&s| s >= t).count() as f64 / nn as f64;
            assert_eq!(p.false_stop_rate, fs);
            assert_eq!(p.correct_stop_rate, cs);
        }
    }
}

#[test]
fn wake_ups_equal_suffix_evaluations() {
    let (model, splits) = small_model(0.5, 0.5, 6);
    let threshold = GatingThreshold::new(0.7, 0.01).unwrap();
    let dep = Deployment::from_config(&SystemConfig::from_compute_share(0.5).unwrap()).unwrap();
    let cascade = Cascade::new(&model, threshold);
    let decisions = cascade.run(&splits.test).unwrap();
    let (report, trace) =
        energy_from_decisions(&dep, model.mu(), &decisions, &splits.test.classes).unwrap();
    assert_eq!(report.wake_ups, cascade.suffix_evaluations());
    assert_eq!(trace.len(), splits.test.len());

    let fresh = Cascade::new(&model, threshold);
    let (again, _) = simulate_empirical(&dep, &fresh, &splits.test).unwrap();
    assert_eq!(again.wake_ups, fresh.suffix_evaluations());
    assert_eq!(again.total_energy(), report.total_energy());
}

#[test]
fn cascade_decisions_do_not_depend_on_thread_count() {
    let (model, splits) = small_model(0.5, 0.5, 7);
    let threshold = GatingThreshold::new(0.8, 0.01).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| Cascade::new(&model, threshold).run(&splits.test).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn gaussian_cluster_moments_within_three_sigma() {
    let noise = 0.7;
    let dim = 3;
    let generator = Generator::GaussianClusters {
        dim,
        background_clusters: 2,
        separation: 3.0,
        noise,
    };
    let task = Task::new(&generator, 2, 11).unwrap();
    let n = 10_000;
    let data = task.sample(n, 0.5, Some(n / 2), &ClassMap::first_k(2), &mut rng(12));
    for (label, proto) in task.prototypes.iter().enumerate() {
        let rows: Vec<&[f64]> = (0..n)
            .filter(|&i| data.labels[i] == label as u32)
            .map(|i| data.inputs.row_slice(i))
            .collect();
        let m = rows.len() as f64;
        assert!(m > 1000.0);
        for c in 0..dim {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / m;
            let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            let mean_sigma = noise / m.sqrt();
            let var_sigma = noise * noise * (2.0 / (m - 1.0)).sqrt();
            assert!(
                (mean - proto[c]).abs() < 3.0 * mean_sigma,
                "label {label} coord {c} mean {mean} vs {}",
                proto[c]
            );
            assert!(
                (var - noise * noise).abs() < 3.0 * var_sigma,
                "label {label} coord {c} var {var}"
            );
        }
        let radius = proto.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((radius - 3.0).abs() < 1e-12);
    }
}

#[test]
fn ring_background_moments_within_three_sigma() {
    let generator = Generator::RingVsNoise {
        dim: 3,
        radius: 3.0,
        ring_gap: 1.0,
        ring_noise: 0.1,
        background_std: 1.5,
    };
    let task = Task::new(&generator, 1, 0).unwrap();
    let n = 10_000;
    let data = task.sample(n, 0.5, Some(n / 2), &ClassMap::first_k(1), &mut rng(3));
    let bg: Vec<&[f64]> = (0..n)
        .filter(|&i| !data.is_positive(i))
        .map(|i| data.inputs.row_slice(i))
        .collect();
    let m = bg.len() as f64;
    for c in 0..3 {
        let mean = bg.iter().map(|r| r[c]).sum::<f64>() / m;
        assert!(mean.abs() < 3.0 * 1.5 / m.sqrt());
    }
    let ring: Vec<f64> = (0..n)
        .filter(|&i| data.is_positive(i))
        .map(|i| {
            data.inputs.row_slice(i)[..2]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mean_r = ring.iter().sum::<f64>() / ring.len() as f64;
    assert!((mean_r - 3.0).abs() < 0.01, "{mean_r}");
}

#[test]
fn stratified_splits_are_exact_and_reproducible() {
    let spec = DatasetSpec {
        generator: Generator::GaussianClusters {
            dim: 4,
            background_clusters: 3,
            separation: 3.0,
            noise: 1.0,
        },
        num_positive_classes: 2,
        rho: 0.2,
        n_train: 1000,
        n_val: 500,
        n_test: 333,
        seed: 9,
        stratified: true,
    };
    let a = generate_dataset(&spec).unwrap();
    let b = generate_dataset(&spec).unwrap();
    assert_eq!(a.train.positive_count(), 200);
    assert_eq!(a.val.positive_count(), 100);
    assert_eq!(a.test.positive_count(), 67);
    assert_eq!(a.train.to_bytes(), b.train.to_bytes());
    assert_eq!(a.test.to_bytes(), b.test.to_bytes());
    assert_ne!(a.train.to_bytes(), a.val.to_bytes());
}

#[test]
fn gate_only_training_beats_chance() {
    let (model, splits) = small_model(0.5, 1.0, 2);
    let scores = gate_scores(&model, &splits.test).unwrap();
    let bce = scores
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let g = g.clamp(1e-12, 1.0 - 1e-12);
            if splits.test.is_positive(i) {
                -(1.0 - g).ln()
            } else {
                -g.ln()
            }
        })
        .sum::<f64>()
        / scores.len() as f64;
    assert!(bce < std::f64::consts::LN_2, "{bce}");
}

#[test]
fn mean_soft_mask_shrinks_as_sparsity_weight_grows() {
    let mut cfg = small_config();
    let splits = generate_dataset(&cfg.dataset).unwrap();
    let mut means = Vec::new();
    for lambda in [0.0, 0.1, 0.5, 2.0] {
        cfg.gc.lambda_gc = lambda;
        let (model, _) =
            gatecade::harness::train_partitioned(&cfg, &splits.train, 0.5, 0.5, 1).unwrap();
        let soft = model.gc.soft_mask(&model.store);
        means.push(soft.iter().sum::<f64>() / soft.len() as f64);
    }
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
    assert!(means[3] < means[0], "{means:?}");
}
