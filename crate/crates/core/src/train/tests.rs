use std::collections::BTreeSet;

use rand::Rng;

use super::*;
use crate::encoders::EncoderSpec;
use crate::events::{Event, EventStore, NodeKey, Registry};
use crate::graph::TopologyMode;
use crate::model::{fit_max_fs, ModelConfig, ModelSpec};
use crate::ndiff::relative_error;
use crate::sampler::{sample_snapshot, NodeSample, WindowSpec};

fn labelled(y: &[f64]) -> Snapshot {
    let n = y.len();
    Snapshot {
        reference_time: 0,
        nodes: vec![NodeSample {
            node: NodeKey::new(VarType::ssh(), "p"),
            x_past: Matrix::zeros(1, 4),
            x_future: Matrix::zeros(n, 3),
            y: Some(Matrix::column_vector(y)),
            past_offsets: vec![-1],
            future_offsets: (0..n as i64).collect(),
        }],
        edges: vec![],
    }
}

fn loss_of(pred: &[f64], y: &[f64]) -> Option<f64> {
    let s = labelled(y);
    let tape = Tape::new();
    let v = tape.var(Matrix::column_vector(pred));
    let f = BatchForecast {
        per_snapshot: vec![vec![Some(v)]],
    };
    ioa_loss(&tape, &f, &[&s]).map(|l| tape.value(l).item())
}

#[test]
fn loss_anchor_values() {
    let y = [0.5, 2.0, -1.0, 3.0];
    assert_eq!(loss_of(&y, &y), Some(0.0));
    let m = y.iter().sum::<f64>() / 4.0;
    assert_eq!(loss_of(&[m; 4], &y), Some(1.0));
    assert_eq!(loss_of(&[1.0, 2.0], &[3.0, 3.0]), None);
    assert_eq!(loss_of(&[1.0], &[3.0]), None);
    let oracle = 1.0 - ioa(&y, &[0.0, 1.0, 2.0, 3.0]).unwrap();
    assert!((loss_of(&[0.0, 1.0, 2.0, 3.0], &y).unwrap() - oracle).abs() < 1e-15);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = seeded_rng(4);
    for _ in 0..20 {
        let n = rng.random_range(2..12);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = labelled(&y);
        let tape = Tape::new();
        let v = tape.var(Matrix::column_vector(&p));
        let f = BatchForecast {
            per_snapshot: vec![vec![Some(v)]],
        };
        let loss = ioa_loss(&tape, &f, &[&s]).unwrap();
        let g = tape.backward(loss).unwrap().wrt(v).unwrap().clone();
        for i in 0..n {
            let h = 1e-5;
            let mut up = p.clone();
            up[i] += h;
            let mut dn = p.clone();
            dn[i] -= h;
            let num = (loss_of(&up, &y).unwrap() - loss_of(&dn, &y).unwrap()) / (2.0 * h);
            assert!(relative_error(g.get(i, 0), num) < 1e-4, "{} vs {num}", g.get(i, 0));
        }
    }
}

fn toy_store(seed: u64) -> EventStore {
    let reg = Registry::estuary(&["a", "b"], &[VarType::current(), VarType::ssh(), VarType::wind()]).unwrap();
    let mut rng = seeded_rng(seed);
    let mut events = Vec::new();
    for node in reg.nodes.clone() {
        let k = reg.spec(&node.var_type).unwrap().arity();
        let phase: f64 = rng.random_range(0.0..6.0);
        for i in 0..200i64 {
            if rng.random::<f64>() < 0.15 {
                continue;
            }
            let x = (i as f64 * 0.25 + phase).sin();
            events.push((
                0,
                Event {
                    node: node.clone(),
                    timestamp: i * 1800,
                    features: (0..k).map(|c| x * (c as f64 + 1.0) + 0.05 * rng.random::<f64>()).collect(),
                },
            ));
        }
    }
    EventStore::from_events(reg, events).0
}

fn toy_setup(seed: u64) -> (Model, Vec<Snapshot>, Vec<Snapshot>, EventStore) {
    let store = toy_store(1);
    let targets: BTreeSet<VarType> = [VarType::current(), VarType::ssh()].into();
    let w = WindowSpec::new(4 * 3600, 2 * 3600).unwrap();
    let snaps: Vec<Snapshot> = (0..12)
        .map(|j| sample_snapshot(&store, 20_000 + j * 25_000, w, TopologyMode::FullyConnected, &targets).unwrap())
        .collect();
    let (train_set, val_set) = (snaps[..8].to_vec(), snaps[8..].to_vec());
    let spec = ModelSpec {
        config: ModelConfig {
            encoder: EncoderSpec {
                embed_size: 6,
                lstm_hidden: 5,
                ..EncoderSpec::default()
            },
            decoder_hidden: vec![8],
            ..ModelConfig::default()
        },
        registry: store.registry().clone(),
        inputs: [VarType::current(), VarType::ssh(), VarType::wind()].into(),
        targets: targets.clone(),
        max_fs: fit_max_fs(&snaps, &targets),
        time_scale: w.past_len as f64,
    };
    (Model::new(spec, seed).unwrap(), train_set, val_set, store)
}

fn quick() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_epochs: 4,
        patience: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (mut model, tr, va, _) = toy_setup(1);
    let before = model.params.clone();
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        ..quick()
    };
    let state = train(&mut model, &tr, &va, &cfg, 1).unwrap();
    assert_eq!(state.epochs_run, 4);
    for ((_, _, a), (_, _, b)) in before.iter().zip(model.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn training_is_reproducible_and_improves() {
    let run = || {
        let (mut model, tr, va, _) = toy_setup(2);
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            max_epochs: 15,
            ..quick()
        };
        let state = train(&mut model, &tr, &va, &cfg, 2).unwrap();
        (state, model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    assert_eq!(a.best_val_loss, a.history[a.best_epoch - 1].val_loss);
    assert!(a.history.iter().all(|r| r.val_loss >= a.best_val_loss));
    assert!(a.history_csv().lines().count() == a.history.len() + 1);
}

#[test]
fn evaluation_is_pure_and_filters_locations() {
    let (mut model, tr, va, store) = toy_setup(3);
    train(&mut model, &tr, &va, &quick(), 3).unwrap();
    let stats = crate::events::fit_normalization(&store, 0, 1).unwrap();
    let before = model.params.clone();
    let a = evaluate(&model, &va, &stats, None, Pooling::Pooled, Some(3)).unwrap();
    let b = evaluate(&model, &va, &stats, None, Pooling::Pooled, Some(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, model.params);
    let only_b = evaluate(&model, &va, &stats, Some(&["b".to_string()]), Pooling::Pooled, None).unwrap();
    assert!(only_b.forecasts.iter().all(|f| f.node.location == "b"));
    let missing = evaluate(&model, &va, &stats, Some(&["nowhere".to_string()]), Pooling::Pooled, None);
    assert!(matches!(missing, Err(Error::NoTarget)));

    // pooled IoA over all forecasts equals a direct computation on the concatenation
    let (mut y, mut f) = (Vec::new(), Vec::new());
    for sf in a.forecasts.iter().filter(|sf| sf.node.var_type == VarType::ssh()) {
        y.extend(sf.truth.column(0));
        f.extend(sf.forecast.column(0));
    }
    assert_eq!(a.report.metrics[&VarType::ssh()]["height"].ioa, ioa(&y, &f));
}

#[test]
fn multi_seed_aggregation() {
    let report = |v: f64| {
        let mut r = MetricReport::default();
        r.headline_ioa.insert(VarType::ssh(), Some(v));
        r
    };
    let one = multi_seed(&[5], |_| Ok(report(0.7))).unwrap();
    assert_eq!(one.mean["ssh/headline/ioa"], 0.7);
    assert_eq!(one.std["ssh/headline/ioa"], 0.0);
    assert_eq!(one.per_seed[0].seed, Some(5));

    let two = multi_seed(&[1, 2], |s| Ok(report(if s == 1 { 0.7 } else { 0.8 }))).unwrap();
    assert!((two.mean["ssh/headline/ioa"] - 0.75).abs() < 1e-15);
    assert!(!two.partial);
    assert_eq!(two.to_csv().lines().count(), 5);

    let flaky = multi_seed(&[1, 2, 3], |s| {
        if s == 2 {
            Err(Error::NoScorableTarget)
        } else {
            Ok(report(s as f64 / 10.0))
        }
    })
    .unwrap();
    assert!(flaky.partial);
    assert_eq!(flaky.failures[0].seed, 2);
    assert!(multi_seed(&[], |_| Ok(report(0.0))).is_err());
}

#[test]
fn multi_seed_mean_lies_within_range() {
    let r = multi_seed(&(0..10).collect::<Vec<_>>(), |s| {
        let mut r = MetricReport::default();
        r.headline_ioa.insert(VarType::current(), Some(((s * 37) % 11) as f64 / 11.0));
        Ok(r)
    })
    .unwrap();
    let vals: Vec<f64> = r.per_seed.iter().map(|p| p.headline_ioa[&VarType::current()].unwrap()).collect();
    let m = r.mean["current/headline/ioa"];
    assert!(vals.iter().cloned().fold(f64::INFINITY, f64::min) <= m);
    assert!(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= m);
}
