//! Discrete-time snapshots sampled from the event store, and the
//! chronological train/validation/test split.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::events::{EventStore, NodeKey, NormStats, Registry, VarType};
use crate::graph::{build_topology, TopologyMode};
use crate::ndiff::Matrix;

/// Past window `[t - past_len, t)` and future window `[t, t + future_len)`,
/// both in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowSpec {
    pub past_len: i64,
    pub future_len: i64,
}

impl WindowSpec {
    pub fn new(past_len: i64, future_len: i64) -> Result<Self> {
        let w = WindowSpec {
            past_len,
            future_len,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.past_len <= 0 || self.future_len <= 0 {
            return Err(Error::Config(format!(
                "window lengths must be positive (past {}, future {})",
                self.past_len, self.future_len
            )));
        }
        Ok(())
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            past_len: 7 * 86_400,
            future_len: 48 * 3600,
        }
    }
}

/// The three sequences of one node in a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSample {
    pub node: NodeKey,
    /// `ps × k`, every feature column.
    pub x_past: Matrix,
    /// `fs × |known_future|`, only the columns known ahead of time.
    pub x_future: Matrix,
    /// `fs × l`, label columns; present only for target types.
    pub y: Option<Matrix>,
    /// Seconds relative to the reference time (negative).
    pub past_offsets: Vec<i64>,
    /// Seconds relative to the reference time (non-negative).
    pub future_offsets: Vec<i64>,
}

impl NodeSample {
    pub fn past_len(&self) -> usize {
        self.past_offsets.len()
    }

    pub fn future_len(&self) -> usize {
        self.future_offsets.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub reference_time: i64,
    /// Present nodes in key order.
    pub nodes: Vec<NodeSample>,
    /// Directed `(source, target)` pairs indexing into `nodes`.
    pub edges: Vec<(usize, usize)>,
}

impl Snapshot {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn keys(&self) -> Vec<NodeKey> {
        self.nodes.iter().map(|n| n.node.clone()).collect()
    }

    pub fn position(&self, node: &NodeKey) -> Option<usize> {
        self.nodes.iter().position(|n| &n.node == node)
    }
}

/// Builds one snapshot at reference time `t`. A node is present iff its past
/// window holds at least one event.
pub fn sample_snapshot(
    store: &EventStore,
    t: i64,
    window: WindowSpec,
    mode: TopologyMode,
    targets: &BTreeSet<VarType>,
) -> Result<Snapshot> {
    window.validate()?;
    let registry = store.registry();
    let mut nodes = Vec::new();
    for node in store.nodes() {
        let past = store.query_window(node, t - window.past_len, t);
        if past.is_empty() {
            continue;
        }
        let spec = registry.require_spec(&node.var_type)?;
        let k = spec.arity();
        let future = store.query_window(node, t, t + window.future_len);
        let fs = future.len();

        let mut x_past = Matrix::zeros(past.len(), k);
        for i in 0..past.len() {
            x_past.row_mut(i).copy_from_slice(past.row(i));
        }
        let x_future = Matrix::from_fn(fs, spec.known_future.len(), |r, c| {
            future.row(r)[spec.known_future[c]]
        });
        let y = targets.contains(&node.var_type).then(|| {
            Matrix::from_fn(fs, spec.labels.len(), |r, c| future.row(r)[spec.labels[c]])
        });
        nodes.push(NodeSample {
            node: node.clone(),
            x_past,
            x_future,
            y,
            past_offsets: past.timestamps.iter().map(|&s| s - t).collect(),
            future_offsets: future.timestamps.iter().map(|&s| s - t).collect(),
        });
    }
    let keys: Vec<NodeKey> = nodes.iter().map(|n| n.node.clone()).collect();
    Ok(Snapshot {
        reference_time: t,
        nodes,
        edges: build_topology(&keys, mode),
    })
}

/// Everything that determines a sampled dataset besides the store itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub count: usize,
    /// Reference-time range `[start, end)`.
    pub range: (i64, i64),
    pub window: WindowSpec,
    pub topology: TopologyMode,
    pub targets: BTreeSet<VarType>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtdgDataset {
    pub params: SamplingParams,
    pub spacing: i64,
    pub snapshots: Vec<Snapshot>,
    /// Reference times whose snapshot had no present node.
    pub dropped_empty: Vec<i64>,
}

/// Samples `count` snapshots at `a + j * spacing`, `spacing = (b - a) / count`
/// rounded down to whole seconds. Empty snapshots are dropped and recorded.
pub fn sample_dtdg(store: &EventStore, params: SamplingParams) -> Result<DtdgDataset> {
    params.window.validate()?;
    let (a, b) = params.range;
    if params.count == 0 {
        return Err(Error::Sampling("snapshot count must be at least 1".into()));
    }
    if b - a < params.window.past_len + params.window.future_len {
        return Err(Error::Sampling(format!(
            "range [{a}, {b}) is shorter than past_len + future_len = {}",
            params.window.past_len + params.window.future_len
        )));
    }
    let spacing = (b - a) / params.count as i64;
    if spacing < 1 {
        return Err(Error::Sampling(format!(
            "{} snapshots do not fit in {} seconds",
            params.count,
            b - a
        )));
    }
    let mut snapshots = Vec::with_capacity(params.count);
    let mut dropped_empty = Vec::new();
    for j in 0..params.count as i64 {
        let t = a + j * spacing;
        let snap = sample_snapshot(store, t, params.window, params.topology, &params.targets)?;
        if snap.is_empty() {
            dropped_empty.push(t);
        } else {
            snapshots.push(snap);
        }
    }
    if !dropped_empty.is_empty() {
        log::info!("dropped {} empty snapshots", dropped_empty.len());
    }
    Ok(DtdgDataset {
        params,
        spacing,
        snapshots,
        dropped_empty,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestNode {
    pub node: NodeKey,
    pub past_rows: usize,
    pub future_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSnapshot {
    pub reference_time: i64,
    pub edges: usize,
    pub nodes: Vec<ManifestNode>,
}

/// JSON description of a dataset, keyed by a hash of the store digest and
/// the sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cache_key: String,
    pub store_digest: String,
    pub params: SamplingParams,
    pub spacing: i64,
    pub dropped_empty: Vec<i64>,
    pub snapshots: Vec<ManifestSnapshot>,
}

pub fn cache_key(store_digest: &str, params: &SamplingParams) -> Result<String> {
    let mut h = Sha256::new();
    h.update(store_digest.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(params)?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl DtdgDataset {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn manifest(&self, store_digest: &str) -> Result<DatasetManifest> {
        Ok(DatasetManifest {
            cache_key: cache_key(store_digest, &self.params)?,
            store_digest: store_digest.to_string(),
            params: self.params.clone(),
            spacing: self.spacing,
            dropped_empty: self.dropped_empty.clone(),
            snapshots: self
                .snapshots
                .iter()
                .map(|s| ManifestSnapshot {
                    reference_time: s.reference_time,
                    edges: s.edges.len(),
                    nodes: s
                        .nodes
                        .iter()
                        .map(|n| ManifestNode {
                            node: n.node.clone(),
                            past_rows: n.past_len(),
                            future_rows: n.future_len(),
                        })
                        .collect(),
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Snapshot>,
    pub val: Vec<Snapshot>,
    pub test: Vec<Snapshot>,
    /// Snapshots removed at split boundaries to keep windows disjoint.
    pub purged: Vec<Snapshot>,
}

/// Chronological split. Train and validation receive `floor(fraction * n)`
/// snapshots and test the remainder. At each boundary, later snapshots whose
/// past window reaches into an earlier snapshot's future window are purged.
pub fn chronological_split(
    snapshots: &[Snapshot],
    window: WindowSpec,
    fractions: SplitFractions,
) -> Result<Split> {
    let SplitFractions { train, val, test } = fractions;
    if !(train > 0.0 && val > 0.0 && test > 0.0) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({train}, {val}, {test})"
        )));
    }
    let mut sorted: Vec<&Snapshot> = snapshots.iter().collect();
    sorted.sort_by_key(|s| s.reference_time);
    let n = sorted.len();
    // The epsilon absorbs products such as 0.7 * 10 = 7.000000000000001.
    let n_train = (train * n as f64 + 1e-9).floor() as usize;
    let n_val = (val * n as f64 + 1e-9).floor() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);

    let mut purged = Vec::new();
    let mut keep_after = |part: &[&Snapshot], before: &[Snapshot]| -> Vec<Snapshot> {
        let mut out = Vec::new();
        let horizon = before.last().map(|s| s.reference_time + window.future_len);
        for s in part {
            match horizon {
                Some(h) if s.reference_time - window.past_len < h => purged.push((*s).clone()),
                _ => out.push((*s).clone()),
            }
        }
        out
    };
    let train_set: Vec<Snapshot> = sorted[..n_train].iter().map(|s| (*s).clone()).collect();
    let val_set = keep_after(&sorted[n_train..n_train + n_val], &train_set);
    let val_ref: &[Snapshot] = if val_set.is_empty() { &train_set } else { &val_set };
    let test_set = keep_after(&sorted[n_train + n_val..], val_ref);

    for (name, part) in [("train", &train_set), ("validation", &val_set), ("test", &test_set)] {
        if part.is_empty() {
            return Err(Error::Sampling(format!(
                "{name} split is empty ({n} snapshots, fractions ({train}, {val}, {test}))"
            )));
        }
    }
    Ok(Split {
        train: train_set,
        val: val_set,
        test: test_set,
        purged,
    })
}

/// Applies z-score statistics to every sequence of a snapshot. Known-future
/// and label columns are scaled with the statistics of their source column.
pub fn normalize_snapshot(snapshot: &Snapshot, stats: &NormStats, registry: &Registry) -> Result<Snapshot> {
    let mut out = snapshot.clone();
    for n in &mut out.nodes {
        let spec = registry.require_spec(&n.node.var_type)?;
        let node = &n.node;
        let scale = |m: &Matrix, cols: &dyn Fn(usize) -> usize| {
            Matrix::from_fn(m.rows(), m.cols(), |r, c| stats.normalize(node, cols(c), m.get(r, c)))
        };
        n.x_past = scale(&n.x_past, &|c| c);
        n.x_future = scale(&n.x_future, &|c| spec.known_future[c]);
        n.y = n.y.as_ref().map(|y| scale(y, &|c| spec.labels[c]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Registry};
    use proptest::prelude::*;
    use rand::Rng;

    fn registry() -> Registry {
        Registry::estuary(
            &["alemoa", "praticagem"],
            &[VarType::current(), VarType::ssh(), VarType::wind()],
        )
        .unwrap()
    }

    fn store(events: Vec<(NodeKey, i64, Vec<f64>)>) -> EventStore {
        let (s, report) = EventStore::from_events(
            registry(),
            events.into_iter().map(|(node, timestamp, features)| {
                (
                    0,
                    Event {
                        node,
                        timestamp,
                        features,
                    },
                )
            }),
        );
        assert!(report.rejected.is_empty(), "{:?}", report.rejected);
        s
    }

    fn key(t: VarType, loc: &str) -> NodeKey {
        NodeKey::new(t, loc)
    }

    fn targets(ts: &[VarType]) -> BTreeSet<VarType> {
        ts.iter().cloned().collect()
    }

    fn bare(t: i64) -> Snapshot {
        Snapshot {
            reference_time: t,
            nodes: vec![],
            edges: vec![],
        }
    }

    #[test]
    fn events_only_after_reference_time_give_empty_snapshot() {
        let n = key(VarType::current(), "alemoa");
        let s = store(vec![(n, 100, vec![0.0, 0.0])]);
        let snap = sample_snapshot(&s, 100, WindowSpec::new(50, 50).unwrap(), TopologyMode::FullyConnected, &targets(&[]))
            .unwrap();
        assert!(snap.is_empty());
    }

    #[test]
    fn three_past_two_future() {
        let n = key(VarType::ssh(), "alemoa");
        let ev = |t: i64| (n.clone(), t, vec![t as f64, 10.0 + t as f64, 0.5, -0.5]);
        let s = store(vec![ev(5), ev(60), ev(70), ev(80), ev(100), ev(120), ev(150)]);
        let snap = sample_snapshot(
            &s,
            100,
            WindowSpec::new(45, 30).unwrap(),
            TopologyMode::FullyConnected,
            &targets(&[VarType::ssh()]),
        )
        .unwrap();
        let ns = &snap.nodes[0];
        assert_eq!((ns.past_len(), ns.future_len()), (3, 2));
        assert_eq!(ns.past_offsets, vec![-40, -30, -20]);
        assert_eq!(ns.future_offsets, vec![0, 20]);
        assert_eq!(ns.x_past.row(0), &[60.0, 70.0, 0.5, -0.5]);
        assert_eq!(ns.x_future.row(1), &[130.0, 0.5, -0.5]);
        assert_eq!(ns.y.as_ref().unwrap().as_slice(), &[100.0, 120.0]);
    }

    #[test]
    fn node_without_future_events_is_present() {
        let w = key(VarType::wind(), "alemoa");
        let s = store(vec![(w, 10, vec![1.0, 2.0])]);
        let snap = sample_snapshot(&s, 20, WindowSpec::new(20, 20).unwrap(), TopologyMode::FullyConnected, &targets(&[]))
            .unwrap();
        assert_eq!(snap.nodes.len(), 1);
        assert_eq!(snap.nodes[0].future_len(), 0);
        assert_eq!(snap.nodes[0].x_future.shape(), (0, 0));
        assert!(snap.nodes[0].y.is_none());
    }

    #[test]
    fn labels_only_for_target_types() {
        let c = key(VarType::current(), "alemoa");
        let h = key(VarType::ssh(), "alemoa");
        let s = store(vec![
            (c.clone(), 0, vec![1.0, 2.0]),
            (c, 10, vec![3.0, 4.0]),
            (h.clone(), 0, vec![1.0, 1.0, 0.0, 1.0]),
            (h, 10, vec![2.0, 2.0, 0.0, 1.0]),
        ]);
        let snap = sample_snapshot(&s, 5, WindowSpec::new(10, 10).unwrap(), TopologyMode::FullyConnected, &targets(&[VarType::current()]))
            .unwrap();
        assert_eq!(snap.nodes[0].y.as_ref().unwrap().row(0), &[3.0, 4.0]);
        assert!(snap.nodes[1].y.is_none());
        assert_eq!(snap.edges, vec![(0, 1), (1, 0)]);
    }

    fn dense_store(days: i64) -> EventStore {
        let n = key(VarType::current(), "alemoa");
        store(
            (0..days * 48)
                .map(|i| (n.clone(), i * 1800, vec![i as f64, 0.0]))
                .collect(),
        )
    }

    fn params(count: usize, range: (i64, i64), window: WindowSpec) -> SamplingParams {
        SamplingParams {
            count,
            range,
            window,
            topology: TopologyMode::FullyConnected,
            targets: targets(&[VarType::current()]),
        }
    }

    #[test]
    fn single_snapshot_at_range_start() {
        let s = dense_store(3);
        let d = sample_dtdg(&s, params(1, (86_400, 2 * 86_400), WindowSpec::new(3600, 3600).unwrap())).unwrap();
        assert_eq!(d.snapshots.len(), 1);
        assert_eq!(d.snapshots[0].reference_time, 86_400);
    }

    #[test]
    fn ten_snapshots_over_ten_days_are_a_day_apart() {
        let s = dense_store(12);
        let d = sample_dtdg(&s, params(10, (86_400, 11 * 86_400), WindowSpec::new(3600, 3600).unwrap())).unwrap();
        assert_eq!(d.spacing, 86_400);
        let ts: Vec<i64> = d.snapshots.iter().map(|s| s.reference_time).collect();
        assert_eq!(ts, (1..11).map(|d| d * 86_400).collect::<Vec<_>>());
    }

    #[test]
    fn short_range_and_bad_count_are_errors() {
        let s = dense_store(1);
        let w = WindowSpec::new(3600, 3600).unwrap();
        assert!(sample_dtdg(&s, params(1, (0, 7000), w)).is_err());
        assert!(sample_dtdg(&s, params(0, (0, 8000), w)).is_err());
        assert!(WindowSpec::new(0, 10).is_err());
    }

    #[test]
    fn empty_snapshots_are_counted() {
        let s = dense_store(1);
        let d = sample_dtdg(&s, params(4, (0, 86_400), WindowSpec::new(3600, 3600).unwrap())).unwrap();
        assert_eq!(d.dropped_empty, vec![0]);
        assert_eq!(d.snapshots.len(), 3);
    }

    #[test]
    fn manifest_key_tracks_parameters() {
        let s = dense_store(3);
        let w = WindowSpec::new(3600, 3600).unwrap();
        let d = sample_dtdg(&s, params(5, (7200, 86_400), w)).unwrap();
        let m = d.manifest(&s.digest()).unwrap();
        assert_eq!(m.snapshots.len(), 5);
        let json = serde_json::to_string(&m).unwrap();
        let back: DatasetManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let other = cache_key(&s.digest(), &params(6, (7200, 86_400), w)).unwrap();
        assert_ne!(other, m.cache_key);
        assert_eq!(cache_key(&s.digest(), &d.params).unwrap(), m.cache_key);
    }

    #[test]
    fn seven_one_two_split() {
        let snaps: Vec<Snapshot> = (0..10).map(|i| bare(i * 100)).collect();
        let s = chronological_split(&snaps, WindowSpec::new(1, 1).unwrap(), SplitFractions::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert!(s.purged.is_empty());
    }

    #[test]
    fn boundary_gap_removes_overlapping_snapshots() {
        let snaps: Vec<Snapshot> = (0..100).map(|i| bare(i * 10)).collect();
        let w = WindowSpec::new(25, 15).unwrap();
        let s = chronological_split(&snaps, w, SplitFractions::default()).unwrap();
        assert!(!s.purged.is_empty());
        for a in &s.train {
            for b in s.val.iter().chain(&s.test) {
                // test past window [t - P, t) vs train future window [t', t' + F)
                let overlap = b.reference_time - w.past_len < a.reference_time + w.future_len
                    && a.reference_time < b.reference_time;
                assert!(!overlap);
            }
        }
    }

    #[test]
    fn split_rejects_bad_fractions_and_empty_parts() {
        let snaps: Vec<Snapshot> = (0..3).map(|i| bare(i * 100)).collect();
        let w = WindowSpec::new(1, 1).unwrap();
        let bad = SplitFractions { train: 0.5, val: 0.5, test: 0.5 };
        assert!(chronological_split(&snaps, w, bad).is_err());
        assert!(chronological_split(&snaps, w, SplitFractions::default()).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 10usize..80, gap in 1i64..50, p in 1i64..200, f in 1i64..200) {
            let snaps: Vec<Snapshot> = (0..n as i64).map(|i| bare(i * gap + (i * i) % 7)).collect();
            let w = WindowSpec::new(p, f).unwrap();
            if let Ok(s) = chronological_split(&snaps, w, SplitFractions::default()) {
                let mut all: Vec<i64> = s.train.iter().chain(&s.val).chain(&s.test).chain(&s.purged)
                    .map(|x| x.reference_time).collect();
                all.sort_unstable();
                let mut expect: Vec<i64> = snaps.iter().map(|x| x.reference_time).collect();
                expect.sort_unstable();
                prop_assert_eq!(all, expect);
                let tmax = s.train.iter().map(|x| x.reference_time).max().unwrap();
                prop_assert!(s.val.iter().all(|x| x.reference_time > tmax));
            }
        }

        #[test]
        fn larger_past_window_never_loses_rows(seed in 0u64..500, p in 1i64..300, extra in 0i64..300) {
            let mut rng = crate::ndiff::seeded_rng(seed);
            let nodes = [key(VarType::current(), "alemoa"), key(VarType::current(), "praticagem")];
            let mut evs = Vec::new();
            for n in &nodes {
                let mut t = 0;
                while t < 1000 {
                    t += rng.random_range(1..40);
                    evs.push((n.clone(), t, vec![rng.random(), rng.random()]));
                }
            }
            let s = store(evs);
            let tg = targets(&[VarType::current()]);
            let small = sample_snapshot(&s, 500, WindowSpec::new(p, 50).unwrap(), TopologyMode::FullyConnected, &tg).unwrap();
            let big = sample_snapshot(&s, 500, WindowSpec::new(p + extra, 50).unwrap(), TopologyMode::FullyConnected, &tg).unwrap();
            for ns in &small.nodes {
                let b = &big.nodes[big.position(&ns.node).unwrap()];
                prop_assert!(b.past_len() >= ns.past_len());
                let tail = &b.past_offsets[b.past_len() - ns.past_len()..];
                prop_assert_eq!(tail, ns.past_offsets.as_slice());
                // an event at exactly t is future, never past
                prop_assert!(ns.past_offsets.iter().all(|&o| o < 0));
                prop_assert!(ns.future_offsets.iter().all(|&o| o >= 0));
                prop_assert_eq!(ns.y.as_ref().unwrap().rows(), ns.future_len());
                prop_assert_eq!(ns.x_future.rows(), ns.future_len());
            }
            let again = sample_snapshot(&s, 500, WindowSpec::new(p, 50).unwrap(), TopologyMode::FullyConnected, &tg).unwrap();
            prop_assert_eq!(again, small);
        }
    }

    #[test]
    fn normalizing_snapshots_matches_sampling_a_normalized_store() {
        let mut rng = crate::ndiff::seeded_rng(11);
        let reg = registry();
        let mut events = Vec::new();
        for node in reg.nodes.clone() {
            let k = reg.spec(&node.var_type).unwrap().arity();
            for i in 0..120 {
                if rng.random::<f64>() < 0.3 {
                    continue;
                }
                events.push((node.clone(), i * 600, (0..k).map(|_| rng.random_range(-5.0..5.0)).collect()));
            }
        }
        let st = store(events);
        let stats = crate::events::fit_normalization(&st, 0, 40_000).unwrap();
        let normalized = st.normalized(&stats);
        let w = WindowSpec::new(6_000, 3_000).unwrap();
        let tg = targets(&[VarType::current(), VarType::ssh()]);
        for t in [10_000, 30_000, 55_000] {
            let raw = sample_snapshot(&st, t, w, TopologyMode::FullyConnected, &tg).unwrap();
            let direct = sample_snapshot(&normalized, t, w, TopologyMode::FullyConnected, &tg).unwrap();
            assert_eq!(normalize_snapshot(&raw, &stats, &reg).unwrap(), direct);
        }
    }
}
