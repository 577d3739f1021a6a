//! Continuous-time event store: ingestion, validation, z-score statistics and
//! half-open time-range queries over raw sensor observations.
//!
//! Missing observations are represented by absent events. The store never
//! aggregates or imputes; it only sorts, validates and slices.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoders::DecoderKind;
use crate::error::{Error, Result};

/// Variable type of a node (`current`, `ssh`, `wind`, ...). String keyed so
/// registries can declare new types without code changes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VarType(String);

impl VarType {
    pub fn new(name: impl Into<String>) -> Self {
        VarType(name.into().to_ascii_lowercase())
    }

    pub fn current() -> Self {
        VarType::new("current")
    }

    pub fn ssh() -> Self {
        VarType::new("ssh")
    }

    pub fn wind() -> Self {
        VarType::new("wind")
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `(type, location)` identity of a node. Ordering is lexicographic by type
/// then location, which fixes node order in every snapshot.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeKey {
    pub var_type: VarType,
    pub location: String,
}

impl NodeKey {
    pub fn new(var_type: VarType, location: impl Into<String>) -> Self {
        Self {
            var_type,
            location: location.into(),
        }
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.var_type, self.location)
    }
}

/// Column layout of one variable type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeSpec {
    pub name: VarType,
    /// Feature column names in CSV order; `k_type = columns.len()`.
    pub columns: Vec<String>,
    /// Indices of label columns; `l_type = labels.len()`.
    #[serde(default)]
    pub labels: Vec<usize>,
    /// Indices of columns whose future values are known at forecast time.
    #[serde(default)]
    pub known_future: Vec<usize>,
    #[serde(default)]
    pub decoder: Option<DecoderKind>,
}

impl TypeSpec {
    pub fn arity(&self) -> usize {
        self.columns.len()
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    fn validate(&self) -> Result<()> {
        let k = self.arity();
        let bad = |m: String| Err(Error::Config(format!("type `{}`: {m}", self.name)));
        if k == 0 {
            return bad("needs at least one feature column".into());
        }
        let labels: BTreeSet<_> = self.labels.iter().collect();
        let future: BTreeSet<_> = self.known_future.iter().collect();
        if labels.len() != self.labels.len() || future.len() != self.known_future.len() {
            return bad("duplicate column index".into());
        }
        if let Some(i) = self.labels.iter().chain(&self.known_future).find(|&&i| i >= k) {
            return bad(format!("column index {i} out of range for {k} columns"));
        }
        if labels.intersection(&future).next().is_some() {
            return bad("a label column cannot be known in the future".into());
        }
        if self.decoder.is_some() && self.labels.is_empty() {
            return bad("a decoder needs at least one label column".into());
        }
        Ok(())
    }
}

/// Declares the variable types and the nodes that may appear in a store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub types: Vec<TypeSpec>,
    pub nodes: Vec<NodeKey>,
}

impl Registry {
    pub fn new(types: Vec<TypeSpec>, nodes: Vec<NodeKey>) -> Result<Self> {
        let r = Registry { types, nodes };
        r.validate()?;
        Ok(r)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Registry = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for t in &self.types {
            t.validate()?;
            if !names.insert(&t.name) {
                return Err(Error::Config(format!("type `{}` declared twice", t.name)));
            }
        }
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !names.contains(&n.var_type) {
                return Err(Error::UnknownType(n.var_type.to_string()));
            }
            if !seen.insert(n) {
                return Err(Error::Config(format!("node {n} declared twice")));
            }
        }
        Ok(())
    }

    pub fn spec(&self, var_type: &VarType) -> Option<&TypeSpec> {
        self.types.iter().find(|t| &t.name == var_type)
    }

    pub fn require_spec(&self, var_type: &VarType) -> Result<&TypeSpec> {
        self.spec(var_type)
            .ok_or_else(|| Error::UnknownType(var_type.to_string()))
    }

    pub fn contains(&self, node: &NodeKey) -> bool {
        self.nodes.contains(node)
    }

    /// Widest feature arity; the CSV header carries this many feature columns.
    pub fn max_arity(&self) -> usize {
        self.types.iter().map(TypeSpec::arity).max().unwrap_or(0)
    }

    /// The default three-type layout used by the synthetic estuary.
    pub fn estuary(stations: &[&str], types: &[VarType]) -> Result<Self> {
        let all = [
            TypeSpec {
                name: VarType::current(),
                columns: vec!["u_east".into(), "v_north".into()],
                labels: vec![0, 1],
                known_future: vec![],
                decoder: Some(DecoderKind::Fixed),
            },
            TypeSpec {
                name: VarType::ssh(),
                columns: vec![
                    "height".into(),
                    "astro_tide".into(),
                    "sin_tod".into(),
                    "cos_tod".into(),
                ],
                labels: vec![0],
                known_future: vec![1, 2, 3],
                decoder: Some(DecoderKind::Dynamic),
            },
            TypeSpec {
                name: VarType::wind(),
                columns: vec!["u_east".into(), "v_north".into()],
                labels: vec![],
                known_future: vec![],
                decoder: None,
            },
        ];
        let specs: Vec<TypeSpec> = all.into_iter().filter(|t| types.contains(&t.name)).collect();
        let mut nodes = Vec::new();
        for t in &specs {
            for s in stations {
                nodes.push(NodeKey::new(t.name.clone(), *s));
            }
        }
        Registry::new(specs, nodes)
    }
}

/// One timestamped observation at a node.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub node: NodeKey,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub features: Vec<f64>,
}

/// Time-sorted observations of one node. Values are row-major with
/// `arity` columns per event.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeSeries {
    timestamps: Vec<i64>,
    values: Vec<f64>,
    arity: usize,
}

impl NodeSeries {
    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.arity..(i + 1) * self.arity]
    }

    /// Index range of events with `a <= timestamp < b`.
    pub fn range(&self, a: i64, b: i64) -> std::ops::Range<usize> {
        let lo = self.timestamps.partition_point(|&t| t < a);
        let hi = self.timestamps.partition_point(|&t| t < b);
        lo..hi.max(lo)
    }
}

/// A borrowed, time-ordered run of events from one node.
#[derive(Debug, Clone, Copy)]
pub struct EventWindow<'a> {
    pub timestamps: &'a [i64],
    values: &'a [f64],
    arity: usize,
}

impl<'a> EventWindow<'a> {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.values[i * self.arity..(i + 1) * self.arity]
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &'a [f64])> + '_ {
        (0..self.len()).map(move |i| (self.timestamps[i], self.row(i)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    /// 1-based line in the source file (0 for in-memory input).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<RejectedRow>,
}

/// Immutable, validated collection of events keyed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStore {
    registry: Registry,
    series: BTreeMap<NodeKey, NodeSeries>,
}

impl EventStore {
    pub fn empty(registry: Registry) -> Self {
        Self {
            registry,
            series: BTreeMap::new(),
        }
    }

    /// Validates and sorts events. Invalid events are reported, not fatal;
    /// a repeated `(node, timestamp)` keeps the first occurrence.
    pub fn from_events(
        registry: Registry,
        events: impl IntoIterator<Item = (u64, Event)>,
    ) -> (Self, IngestReport) {
        let mut report = IngestReport::default();
        let mut staged: BTreeMap<NodeKey, BTreeMap<i64, Vec<f64>>> = BTreeMap::new();
        for (line, ev) in events {
            match check_event(&registry, &ev) {
                Err(reason) => report.rejected.push(RejectedRow { line, reason }),
                Ok(()) => {
                    let rows = staged.entry(ev.node.clone()).or_default();
                    if rows.contains_key(&ev.timestamp) {
                        report.rejected.push(RejectedRow {
                            line,
                            reason: format!(
                                "duplicate timestamp {} for node {}",
                                ev.timestamp, ev.node
                            ),
                        });
                    } else {
                        rows.insert(ev.timestamp, ev.features);
                        report.accepted += 1;
                    }
                }
            }
        }
        let series = staged
            .into_iter()
            .map(|(node, rows)| {
                let arity = registry.spec(&node.var_type).map_or(0, TypeSpec::arity);
                let mut s = NodeSeries {
                    timestamps: Vec::with_capacity(rows.len()),
                    values: Vec::with_capacity(rows.len() * arity),
                    arity,
                };
                for (t, f) in rows {
                    s.timestamps.push(t);
                    s.values.extend(f);
                }
                (node, s)
            })
            .collect();
        (Self { registry, series }, report)
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeKey> {
        self.series.keys()
    }

    pub fn series(&self, node: &NodeKey) -> Option<&NodeSeries> {
        self.series.get(node)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeKey, &NodeSeries)> {
        self.series.iter()
    }

    pub fn len(&self) -> usize {
        self.series.values().map(NodeSeries::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Earliest and latest timestamps over all nodes.
    pub fn span(&self) -> Option<(i64, i64)> {
        let first = self.series.values().filter_map(|s| s.timestamps.first()).min()?;
        let last = self.series.values().filter_map(|s| s.timestamps.last()).max()?;
        Some((*first, *last))
    }

    /// Events of `node` with `a <= timestamp < b`, in time order.
    pub fn query_window(&self, node: &NodeKey, a: i64, b: i64) -> EventWindow<'_> {
        match self.series.get(node) {
            Some(s) if a < b => {
                let r = s.range(a, b);
                EventWindow {
                    timestamps: &s.timestamps[r.clone()],
                    values: &s.values[r.start * s.arity..r.end * s.arity],
                    arity: s.arity,
                }
            }
            _ => EventWindow {
                timestamps: &[],
                values: &[],
                arity: 0,
            },
        }
    }

    /// Store containing only nodes of the given types.
    pub fn restrict_types(&self, types: &BTreeSet<VarType>) -> EventStore {
        EventStore {
            registry: self.registry.clone(),
            series: self
                .series
                .iter()
                .filter(|(k, _)| types.contains(&k.var_type))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Store with every value z-scored by `stats`.
    pub fn normalized(&self, stats: &NormStats) -> EventStore {
        self.map_values(|node, col, x| stats.normalize(node, col, x))
    }

    pub fn denormalized(&self, stats: &NormStats) -> EventStore {
        self.map_values(|node, col, x| stats.denormalize(node, col, x))
    }

    fn map_values(&self, f: impl Fn(&NodeKey, usize, f64) -> f64) -> EventStore {
        let series = self
            .series
            .iter()
            .map(|(node, s)| {
                let values = s
                    .values
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(node, i % s.arity, x))
                    .collect();
                (
                    node.clone(),
                    NodeSeries {
                        timestamps: s.timestamps.clone(),
                        values,
                        arity: s.arity,
                    },
                )
            })
            .collect();
        EventStore {
            registry: self.registry.clone(),
            series,
        }
    }

    /// SHA-256 over the canonical content (node order, timestamps, value bits).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (node, s) in &self.series {
            h.update(node.var_type.as_str().as_bytes());
            h.update([0u8]);
            h.update(node.location.as_bytes());
            h.update([0u8]);
            h.update((s.len() as u64).to_le_bytes());
            for t in &s.timestamps {
                h.update(t.to_le_bytes());
            }
            for v in &s.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_event(registry: &Registry, ev: &Event) -> std::result::Result<(), String> {
    let spec = registry
        .spec(&ev.node.var_type)
        .ok_or_else(|| format!("unknown variable type `{}`", ev.node.var_type))?;
    if !registry.contains(&ev.node) {
        return Err(format!("unknown node {}", ev.node));
    }
    if ev.features.len() != spec.arity() {
        return Err(format!(
            "node {} expects {} features, got {}",
            ev.node,
            spec.arity(),
            ev.features.len()
        ));
    }
    if let Some(i) = ev.features.iter().position(|v| !v.is_finite()) {
        return Err(format!("feature f{} is not finite", i + 1));
    }
    Ok(())
}

/// CSV header for a registry: `timestamp,var_type,location,f1,...,fK`.
pub fn csv_header(registry: &Registry) -> Vec<String> {
    let mut h = vec!["timestamp".to_string(), "var_type".into(), "location".into()];
    h.extend((1..=registry.max_arity()).map(|i| format!("f{i}")));
    h
}

/// Reads an event CSV. Rows of narrower types leave trailing feature fields
/// empty. Header and I/O problems are errors; row problems are collected in
/// the report with their line numbers.
pub fn ingest_csv(path: &Path, registry: &Registry) -> Result<(EventStore, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, registry)
}

pub fn ingest_reader<R: std::io::Read>(
    reader: R,
    registry: &Registry,
) -> Result<(EventStore, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let expected = csv_header(registry);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != expected {
        return Err(Error::Row {
            line: 1,
            message: format!(
                "header `{}` does not match `{}`",
                header.join(","),
                expected.join(",")
            ),
        });
    }
    let mut parsed = Vec::new();
    let mut malformed = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        match parse_row(&rec) {
            Ok(ev) => parsed.push((line, ev)),
            Err(reason) => malformed.push(RejectedRow { line, reason }),
        }
    }
    let (store, mut report) = EventStore::from_events(registry.clone(), parsed);
    report.rejected.extend(malformed);
    report.rejected.sort_by_key(|r| r.line);
    Ok((store, report))
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<Event, String> {
    if rec.len() < 4 {
        return Err(format!("expected at least 4 fields, found {}", rec.len()));
    }
    let timestamp: i64 = rec[0]
        .trim()
        .parse()
        .map_err(|_| format!("timestamp `{}` is not an integer", &rec[0]))?;
    let var_type = VarType::new(rec[1].trim());
    let location = rec[2].trim().to_string();
    let mut fields: Vec<&str> = rec.iter().skip(3).map(str::trim).collect();
    while fields.last() == Some(&"") {
        fields.pop();
    }
    let features = fields
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.parse::<f64>()
                .map_err(|_| format!("feature f{} `{f}` is not a number", i + 1))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Event {
        node: NodeKey::new(var_type, location),
        timestamp,
        features,
    })
}

/// Writes events in the CSV schema read by [`ingest_csv`].
pub fn write_csv<W: std::io::Write>(
    writer: W,
    registry: &Registry,
    events: impl IntoIterator<Item = Event>,
) -> Result<usize> {
    let mut w = csv::Writer::from_writer(writer);
    let header = csv_header(registry);
    let width = header.len();
    w.write_record(&header)?;
    let mut n = 0;
    for ev in events {
        let mut rec = vec![
            ev.timestamp.to_string(),
            ev.node.var_type.to_string(),
            ev.node.location.clone(),
        ];
        rec.extend(ev.features.iter().map(|v| format!("{v}")));
        rec.resize(width, String::new());
        w.write_record(&rec)?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnScaling {
    Scaled,
    /// Zero variance in the training range; values pass through unscaled.
    Constant,
    /// Fewer than two samples in the training range; values pass through.
    TooFewSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Population standard deviation (denominator `n`).
    pub std: f64,
    pub scaling: ColumnScaling,
}

impl ColumnStats {
    fn passthrough(&self) -> bool {
        self.scaling != ColumnScaling::Scaled
    }
}

/// Per `(node, column)` z-score statistics fitted on a training range.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormStats {
    pub range: (i64, i64),
    columns: BTreeMap<NodeKey, Vec<ColumnStats>>,
}

impl NormStats {
    pub fn column(&self, node: &NodeKey, col: usize) -> Option<&ColumnStats> {
        self.columns.get(node).and_then(|c| c.get(col))
    }

    pub fn normalize(&self, node: &NodeKey, col: usize, x: f64) -> f64 {
        match self.column(node, col) {
            Some(s) if !s.passthrough() => (x - s.mean) / s.std,
            _ => x,
        }
    }

    pub fn denormalize(&self, node: &NodeKey, col: usize, z: f64) -> f64 {
        match self.column(node, col) {
            Some(s) if !s.passthrough() => z * s.std + s.mean,
            _ => z,
        }
    }

    /// Nodes and columns that are passed through unscaled.
    pub fn flagged(&self) -> Vec<(NodeKey, usize, ColumnScaling)> {
        self.columns
            .iter()
            .flat_map(|(n, cols)| {
                cols.iter()
                    .enumerate()
                    .filter(|(_, c)| c.passthrough())
                    .map(move |(i, c)| (n.clone(), i, c.scaling))
            })
            .collect()
    }
}

/// Fits z-score statistics using only events with `t0 <= timestamp < t1`.
pub fn fit_normalization(store: &EventStore, t0: i64, t1: i64) -> Result<NormStats> {
    if t0 >= t1 {
        return Err(Error::EmptyRange(t0, t1));
    }
    let mut columns = BTreeMap::new();
    for node in store.nodes() {
        let w = store.query_window(node, t0, t1);
        let k = store.series(node).map_or(0, NodeSeries::arity);
        let n = w.len();
        let stats = (0..k)
            .map(|c| {
                if n < 2 {
                    return ColumnStats {
                        mean: 0.0,
                        std: 1.0,
                        scaling: ColumnScaling::TooFewSamples,
                    };
                }
                let mean = w.iter().map(|(_, r)| r[c]).sum::<f64>() / n as f64;
                let var = w.iter().map(|(_, r)| (r[c] - mean).powi(2)).sum::<f64>() / n as f64;
                let std = var.sqrt();
                let scaling = if std > 1e-12 * mean.abs().max(1.0) {
                    ColumnScaling::Scaled
                } else {
                    ColumnScaling::Constant
                };
                ColumnStats { mean, std, scaling }
            })
            .collect();
        columns.insert(node.clone(), stats);
    }
    Ok(NormStats {
        range: (t0, t1),
        columns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeMissingness {
    pub observed: usize,
    pub expected: usize,
    /// `None` when the node has fewer than two events.
    pub fraction: Option<f64>,
}

/// Fraction of expected slots with no event, over each node's own observed span.
pub fn missingness_report(
    store: &EventStore,
    expected_period: i64,
) -> Result<BTreeMap<NodeKey, NodeMissingness>> {
    if expected_period <= 0 {
        return Err(Error::Config("expected period must be positive".into()));
    }
    Ok(store
        .iter()
        .map(|(node, s)| {
            let observed = s.len();
            let entry = if observed < 2 {
                NodeMissingness {
                    observed,
                    expected: observed,
                    fraction: None,
                }
            } else {
                let span = s.timestamps[observed - 1] - s.timestamps[0];
                let expected = (span / expected_period) as usize + 1;
                let frac = (1.0 - observed as f64 / expected as f64).clamp(0.0, 1.0);
                NodeMissingness {
                    observed,
                    expected,
                    fraction: Some(frac),
                }
            };
            (node.clone(), entry)
        })
        .collect())
}
