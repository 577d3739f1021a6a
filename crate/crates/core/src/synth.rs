//! Synthetic estuary generator.
//!
//! Sea level is a sum of tidal constituents plus a wind-driven surge shared
//! by all stations (each sees it with its own lag). Currents follow the local
//! rate of change of sea level along a channel bearing, so sea level carries
//! real information about currents at every station.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::events::{write_csv, Event, NodeKey, Registry, VarType};
use crate::ndiff::seeded_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constituent {
    pub name: String,
    /// Metres.
    pub amplitude: f64,
    /// Hours.
    pub period_h: f64,
    /// Radians.
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub name: String,
    pub x_km: f64,
    pub y_km: f64,
    pub constituents: Vec<Constituent>,
    /// Delay, in samples, with which the shared surge reaches the station.
    pub surge_lag: usize,
    /// Current speed (m/s) per unit rate of sea-level change (m/h).
    pub current_gain: f64,
    /// Flood direction in degrees clockwise from north.
    pub channel_bearing_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindParams {
    pub mean_u: f64,
    pub mean_v: f64,
    /// AR(1) coefficient per sample.
    pub ar: f64,
    /// Stationary standard deviation of each component (m/s).
    pub std: f64,
    /// Extra independent noise per station (m/s).
    pub local_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeParams {
    pub ar: f64,
    pub noise_std: f64,
    /// Equilibrium surge (m) per m/s of northward wind.
    pub wind_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub stations: Vec<Station>,
    pub wind: WindParams,
    pub surge: SurgeParams,
    /// Measurement noise on observed sea level (m).
    pub ssh_noise: f64,
    /// Measurement noise on each current component (m/s).
    pub current_noise: f64,
    /// Fraction of samples removed per variable type.
    pub missing_rates: BTreeMap<VarType, f64>,
    /// Mean outage length in samples.
    pub burst_mean: f64,
    pub start: i64,
    pub period_s: i64,
    pub days: f64,
    pub seed: u64,
}

pub const DEFAULT_STATIONS: [&str; 6] = ["tiplam", "alemoa", "barnabe", "cpsp", "praticagem", "palmas"];

impl Default for WorldConfig {
    fn default() -> Self {
        let stations = DEFAULT_STATIONS
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let f = i as f64;
                Station {
                    name: name.to_string(),
                    x_km: 2.0 * f,
                    y_km: 1.5 * f - 0.2 * f * f,
                    constituents: vec![
                        Constituent {
                            name: "M2".into(),
                            amplitude: 0.55 - 0.03 * f,
                            period_h: 12.42,
                            phase: 0.15 * f,
                        },
                        Constituent {
                            name: "S2".into(),
                            amplitude: 0.2 - 0.01 * f,
                            period_h: 12.0,
                            phase: 0.8 + 0.12 * f,
                        },
                        Constituent {
                            name: "O1".into(),
                            amplitude: 0.1,
                            period_h: 25.82,
                            phase: 2.0 + 0.05 * f,
                        },
                    ],
                    surge_lag: i / 2,
                    current_gain: 1.2 + 0.15 * f,
                    channel_bearing_deg: 20.0 + 25.0 * f,
                }
            })
            .collect();
        WorldConfig {
            stations,
            wind: WindParams {
                mean_u: 1.0,
                mean_v: 0.5,
                ar: 0.98,
                std: 4.0,
                local_noise: 0.5,
            },
            surge: SurgeParams {
                ar: 0.97,
                noise_std: 0.005,
                wind_gain: 0.05,
            },
            ssh_noise: 0.02,
            current_noise: 0.05,
            missing_rates: [
                (VarType::current(), 0.243),
                (VarType::ssh(), 0.421),
                (VarType::wind(), 0.841),
            ]
            .into(),
            burst_mean: 12.0,
            start: 1_546_300_800,
            period_s: 1800,
            days: 974.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stations.is_empty() {
            return bad("world needs at least one station".into());
        }
        if self.period_s <= 0 {
            return bad(format!("sample period must be positive, got {}", self.period_s));
        }
        if !(self.days > 0.0) {
            return bad(format!("duration must be positive, got {} days", self.days));
        }
        for (name, ar) in [("wind", self.wind.ar), ("surge", self.surge.ar)] {
            if !(ar > -1.0 && ar < 1.0) {
                return bad(format!("{name} AR coefficient {ar} outside (-1, 1)"));
            }
        }
        for (t, r) in &self.missing_rates {
            if !(0.0..1.0).contains(r) {
                return bad(format!("missing rate for {t} is {r}, expected [0, 1)"));
            }
        }
        if !(self.burst_mean >= 1.0) {
            return bad(format!("burst mean must be at least 1, got {}", self.burst_mean));
        }
        let noises = [
            self.wind.std,
            self.wind.local_noise,
            self.surge.noise_std,
            self.ssh_noise,
            self.current_noise,
        ];
        if noises.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise levels must be non-negative".into());
        }
        for s in &self.stations {
            for c in &s.constituents {
                if !(c.amplitude >= 0.0) || !(c.period_h > 0.0) || !c.phase.is_finite() {
                    return bad(format!("invalid constituent {} at {}", c.name, s.name));
                }
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        (self.days * 86_400.0 / self.period_s as f64).floor() as usize
    }

    pub fn registry(&self) -> Result<Registry> {
        let names: Vec<&str> = self.stations.iter().map(|s| s.name.as_str()).collect();
        Registry::estuary(&names, &[VarType::current(), VarType::ssh(), VarType::wind()])
    }
}

/// Astronomical tide at a station; depends on the timestamp only.
pub fn astronomical_tide(constituents: &[Constituent], t: i64) -> f64 {
    let hours = t as f64 / 3600.0;
    constituents
        .iter()
        .map(|c| c.amplitude * (2.0 * PI * hours / c.period_h + c.phase).cos())
        .sum()
}

pub fn time_of_day(t: i64) -> (f64, f64) {
    let a = 2.0 * PI * t.rem_euclid(86_400) as f64 / 86_400.0;
    (a.sin(), a.cos())
}

/// Keep-mask for `n` slots with about `rate · n` slots removed in outages of
/// geometric length (mean `burst_mean`). The removed count is exact.
pub fn inject_missingness(n: usize, rate: f64, burst_mean: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("missing rate {rate} outside [0, 1)")));
    }
    if !(burst_mean >= 1.0) {
        return Err(Error::Config(format!("burst mean {burst_mean} below 1")));
    }
    let mut keep = vec![true; n];
    let target = (rate * n as f64).round() as usize;
    if target == 0 {
        return Ok(keep);
    }
    let mut rng = seeded_rng(seed);
    let extra = Geometric::new(1.0 / burst_mean).map_err(|e| Error::Config(e.to_string()))?;
    let mut removed = 0;
    while removed < target {
        let len = 1 + extra.sample(&mut rng) as usize;
        let start = rng.random_range(0..n);
        for slot in keep.iter_mut().skip(start).take(len) {
            if removed == target {
                break;
            }
            if *slot {
                *slot = false;
                removed += 1;
            }
        }
    }
    Ok(keep)
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub registry: Registry,
    /// Observed events after outages, time-major.
    pub events: Vec<Event>,
    /// Gap-free events, time-major.
    pub truth: Vec<Event>,
    /// Emitted observed-event count per node.
    pub counts: BTreeMap<NodeKey, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrittenDataset {
    pub events: PathBuf,
    pub truth: PathBuf,
    pub world: PathBuf,
    pub registry: PathBuf,
    pub event_rows: usize,
    pub truth_rows: usize,
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))
}

pub fn generate(world: &WorldConfig) -> Result<SynthOutput> {
    world.validate()?;
    let registry = world.registry()?;
    let n = world.slots();
    let mut rng = seeded_rng(world.seed);
    let times: Vec<i64> = (0..n).map(|k| world.start + k as i64 * world.period_s).collect();

    let wind_noise = normal(world.wind.std * (1.0 - world.wind.ar * world.wind.ar).sqrt())?;
    let mut wind = Vec::with_capacity(n);
    let (mut du, mut dv) = (wind_noise.sample(&mut rng), wind_noise.sample(&mut rng));
    for _ in 0..n {
        wind.push((world.wind.mean_u + du, world.wind.mean_v + dv));
        du = world.wind.ar * du + wind_noise.sample(&mut rng);
        dv = world.wind.ar * dv + wind_noise.sample(&mut rng);
    }

    let surge_noise = normal(world.surge.noise_std)?;
    let mut surge = Vec::with_capacity(n);
    let mut s = world.surge.wind_gain * world.wind.mean_v;
    for &(_, v) in &wind {
        s = world.surge.ar * s + (1.0 - world.surge.ar) * world.surge.wind_gain * v + surge_noise.sample(&mut rng);
        surge.push(s);
    }

    let hours_per_slot = world.period_s as f64 / 3600.0;
    let local_wind = normal(world.wind.local_noise)?;
    let ssh_noise = normal(world.ssh_noise)?;
    let cur_noise = normal(world.current_noise)?;

    // Per node, one feature row per slot.
    let mut series: BTreeMap<NodeKey, Vec<Vec<f64>>> = BTreeMap::new();
    for st in &world.stations {
        let tide: Vec<f64> = times.iter().map(|&t| astronomical_tide(&st.constituents, t)).collect();
        let level: Vec<f64> = (0..n)
            .map(|k| tide[k] + surge[k.saturating_sub(st.surge_lag)])
            .collect();
        let ssh = times
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let (sin, cos) = time_of_day(t);
                vec![level[k] + ssh_noise.sample(&mut rng), tide[k], sin, cos]
            })
            .collect();
        let bearing = st.channel_bearing_deg.to_radians();
        let current = (0..n)
            .map(|k| {
                let rate = slope(&level, k) / hours_per_slot;
                let along = st.current_gain * rate;
                vec![
                    along * bearing.sin() + cur_noise.sample(&mut rng),
                    along * bearing.cos() + cur_noise.sample(&mut rng),
                ]
            })
            .collect();
        let w = wind
            .iter()
            .map(|&(u, v)| vec![u + local_wind.sample(&mut rng), v + local_wind.sample(&mut rng)])
            .collect();
        series.insert(NodeKey::new(VarType::ssh(), &st.name), ssh);
        series.insert(NodeKey::new(VarType::current(), &st.name), current);
        series.insert(NodeKey::new(VarType::wind(), &st.name), w);
    }

    let mut masks = BTreeMap::new();
    for (i, node) in series.keys().enumerate() {
        let rate = world.missing_rates.get(&node.var_type).copied().unwrap_or(0.0);
        let seed = world.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
        masks.insert(node.clone(), inject_missingness(n, rate, world.burst_mean, seed)?);
    }

    let mut events = Vec::new();
    let mut truth = Vec::with_capacity(n * series.len());
    let mut counts: BTreeMap<NodeKey, usize> = series.keys().map(|k| (k.clone(), 0)).collect();
    for (k, &t) in times.iter().enumerate() {
        for (node, rows) in &series {
            let ev = Event {
                node: node.clone(),
                timestamp: t,
                features: rows[k].clone(),
            };
            if masks[node][k] {
                events.push(ev.clone());
                *counts.get_mut(node).expect("node registered") += 1;
            }
            truth.push(ev);
        }
    }
    Ok(SynthOutput {
        registry,
        events,
        truth,
        counts,
    })
}

fn slope(x: &[f64], k: usize) -> f64 {
    match x.len() {
        0 | 1 => 0.0,
        _ if k == 0 => x[1] - x[0],
        n if k == n - 1 => x[n - 1] - x[n - 2],
        _ => (x[k + 1] - x[k - 1]) / 2.0,
    }
}

/// Writes `events.csv`, `events_truth.csv`, `world.json` and
/// `registry.json` into `dir`.
pub fn write_dataset(dir: &Path, world: &WorldConfig, out: &SynthOutput) -> Result<WrittenDataset> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = WrittenDataset {
        events: dir.join("events.csv"),
        truth: dir.join("events_truth.csv"),
        world: dir.join("world.json"),
        registry: dir.join("registry.json"),
        event_rows: 0,
        truth_rows: 0,
    };
    let create = |p: &Path| {
        std::fs::File::create(p)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    let event_rows = write_csv(create(&paths.events)?, &out.registry, out.events.iter().cloned())?;
    let truth_rows = write_csv(create(&paths.truth)?, &out.registry, out.truth.iter().cloned())?;
    let world_json = serde_json::to_string_pretty(world)?;
    std::fs::write(&paths.world, world_json).map_err(|e| Error::io(&paths.world, e))?;
    std::fs::write(&paths.registry, out.registry.to_json()?).map_err(|e| Error::io(&paths.registry, e))?;
    Ok(WrittenDataset {
        event_rows,
        truth_rows,
        ..paths
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{missingness_report, EventStore};

    fn small(days: f64) -> WorldConfig {
        WorldConfig {
            days,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn zero_forcing_gives_flat_sea() {
        let mut w = small(3.0);
        for s in &mut w.stations {
            for c in &mut s.constituents {
                c.amplitude = 0.0;
            }
        }
        w.surge.wind_gain = 0.0;
        w.surge.noise_std = 0.0;
        w.ssh_noise = 0.0;
        let out = generate(&w).unwrap();
        let ssh: Vec<&Event> = out.truth.iter().filter(|e| e.node.var_type == VarType::ssh()).collect();
        assert_eq!(ssh.len(), 6 * 144);
        assert!(ssh.iter().all(|e| e.features[0] == 0.0 && e.features[1] == 0.0));
    }

    #[test]
    fn single_constituent_period_and_extrema() {
        let mut w = small(30.0);
        w.stations.truncate(1);
        w.stations[0].constituents = vec![Constituent {
            name: "M2".into(),
            amplitude: 1.0,
            period_h: 12.42,
            phase: 0.3,
        }];
        w.surge.wind_gain = 0.0;
        w.surge.noise_std = 0.0;
        w.ssh_noise = 0.0;
        let out = generate(&w).unwrap();
        let h: Vec<f64> = out
            .truth
            .iter()
            .filter(|e| e.node.var_type == VarType::ssh())
            .map(|e| e.features[0])
            .collect();
        let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = h.iter().cloned().fold(f64::INFINITY, f64::min);
        // sampling every 30 min can miss the crest by at most 1 - cos(pi/24.84)
        assert!(max <= 1.0 && max > 0.99, "{max}");
        assert!(min >= -1.0 && min < -0.99, "{min}");
        let peaks: Vec<usize> = (1..h.len() - 1).filter(|&k| h[k] > h[k - 1] && h[k] >= h[k + 1]).collect();
        let period_slots = (peaks[peaks.len() - 1] - peaks[0]) as f64 / (peaks.len() - 1) as f64;
        assert!((period_slots - 12.42 * 2.0).abs() <= 1.0, "{period_slots}");
        for w in peaks.windows(2) {
            assert!(((w[1] - w[0]) as f64 - 24.84).abs() <= 1.0);
        }
    }

    #[test]
    fn missingness_contract() {
        assert_eq!(inject_missingness(100, 0.0, 5.0, 1).unwrap(), vec![true; 100]);
        let a = inject_missingness(10_000, 0.5, 12.0, 7).unwrap();
        let frac = a.iter().filter(|k| !**k).count() as f64 / 1e4;
        assert!((0.47..=0.53).contains(&frac));
        assert_eq!(a, inject_missingness(10_000, 0.5, 12.0, 7).unwrap());
        assert_ne!(a, inject_missingness(10_000, 0.5, 12.0, 8).unwrap());
        // outages are bursty: far fewer transitions than independent dropout would give
        let transitions = a.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(transitions < 2_000, "{transitions}");
        assert!(inject_missingness(10, 1.0, 2.0, 1).is_err());
        assert!(inject_missingness(10, 0.2, 0.5, 1).is_err());
    }

    #[test]
    fn realized_rates_over_full_record() {
        let w = WorldConfig::default();
        let out = generate(&w).unwrap();
        let (store, report) = EventStore::from_events(out.registry.clone(), out.events.iter().cloned().map(|e| (0, e)));
        assert!(report.rejected.is_empty());
        assert_eq!(report.accepted, out.counts.values().sum::<usize>());
        let miss = missingness_report(&store, w.period_s).unwrap();
        for (node, m) in miss {
            let target = w.missing_rates[&node.var_type];
            let f = m.fraction.unwrap();
            assert!((f - target).abs() <= 0.02, "{node}: {f} vs {target}");
        }
    }

    #[test]
    fn observed_events_match_truth() {
        let out = generate(&small(20.0)).unwrap();
        let truth: BTreeMap<(NodeKey, i64), &Vec<f64>> = out
            .truth
            .iter()
            .map(|e| ((e.node.clone(), e.timestamp), &e.features))
            .collect();
        for e in &out.events {
            assert_eq!(truth[&(e.node.clone(), e.timestamp)], &e.features);
        }
    }

    #[test]
    fn astro_column_depends_on_time_only() {
        let a = generate(&WorldConfig { seed: 1, ..small(5.0) }).unwrap();
        let b = generate(&WorldConfig { seed: 2, ..small(5.0) }).unwrap();
        let w = WorldConfig::default();
        for (x, y) in a.truth.iter().zip(&b.truth) {
            if x.node.var_type == VarType::ssh() {
                assert_eq!(x.features[1..], y.features[1..]);
                let st = w.stations.iter().find(|s| s.name == x.node.location).unwrap();
                assert_eq!(x.features[1], astronomical_tide(&st.constituents, x.timestamp));
            }
        }
        assert_ne!(a.events, b.events);
    }

    #[test]
    fn current_speed_tracks_sea_level_gradient() {
        let out = generate(&small(60.0)).unwrap();
        for st in DEFAULT_STATIONS {
            let pick = |t: VarType| -> Vec<Vec<f64>> {
                out.truth
                    .iter()
                    .filter(|e| e.node.var_type == t && e.node.location == st)
                    .map(|e| e.features.clone())
                    .collect()
            };
            let ssh = pick(VarType::ssh());
            let cur = pick(VarType::current());
            // independent OLS of speed on |one-step-lagged height difference|
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for k in 1..ssh.len() {
                xs.push((ssh[k][0] - ssh[k - 1][0]).abs());
                ys.push(cur[k][0].hypot(cur[k][1]));
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
            let r2 = sxy * sxy / (sxx * syy);
            assert!(r2 > 0.5, "{st}: R^2 = {r2}");
        }
    }

    #[test]
    fn deterministic_files() {
        let dir = tempfile::tempdir().unwrap();
        let w = small(2.0);
        let out = generate(&w).unwrap();
        let a = write_dataset(&dir.path().join("a"), &w, &out).unwrap();
        let b = write_dataset(&dir.path().join("b"), &w, &generate(&w).unwrap()).unwrap();
        assert_eq!(a.truth_rows, 18 * 96);
        assert_eq!(a.event_rows, out.events.len());
        for (x, y) in [(&a.events, &b.events), (&a.truth, &b.truth), (&a.world, &b.world)] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let back: WorldConfig = serde_json::from_str(&std::fs::read_to_string(&a.world).unwrap()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn rejects_invalid_worlds() {
        let mut w = small(1.0);
        w.surge.ar = 1.0;
        assert!(generate(&w).is_err());
        let mut w = small(1.0);
        w.stations[0].constituents[0].amplitude = -1.0;
        assert!(generate(&w).is_err());
        let mut w = small(1.0);
        w.missing_rates.insert(VarType::ssh(), 1.0);
        assert!(generate(&w).is_err());
        assert!(generate(&WorldConfig { period_s: 0, ..small(1.0) }).is_err());
    }
}
