//! Parametric ground-truth workload generator.
//!
//! [`sample_trace`] realises a [`WorkloadConfig`] with exact read/write and
//! per-device composition. Per-bin counts follow the requested index of
//! dispersion, and events are laid out so that no (op, device, bin) cell holds
//! more than one event whenever that is possible. This keeps the traces
//! losslessly representable by the presence raster.

use std::cmp::Reverse;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::trace::{bin_count, characterize, OpKind, Trace, TraceEvent, WorkloadConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub min: T,
    pub max: T,
}

impl<T> Interval<T> {
    pub const fn new(min: T, max: T) -> Self {
        Self { min, max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_traces: usize,
    pub device_count: usize,
    pub horizon_us: u64,
    pub bin_width_us: u64,
    pub read_ratio: Interval<f64>,
    pub total_requests: Interval<u64>,
    pub burstiness: Interval<f64>,
    /// Dirichlet concentration for device utilisation, drawn log-uniformly
    /// per trace.
    pub utilization_concentration: Interval<f64>,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, field: &str, why: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("{field}: {why}")))
            }
        }
        check(self.n_traces >= 1, "n_traces", "must be at least 1")?;
        check(self.device_count >= 1, "device_count", "must be at least 1")?;
        check(self.bin_width_us >= 1, "bin_width_us", "must be positive")?;
        check(
            self.horizon_us >= 2 * self.bin_width_us,
            "horizon_us",
            "must cover at least two bins",
        )?;
        let rr = self.read_ratio;
        check(rr.min <= rr.max, "read_ratio", "empty range")?;
        check(
            rr.min >= 0.0 && rr.max <= 1.0,
            "read_ratio",
            "must lie within [0, 1]",
        )?;
        check(
            self.total_requests.min <= self.total_requests.max,
            "total_requests",
            "empty range",
        )?;
        let b = self.burstiness;
        check(b.min <= b.max, "burstiness", "empty range")?;
        check(
            b.min >= 0.0 && b.max.is_finite(),
            "burstiness",
            "must be finite and >= 0",
        )?;
        let a = self.utilization_concentration;
        check(a.min <= a.max, "utilization_concentration", "empty range")?;
        check(
            a.min > 0.0 && a.max.is_finite(),
            "utilization_concentration",
            "must be finite and > 0",
        )?;
        Ok(())
    }

    pub fn bins(&self) -> usize {
        bin_count(self.horizon_us, self.bin_width_us)
    }
}

/// A sampled trace with the number of events that had to share an
/// (op, device, bin) cell with another event.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledTrace {
    pub trace: Trace,
    pub collisions: usize,
}

impl SampledTrace {
    /// Set when the trace cannot be rasterised without merging events.
    pub fn capacity_warning(&self) -> bool {
        self.collisions > 0
    }
}

/// Hamilton apportionment of `total` units by `shares`. Ties go to the
/// lower index.
pub fn largest_remainder(shares: &[f64], total: u64) -> Vec<u64> {
    if shares.is_empty() {
        return Vec::new();
    }
    let sum: f64 = shares.iter().sum();
    let mut floors = Vec::with_capacity(shares.len());
    let mut rems = Vec::with_capacity(shares.len());
    for &s in shares {
        let raw = if sum > 0.0 {
            s / sum * total as f64
        } else {
            0.0
        };
        let snapped = if (raw - raw.round()).abs() < 1e-6 {
            raw.round()
        } else {
            raw
        };
        let fl = snapped.floor();
        floors.push(fl as u64);
        rems.push(snapped - fl);
    }
    let assigned: u64 = floors.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| rems[b].total_cmp(&rems[a]).then(a.cmp(&b)));
    let mut left = total.saturating_sub(assigned);
    let mut i = 0;
    while left > 0 {
        floors[order[i % order.len()]] += 1;
        left -= 1;
        i += 1;
    }
    floors
}

fn sum_sq(counts: &[usize]) -> f64 {
    counts.iter().map(|&c| (c * c) as f64).sum()
}

/// Per-bin counts summing to `total`, each at most `cap`, with a dispersion
/// index close to `target`.
fn sample_bin_counts<R: Rng>(
    total: usize,
    bins: usize,
    cap: usize,
    target: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    if total == 0 {
        return counts;
    }
    let cap = cap.max(total.div_ceil(bins));
    let mean = total as f64 / bins as f64;

    if target <= 1.0 {
        // Mixture of an even spread and multinomial scatter; the scattered
        // fraction sets the dispersion.
        let scattered = ((target * total as f64).round() as usize).min(total);
        let regular = total - scattered;
        counts.iter_mut().for_each(|c| *c = regular / bins);
        let mut idx: Vec<usize> = (0..bins).collect();
        idx.shuffle(rng);
        for &b in idx.iter().take(regular % bins) {
            counts[b] += 1;
        }
        for _ in 0..scattered {
            counts[rng.random_range(0..bins)] += 1;
        }
    } else {
        // On/off bins: an active fraction p carrying rate mean/p gives a
        // dispersion index of 1 + mean (1 - p) / p.
        let p = (mean / (target - 1.0 + mean)).clamp(1.0 / bins as f64, 1.0);
        let active = ((p * bins as f64).round() as usize).clamp(1, bins);
        let mut idx: Vec<usize> = (0..bins).collect();
        idx.shuffle(rng);
        let on = &idx[..active];
        for _ in 0..total {
            counts[on[rng.random_range(0..active)]] += 1;
        }
    }

    // Spill overflow into bins with spare room.
    for b in 0..bins {
        while counts[b] > cap {
            let room: Vec<usize> = (0..bins).filter(|&j| counts[j] < cap).collect();
            let j = room[rng.random_range(0..room.len())];
            counts[b] -= 1;
            counts[j] += 1;
        }
    }

    refine_dispersion(&mut counts, cap, target, rng);
    counts
}

/// Moves single events between bins until the dispersion index is within
/// tolerance of `target`, or no sampled move improves it.
fn refine_dispersion<R: Rng>(counts: &mut [usize], cap: usize, target: f64, rng: &mut R) {
    let bins = counts.len();
    let total: usize = counts.iter().sum();
    if total == 0 || bins < 2 {
        return;
    }
    let k = bins as f64;
    let mean = total as f64 / k;
    // var = S/k - mean^2, fano = var / mean
    let goal = (target * mean + mean * mean) * k;
    let tol = if target >= 0.5 { 0.05 * target } else { 0.025 } * mean * k;
    let mut s = sum_sq(counts);
    for _ in 0..(20 * total + 100) {
        let err = s - goal;
        if err.abs() <= tol {
            break;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for _ in 0..32 {
            let i = rng.random_range(0..bins);
            let j = rng.random_range(0..bins);
            if i == j || counts[i] == 0 || counts[j] >= cap {
                continue;
            }
            let delta = 2.0 * (counts[j] as f64 - counts[i] as f64) + 2.0;
            let new_err = (err + delta).abs();
            if new_err < err.abs() && best.is_none_or(|(_, _, e)| new_err < e) {
                best = Some((i, j, new_err));
            }
        }
        if best.is_none() {
            // Random proposals found nothing; scan every move before giving up.
            for i in (0..bins).filter(|&i| counts[i] > 0) {
                for j in (0..bins).filter(|&j| j != i && counts[j] < cap) {
                    let new_err = (err + 2.0 * (counts[j] as f64 - counts[i] as f64) + 2.0).abs();
                    if new_err < err.abs() && best.is_none_or(|(_, _, e)| new_err < e) {
                        best = Some((i, j, new_err));
                    }
                }
            }
        }
        let Some((i, j, _)) = best else { break };
        s += 2.0 * (counts[j] as f64 - counts[i] as f64) + 2.0;
        counts[i] -= 1;
        counts[j] += 1;
    }
}

/// Places `kind_counts[k]` events of each (device, op) kind into distinct
/// bins whose occupancies are `bin_counts`, using Ryser's greedy
/// construction with random tie-breaking. Returns `(kind, bin)` pairs and
/// the number of events that had to share a cell.
fn assign_cells<R: Rng>(
    kind_counts: &[usize],
    bin_counts: &[usize],
    rng: &mut R,
) -> (Vec<(usize, usize)>, usize) {
    let mut remaining = bin_counts.to_vec();
    let mut kinds: Vec<usize> = (0..kind_counts.len())
        .filter(|&k| kind_counts[k] > 0)
        .collect();
    kinds.sort_by_key(|&k| Reverse(kind_counts[k]));
    let mut cells = Vec::with_capacity(kind_counts.iter().sum());
    let mut collisions = 0;
    let mut order: Vec<usize> = (0..bin_counts.len()).collect();
    for k in kinds {
        order.shuffle(rng);
        order.sort_by_key(|&b| Reverse(remaining[b]));
        let mut placed = 0;
        for &b in order.iter() {
            if placed == kind_counts[k] || remaining[b] == 0 {
                break;
            }
            remaining[b] -= 1;
            cells.push((k, b));
            placed += 1;
        }
        while placed < kind_counts[k] {
            let b = (0..remaining.len())
                .max_by_key(|&b| (remaining[b], Reverse(b)))
                .filter(|&b| remaining[b] > 0)
                .unwrap_or_else(|| rng.random_range(0..remaining.len()));
            remaining[b] = remaining[b].saturating_sub(1);
            cells.push((k, b));
            collisions += 1;
            placed += 1;
        }
    }
    (cells, collisions)
}

/// Samples a trace realising `config` exactly on read ratio, request count
/// and device utilisation, and approximately on burstiness.
pub fn sample_trace(
    config: &WorkloadConfig,
    device_count: usize,
    horizon_us: u64,
    bin_width_us: u64,
    seed: u64,
) -> Result<SampledTrace> {
    config.validate()?;
    if config.device_count() != device_count {
        return Err(Error::domain(format!(
            "config has {} devices, expected {device_count}",
            config.device_count()
        )));
    }
    if bin_width_us == 0 || horizon_us < 2 * bin_width_us {
        return Err(Error::domain("horizon must cover at least two bins"));
    }
    let total = config.total_requests;
    if total == 0 {
        return Ok(SampledTrace {
            trace: Trace::empty(device_count, horizon_us)?,
            collisions: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let reads = ((config.read_ratio * total as f64).round() as u64).min(total) as usize;
    let per_device = largest_remainder(&config.device_utilization, total);

    let mut ops: Vec<OpKind> = std::iter::repeat_n(OpKind::Read, reads)
        .chain(std::iter::repeat_n(OpKind::Write, total as usize - reads))
        .collect();
    ops.shuffle(&mut rng);
    // kind index = device * 2 + channel
    let mut kind_counts = vec![0usize; device_count * 2];
    let mut cursor = 0;
    for (d, &n) in per_device.iter().enumerate() {
        for op in &ops[cursor..cursor + n as usize] {
            kind_counts[d * 2 + op.channel()] += 1;
        }
        cursor += n as usize;
    }

    let bins = bin_count(horizon_us, bin_width_us);
    let bin_counts = sample_bin_counts(
        total as usize,
        bins,
        2 * device_count,
        config.burstiness,
        &mut rng,
    );
    let (cells, collisions) = assign_cells(&kind_counts, &bin_counts, &mut rng);

    let events = cells
        .into_iter()
        .map(|(kind, b)| {
            let start = b as u64 * bin_width_us;
            let end = if b + 1 == bins {
                horizon_us
            } else {
                start + bin_width_us
            };
            let op = OpKind::from_channel(kind % 2).expect("two channels");
            TraceEvent::new(rng.random_range(start..end), kind / 2, op)
        })
        .collect();
    Ok(SampledTrace {
        trace: Trace::new(events, device_count, horizon_us)?,
        collisions,
    })
}

/// A trace and its characterised configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPair {
    pub trace: Trace,
    pub config: WorkloadConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub pairs: Vec<CorpusPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub device_count: usize,
    pub horizon_us: u64,
    pub bin_width_us: u64,
    pub n_traces: usize,
    /// Largest request count in the corpus; normalises config vectors.
    pub request_scale: f64,
    pub seed: Option<u64>,
    pub spec: Option<CorpusSpec>,
    /// Configurations redrawn because their traces could not be laid out
    /// one event per cell.
    pub capacity_redraws: usize,
}

fn draw_config<R: Rng>(spec: &CorpusSpec, rng: &mut R) -> WorkloadConfig {
    let d = spec.device_count;
    let rr = rng.random_range(spec.read_ratio.min..=spec.read_ratio.max);
    let total = rng.random_range(spec.total_requests.min..=spec.total_requests.max);
    let burst = rng.random_range(spec.burstiness.min..=spec.burstiness.max);
    let (lo, hi) = (
        spec.utilization_concentration.min.ln(),
        spec.utilization_concentration.max.ln(),
    );
    let alpha = rng.random_range(lo..=hi).exp();
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut shares: Vec<f64> = (0..d).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = shares.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        shares.iter_mut().for_each(|s| *s /= sum);
    } else {
        shares = vec![0.0; d];
        shares[rng.random_range(0..d)] = 1.0;
    }
    realize(rr, total, &shares, burst)
}

/// Rounds a target onto an integer composition so that characterising a
/// trace built from it returns the same ratios bit for bit.
pub fn realize(read_ratio: f64, total: u64, shares: &[f64], burstiness: f64) -> WorkloadConfig {
    let d = shares.len();
    if total == 0 {
        return WorkloadConfig {
            read_ratio: 0.0,
            total_requests: 0,
            device_utilization: vec![0.0; d],
            burstiness,
        };
    }
    let reads = ((read_ratio * total as f64).round() as u64).min(total);
    let counts = largest_remainder(shares, total);
    WorkloadConfig {
        read_ratio: reads as f64 / total as f64,
        total_requests: total,
        device_utilization: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        burstiness,
    }
}

const MAX_REDRAWS: usize = 64;

/// Per-trace seed: the corpus seed xor the trace index.
pub fn trace_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

pub fn sample_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut pairs = Vec::with_capacity(spec.n_traces);
    let mut redraws = 0;
    for i in 0..spec.n_traces {
        let mut rng = ChaCha8Rng::seed_from_u64(trace_seed(spec.seed, i));
        let mut attempt = 0;
        let sampled = loop {
            let target = draw_config(spec, &mut rng);
            let s = sample_trace(
                &target,
                spec.device_count,
                spec.horizon_us,
                spec.bin_width_us,
                rng.next_u64(),
            )?;
            if !s.capacity_warning() || attempt == MAX_REDRAWS {
                if s.capacity_warning() {
                    log::warn!("trace {i}: {} events share raster cells", s.collisions);
                }
                break s;
            }
            attempt += 1;
            redraws += 1;
        };
        let config = characterize(&sampled.trace, spec.bin_width_us)?;
        pairs.push(CorpusPair {
            trace: sampled.trace,
            config,
        });
    }
    let request_scale = pairs
        .iter()
        .map(|p| p.config.total_requests)
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    Ok(Corpus {
        manifest: CorpusManifest {
            device_count: spec.device_count,
            horizon_us: spec.horizon_us,
            bin_width_us: spec.bin_width_us,
            n_traces: spec.n_traces,
            request_scale,
            seed: Some(spec.seed),
            spec: Some(spec.clone()),
            capacity_redraws: redraws,
        },
        pairs,
    })
}

pub const MANIFEST_FILE: &str = "corpus_manifest.json";

pub fn trace_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("trace_{index:05}.csv"))
}

pub fn config_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("config_{index:05}.json"))
}

impl Corpus {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, pair) in self.pairs.iter().enumerate() {
            pair.trace.write_file(&trace_path(dir, i))?;
            fsutil::write_json(&config_path(dir, i), &pair.config)?;
        }
        fsutil::write_json(&dir.join(MANIFEST_FILE), &self.manifest)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest: CorpusManifest = fsutil::read_json(&dir.join(MANIFEST_FILE))?;
        let mut pairs = Vec::with_capacity(manifest.n_traces);
        for i in 0..manifest.n_traces {
            let trace = Trace::read_file(
                &trace_path(dir, i),
                manifest.device_count,
                manifest.horizon_us,
            )?;
            let config: WorkloadConfig = fsutil::read_json(&config_path(dir, i))?;
            if config.device_count() != manifest.device_count {
                return Err(Error::domain(format!(
                    "{}: {} devices, manifest says {}",
                    config_path(dir, i).display(),
                    config.device_count(),
                    manifest.device_count
                )));
            }
            pairs.push(CorpusPair { trace, config });
        }
        Ok(Self { manifest, pairs })
    }

    /// Builds a corpus from existing traces, characterising each one.
    pub fn from_traces(traces: Vec<Trace>, bin_width_us: u64) -> Result<Self> {
        let first = traces
            .first()
            .ok_or_else(|| Error::domain("no traces to ingest"))?;
        let (d, horizon) = (first.device_count(), first.horizon_us());
        let mut pairs = Vec::with_capacity(traces.len());
        for t in traces {
            if t.device_count() != d || t.horizon_us() != horizon {
                return Err(Error::domain(
                    "ingested traces disagree on device count or horizon",
                ));
            }
            let config = characterize(&t, bin_width_us)?;
            pairs.push(CorpusPair { trace: t, config });
        }
        let request_scale = pairs
            .iter()
            .map(|p| p.config.total_requests)
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        Ok(Self {
            manifest: CorpusManifest {
                device_count: d,
                horizon_us: horizon,
                bin_width_us,
                n_traces: pairs.len(),
                request_scale,
                seed: None,
                spec: None,
                capacity_redraws: 0,
            },
            pairs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::fano_factor;

    fn config(rr: f64, total: u64, util: Vec<f64>, burst: f64) -> WorkloadConfig {
        WorkloadConfig {
            read_ratio: rr,
            total_requests: total,
            device_utilization: util,
            burstiness: burst,
        }
    }

    #[test]
    fn zero_requests_give_empty_trace() {
        let s = sample_trace(&config(0.0, 0, vec![0.0; 4], 0.0), 4, 64_000, 1000, 1).unwrap();
        assert!(s.trace.is_empty());
    }

    #[test]
    fn forced_read_composition() {
        let s = sample_trace(&config(1.0, 10, vec![0.25; 4], 1.0), 4, 64_000, 1000, 2).unwrap();
        assert_eq!(s.trace.len(), 10);
        assert!(s.trace.events().iter().all(|e| e.op == OpKind::Read));
    }

    #[test]
    fn forced_device_allocation() {
        let c = config(0.5, 8, vec![1.0, 0.0, 0.0, 0.0], 1.0);
        let s = sample_trace(&c, 4, 64_000, 1000, 3).unwrap();
        assert!(s.trace.events().iter().all(|e| e.device_id == 0));
        let got = characterize(&s.trace, 1000).unwrap();
        assert_eq!(got.device_utilization, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(
            largest_remainder(&[0.5, 0.25, 0.0, 0.25], 4),
            vec![2, 1, 0, 1]
        );
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.7, 0.3], 0), vec![0, 0]);
        let shares: Vec<f64> = [3u64, 7, 1, 9].iter().map(|&c| c as f64 / 20.0).collect();
        assert_eq!(largest_remainder(&shares, 20), vec![3, 7, 1, 9]);
    }

    #[test]
    fn bin_counts_keep_total_and_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &target in &[0.0, 0.3, 1.0, 2.5, 6.0] {
            let c = sample_bin_counts(180, 64, 16, target, &mut rng);
            assert_eq!(c.iter().sum::<usize>(), 180);
            assert!(c.iter().all(|&x| x <= 16));
        }
    }

    #[test]
    fn cells_are_distinct_when_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kinds = vec![5, 3, 3, 1];
        let bins = vec![4, 3, 2, 2, 1, 0];
        let (cells, collisions) = assign_cells(&kinds, &bins, &mut rng);
        assert_eq!(collisions, 0);
        assert_eq!(cells.len(), 12);
        let mut seen = std::collections::HashSet::new();
        for cell in &cells {
            assert!(seen.insert(*cell), "duplicate cell {cell:?}");
        }
        for (b, &n) in bins.iter().enumerate() {
            assert_eq!(cells.iter().filter(|c| c.1 == b).count(), n);
        }
    }

    #[test]
    fn overfull_kinds_raise_capacity_warning() {
        // 100 reads on one device cannot fit in 64 bins one per bin.
        let c = config(1.0, 100, vec![1.0, 0.0], 0.0);
        let s = sample_trace(&c, 2, 64_000, 1000, 5).unwrap();
        assert!(s.capacity_warning());
        assert_eq!(s.trace.len(), 100);
    }

    #[test]
    fn spec_validation_names_field() {
        let mut spec = small_spec();
        spec.read_ratio = Interval::new(0.9, 0.1);
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("read_ratio"), "{msg}");
        let mut spec = small_spec();
        spec.total_requests = Interval::new(10, 5);
        assert!(spec
            .validate()
            .unwrap_err()
            .to_string()
            .contains("total_requests"));
    }

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_traces: 20,
            device_count: 4,
            horizon_us: 32_000,
            bin_width_us: 1000,
            read_ratio: Interval::new(0.2, 0.8),
            total_requests: Interval::new(10, 60),
            burstiness: Interval::new(0.5, 3.0),
            utilization_concentration: Interval::new(0.5, 5.0),
            seed: 11,
        }
    }

    #[test]
    fn corpus_is_deterministic_and_exact() {
        let spec = small_spec();
        let a = sample_corpus(&spec).unwrap();
        let b = sample_corpus(&spec).unwrap();
        assert_eq!(a, b);
        for p in &a.pairs {
            let c = characterize(&p.trace, spec.bin_width_us).unwrap();
            assert_eq!(c, p.config);
        }
    }

    #[test]
    fn pinned_read_ratio_range() {
        let mut spec = small_spec();
        spec.read_ratio = Interval::new(0.8, 0.8);
        for p in sample_corpus(&spec).unwrap().pairs {
            let n = p.config.total_requests;
            let reads = (0.8 * n as f64).round() as u64;
            assert_eq!(p.config.read_ratio, reads as f64 / n as f64);
        }
    }

    #[test]
    fn corpus_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = sample_corpus(&small_spec()).unwrap();
        corpus.write_dir(dir.path()).unwrap();
        let back = Corpus::read_dir(dir.path()).unwrap();
        assert_eq!(back, corpus);
        assert!(dir.path().join("trace_00000.csv").exists());
        assert!(dir.path().join("config_00019.json").exists());
    }

    #[test]
    fn dispersion_refinement_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &target in &[0.5, 1.0, 2.0, 4.0] {
            let c = sample_bin_counts(120, 64, 16, target, &mut rng);
            let counts: Vec<u64> = c.iter().map(|&x| x as u64).collect();
            let f = fano_factor(&counts);
            assert!(
                (f - target).abs() <= 0.2 * target,
                "target {target}, got {f}"
            );
        }
    }
}
