//! Trace events, the CSV trace format and workload characterisation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Read,
    Write,
}

impl OpKind {
    pub const ALL: [OpKind; 2] = [OpKind::Read, OpKind::Write];

    /// Image channel carrying this operation.
    pub fn channel(self) -> usize {
        match self {
            OpKind::Read => 0,
            OpKind::Write => 1,
        }
    }

    pub fn from_channel(channel: usize) -> Option<Self> {
        match channel {
            0 => Some(OpKind::Read),
            1 => Some(OpKind::Write),
            _ => None,
        }
    }

    fn token(self) -> char {
        match self {
            OpKind::Read => 'R',
            OpKind::Write => 'W',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockRange {
    pub offset_blocks: u64,
    pub size_blocks: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub timestamp_us: u64,
    pub device_id: usize,
    pub op: OpKind,
    /// Carried through parsing and serialisation; never rasterised.
    pub extent: Option<BlockRange>,
}

impl TraceEvent {
    pub fn new(timestamp_us: u64, device_id: usize, op: OpKind) -> Self {
        Self {
            timestamp_us,
            device_id,
            op,
            extent: None,
        }
    }
}

/// Events over `device_count` devices within `[0, horizon_us)`, sorted by
/// timestamp. Equal timestamps keep their insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    events: Vec<TraceEvent>,
    device_count: usize,
    horizon_us: u64,
}

impl Trace {
    pub fn new(mut events: Vec<TraceEvent>, device_count: usize, horizon_us: u64) -> Result<Self> {
        if device_count == 0 {
            return Err(Error::domain("device_count must be at least 1"));
        }
        if horizon_us == 0 {
            return Err(Error::domain("horizon_us must be positive"));
        }
        for e in &events {
            if e.device_id >= device_count {
                return Err(Error::domain(format!(
                    "device {} out of range for {device_count} devices",
                    e.device_id
                )));
            }
            if e.timestamp_us >= horizon_us {
                return Err(Error::domain(format!(
                    "timestamp {} at or beyond horizon {horizon_us}",
                    e.timestamp_us
                )));
            }
            if let Some(r) = e.extent {
                if r.size_blocks == 0 {
                    return Err(Error::domain("size_blocks must be at least 1"));
                }
            }
        }
        events.sort_by_key(|e| e.timestamp_us);
        Ok(Self {
            events,
            device_count,
            horizon_us,
        })
    }

    pub fn empty(device_count: usize, horizon_us: u64) -> Result<Self> {
        Self::new(Vec::new(), device_count, horizon_us)
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn device_count(&self) -> usize {
        self.device_count
    }

    pub fn horizon_us(&self) -> u64 {
        self.horizon_us
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn read_file(path: &Path, device_count: usize, horizon_us: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_trace(&text, device_count, horizon_us)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, serialize_trace(self).as_bytes())
    }
}

fn parse_field(field: &str, line: usize, name: &str) -> Result<u64> {
    field.parse::<u64>().map_err(|_| Error::Parse {
        line,
        message: format!("{name} is not a non-negative integer: {field:?}"),
    })
}

/// Parses `timestamp_us,device_id,op[,offset_blocks,size_blocks]` rows.
pub fn parse_trace(text: &str, device_count: usize, horizon_us: u64) -> Result<Trace> {
    let mut events = Vec::new();
    for (idx, row) in text.split_terminator('\n').enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 && fields.len() != 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 or 5 fields, found {}", fields.len()),
            });
        }
        let timestamp_us = parse_field(fields[0], line, "timestamp_us")?;
        let device_id = parse_field(fields[1], line, "device_id")?;
        let op = match fields[2] {
            "R" => OpKind::Read,
            "W" => OpKind::Write,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown op token {other:?}"),
                })
            }
        };
        let extent = if fields.len() == 5 {
            Some(BlockRange {
                offset_blocks: parse_field(fields[3], line, "offset_blocks")?,
                size_blocks: parse_field(fields[4], line, "size_blocks")?,
            })
        } else {
            None
        };
        let device_id = usize::try_from(device_id)
            .map_err(|_| Error::domain(format!("line {line}: device {device_id} out of range")))?;
        events.push(TraceEvent {
            timestamp_us,
            device_id,
            op,
            extent,
        });
    }
    Trace::new(events, device_count, horizon_us)
}

pub fn serialize_trace(trace: &Trace) -> String {
    let mut out = String::with_capacity(trace.len() * 16);
    for e in trace.events() {
        write!(out, "{},{},{}", e.timestamp_us, e.device_id, e.op.token()).unwrap();
        if let Some(r) = e.extent {
            write!(out, ",{},{}", r.offset_blocks, r.size_blocks).unwrap();
        }
        out.push('\n');
    }
    out
}

/// User-facing workload description, also the conditioning target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub read_ratio: f64,
    pub total_requests: u64,
    pub device_utilization: Vec<f64>,
    /// Index of dispersion of per-bin event counts.
    pub burstiness: f64,
}

impl WorkloadConfig {
    pub fn device_count(&self) -> usize {
        self.device_utilization.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.read_ratio) {
            return Err(Error::config(format!(
                "read_ratio {} outside [0, 1]",
                self.read_ratio
            )));
        }
        if self.device_utilization.is_empty() {
            return Err(Error::config("device_utilization is empty"));
        }
        if self
            .device_utilization
            .iter()
            .any(|u| !u.is_finite() || *u < 0.0)
        {
            return Err(Error::config(
                "device_utilization entries must be finite and >= 0",
            ));
        }
        let sum: f64 = self.device_utilization.iter().sum();
        if self.total_requests > 0 && (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!(
                "device_utilization sums to {sum}, expected 1"
            )));
        }
        if !self.burstiness.is_finite() || self.burstiness < 0.0 {
            return Err(Error::config(format!(
                "burstiness {} must be >= 0",
                self.burstiness
            )));
        }
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok(cfg)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fsutil::write_atomic(path, text.as_bytes())
    }
}

/// Number of analysis bins for a horizon; the remainder joins the last bin.
pub fn bin_count(horizon_us: u64, bin_width_us: u64) -> usize {
    ((horizon_us / bin_width_us) as usize).max(1)
}

pub fn bin_index(timestamp_us: u64, bin_width_us: u64, bins: usize) -> usize {
    ((timestamp_us / bin_width_us) as usize).min(bins - 1)
}

/// Population variance over mean of the counts; 0 when the mean is 0.
pub fn fano_factor(counts: &[u64]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    var / mean
}

pub fn characterize(trace: &Trace, bin_width_us: u64) -> Result<WorkloadConfig> {
    if bin_width_us == 0 {
        return Err(Error::domain("bin_width_us must be positive"));
    }
    let d = trace.device_count();
    let total = trace.len() as u64;
    let reads = trace
        .events()
        .iter()
        .filter(|e| e.op == OpKind::Read)
        .count() as u64;
    let mut per_device = vec![0u64; d];
    let bins = bin_count(trace.horizon_us(), bin_width_us);
    let mut per_bin = vec![0u64; bins];
    for e in trace.events() {
        per_device[e.device_id] += 1;
        per_bin[bin_index(e.timestamp_us, bin_width_us, bins)] += 1;
    }
    let (read_ratio, device_utilization) = if total == 0 {
        (0.0, vec![0.0; d])
    } else {
        (
            reads as f64 / total as f64,
            per_device
                .iter()
                .map(|&c| c as f64 / total as f64)
                .collect(),
        )
    };
    Ok(WorkloadConfig {
        read_ratio,
        total_requests: total,
        device_utilization,
        burstiness: fano_factor(&per_bin),
    })
}

/// `[read_ratio, total/scale, b/(1+b), utilization...]`, length `D + 3`.
pub fn config_vector(config: &WorkloadConfig, request_scale: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(config.device_count() + 3);
    v.push(config.read_ratio);
    v.push(config.total_requests as f64 / request_scale);
    v.push(config.burstiness / (1.0 + config.burstiness));
    v.extend_from_slice(&config.device_utilization);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, d: usize, op: OpKind) -> TraceEvent {
        TraceEvent::new(t, d, op)
    }

    #[test]
    fn parses_rows_in_order() {
        let t = parse_trace("0,1,R\n500,0,W\n", 2, 1000).unwrap();
        assert_eq!(
            t.events(),
            &[ev(0, 1, OpKind::Read), ev(500, 0, OpKind::Write)]
        );
    }

    #[test]
    fn empty_stream_is_empty_trace() {
        let t = parse_trace("", 4, 1000).unwrap();
        assert!(t.is_empty());
        assert_eq!(serialize_trace(&t), "");
    }

    #[test]
    fn device_out_of_range_is_domain_error() {
        let err = parse_trace("10,7,R\n", 4, 1000).unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "{err}");
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        for (text, want) in [
            ("0,1,R\n1,2\n", 2),
            ("0,1,R\n5,0,R\nx,0,W\n", 3),
            ("3,1,Q\n", 1),
            ("0,1,R\n1,1,W,5\n", 2),
            ("-1,0,R\n", 1),
        ] {
            match parse_trace(text, 4, 1000) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn events_past_horizon_are_rejected() {
        assert!(matches!(
            parse_trace("1000,0,R\n", 1, 1000),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn unsorted_input_is_sorted_stably() {
        let t = parse_trace("9,0,R\n3,1,W\n3,0,R\n", 2, 10).unwrap();
        assert_eq!(
            t.events(),
            &[
                ev(3, 1, OpKind::Write),
                ev(3, 0, OpKind::Read),
                ev(9, 0, OpKind::Read)
            ]
        );
    }

    #[test]
    fn serialises_back_to_the_source_text() {
        let text = "0,1,R\n500,0,W\n";
        assert_eq!(serialize_trace(&parse_trace(text, 2, 1000).unwrap()), text);
        let with_extent = "4,0,W,1024,8\n";
        assert_eq!(
            serialize_trace(&parse_trace(with_extent, 1, 10).unwrap()),
            with_extent
        );
    }

    #[test]
    fn characterize_counts() {
        let ops = [OpKind::Read, OpKind::Read, OpKind::Read, OpKind::Write];
        let devs = [0, 0, 1, 3];
        let events = (0..4).map(|i| ev(i as u64 * 10, devs[i], ops[i])).collect();
        let trace = Trace::new(events, 4, 100).unwrap();
        let c = characterize(&trace, 10).unwrap();
        assert_eq!(c.read_ratio, 0.75);
        assert_eq!(c.total_requests, 4);
        assert_eq!(c.device_utilization, vec![0.5, 0.25, 0.0, 0.25]);
    }

    #[test]
    fn burstiness_is_population_fano_factor() {
        assert_eq!(fano_factor(&[4, 0, 4, 0]), 2.0);
        assert_eq!(fano_factor(&[2, 2, 2, 2]), 0.0);
        assert_eq!(fano_factor(&[0, 0, 0]), 0.0);

        // Same counts through characterize: 4 bins of width 10.
        let mut events = Vec::new();
        for b in [0u64, 2] {
            for k in 0..4 {
                events.push(ev(b * 10 + k, 0, OpKind::Read));
            }
        }
        let trace = Trace::new(events, 1, 40).unwrap();
        assert_eq!(characterize(&trace, 10).unwrap().burstiness, 2.0);
    }

    #[test]
    fn zero_bin_width_is_rejected() {
        let trace = Trace::empty(1, 10).unwrap();
        assert!(matches!(characterize(&trace, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn empty_trace_characterises_to_zeros() {
        let c = characterize(&Trace::empty(3, 100).unwrap(), 10).unwrap();
        assert_eq!(c.total_requests, 0);
        assert_eq!(c.read_ratio, 0.0);
        assert_eq!(c.device_utilization, vec![0.0; 3]);
        assert_eq!(c.burstiness, 0.0);
    }

    #[test]
    fn config_vector_layout() {
        let c = WorkloadConfig {
            read_ratio: 0.75,
            total_requests: 4,
            device_utilization: vec![0.5, 0.25, 0.0, 0.25],
            burstiness: 0.0,
        };
        assert_eq!(
            config_vector(&c, 8.0),
            vec![0.75, 0.5, 0.0, 0.5, 0.25, 0.0, 0.25]
        );

        let zero = WorkloadConfig {
            read_ratio: 0.0,
            total_requests: 0,
            device_utilization: vec![0.0; 4],
            burstiness: 0.0,
        };
        assert_eq!(config_vector(&zero, 8.0), vec![0.0; 7]);

        let bursty = WorkloadConfig {
            burstiness: 1.0,
            ..c
        };
        assert_eq!(config_vector(&bursty, 8.0)[2], 0.5);
    }

    #[test]
    fn config_json_uses_documented_keys() {
        let c = WorkloadConfig {
            read_ratio: 0.5,
            total_requests: 2,
            device_utilization: vec![1.0],
            burstiness: 0.25,
        };
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        for key in [
            "read_ratio",
            "total_requests",
            "device_utilization",
            "burstiness",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = WorkloadConfig {
            read_ratio: 1.5,
            total_requests: 2,
            device_utilization: vec![1.0],
            burstiness: 0.0,
        };
        assert!(c.validate().is_err());
        c.read_ratio = 0.5;
        assert!(c.validate().is_ok());
        c.device_utilization = vec![0.5, 0.2];
        assert!(c.validate().is_err());
    }
}
