use std::collections::BTreeSet;

use ditto_core::raster::{augment, decode, encode, AugmentSpec, GridSpec, TraceImage};
use ditto_core::synth::{sample_corpus, sample_trace, CorpusSpec, Interval};
use ditto_core::trace::{
    characterize, config_vector, parse_trace, serialize_trace, BlockRange, OpKind, Trace,
    TraceEvent, WorkloadConfig,
};
use proptest::prelude::*;

const D: usize = 8;
const W: usize = 64;
const H: u64 = 64_000;

fn grid() -> GridSpec {
    GridSpec::new(W, D, H).unwrap()
}

fn op_of(bit: bool) -> OpKind {
    if bit {
        OpKind::Read
    } else {
        OpKind::Write
    }
}

/// Traces with at most one event per (op, device, bin) cell.
fn sparse_trace() -> impl Strategy<Value = Trace> {
    prop::collection::btree_set((0..W, 0..D, any::<bool>()), 0..120)
        .prop_flat_map(|cells: BTreeSet<_>| {
            let n = cells.len();
            (Just(cells), prop::collection::vec(0u64..1000, n))
        })
        .prop_map(|(cells, offsets)| {
            let events = cells
                .into_iter()
                .zip(offsets)
                .map(|((b, d, r), off)| TraceEvent::new(b as u64 * 1000 + off, d, op_of(r)))
                .collect();
            Trace::new(events, D, H).unwrap()
        })
}

fn any_trace() -> impl Strategy<Value = Trace> {
    prop::collection::vec(
        (
            0..H,
            0..D,
            any::<bool>(),
            prop::option::of((0u64..1 << 40, 1u64..4096)),
        ),
        0..200,
    )
    .prop_map(|raw| {
        let events = raw
            .into_iter()
            .map(|(t, d, r, ext)| TraceEvent {
                extent: ext.map(|(offset_blocks, size_blocks)| BlockRange {
                    offset_blocks,
                    size_blocks,
                }),
                ..TraceEvent::new(t, d, op_of(r))
            })
            .collect();
        Trace::new(events, D, H).unwrap()
    })
}

fn quantized(trace: &Trace) -> Vec<(u64, usize, OpKind)> {
    let mut v: Vec<_> = trace
        .events()
        .iter()
        .map(|e| ((e.timestamp_us / 1000) * 1000 + 500, e.device_id, e.op))
        .collect();
    v.sort_by_key(|&(t, d, op)| (t, d, op.channel()));
    v
}

fn multiset(trace: &Trace) -> Vec<(u64, usize, OpKind)> {
    let mut v: Vec<_> = trace
        .events()
        .iter()
        .map(|e| (e.timestamp_us, e.device_id, e.op))
        .collect();
    v.sort_by_key(|&(t, d, op)| (t, d, op.channel()));
    v
}

fn config() -> impl Strategy<Value = WorkloadConfig> {
    (
        0.0f64..=1.0,
        1u64..300,
        prop::collection::vec(0.01f64..1.0, D),
        0.0f64..4.0,
    )
        .prop_map(|(rr, n, raw, b)| {
            let s: f64 = raw.iter().sum();
            WorkloadConfig {
                read_ratio: rr,
                total_requests: n,
                device_utilization: raw.iter().map(|x| x / s).collect(),
                burstiness: b,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn csv_round_trip(trace in any_trace()) {
        let text = serialize_trace(&trace);
        prop_assert_eq!(parse_trace(&text, D, H).unwrap(), trace);
    }

    #[test]
    fn characterize_ignores_input_order(trace in any_trace(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut events = trace.events().to_vec();
        events.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled = Trace::new(events, D, H).unwrap();
        prop_assert_eq!(characterize(&shuffled, 1000).unwrap(), characterize(&trace, 1000).unwrap());
    }

    #[test]
    fn characterize_is_shift_invariant(trace in any_trace(), k in 1u64..10) {
        let shift = k * 1000;
        let events = trace.events().iter().map(|e| TraceEvent { timestamp_us: e.timestamp_us + shift, ..*e }).collect();
        let shifted = Trace::new(events, D, H + shift).unwrap();
        let a = characterize(&trace, 1000).unwrap();
        let b = characterize(&shifted, 1000).unwrap();
        prop_assert_eq!(a.read_ratio, b.read_ratio);
        prop_assert_eq!(a.total_requests, b.total_requests);
        prop_assert_eq!(a.device_utilization, b.device_utilization);
    }

    #[test]
    fn utilization_sums_to_one(trace in any_trace()) {
        let c = characterize(&trace, 1000).unwrap();
        if c.total_requests > 0 {
            let s: f64 = c.device_utilization.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn config_vector_layout(c in config(), scale in 1.0f64..500.0) {
        let v = config_vector(&c, scale);
        prop_assert_eq!(v.len(), D + 3);
        let top = (c.total_requests as f64 / scale).max(1.0);
        prop_assert!(v.iter().all(|&x| (0.0..=top).contains(&x)));
    }

    #[test]
    fn codec_round_trip(trace in sparse_trace()) {
        let img = augment(&encode(&trace, &grid()).unwrap(), &AugmentSpec::default());
        let back = decode(&img, 0.6, 0.5).unwrap();
        prop_assert_eq!(multiset(&back), quantized(&trace));
    }

    #[test]
    fn augment_dominates_encode(trace in sparse_trace()) {
        let base = encode(&trace, &grid()).unwrap();
        let aug = augment(&base, &AugmentSpec::default());
        for (&a, &b) in aug.values().iter().zip(base.values()) {
            prop_assert!(a >= b);
            if b == 1.0 {
                prop_assert_eq!(a, 1.0);
            }
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn decode_count_falls_with_threshold(values in prop::collection::vec(0.0f32..=1.0, 2 * D * W), lo in 0.51f32..1.0, hi in 0.51f32..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let img = TraceImage::from_values(grid(), values).unwrap();
        let n_lo = decode(&img, lo, 0.5).unwrap().len();
        let n_hi = decode(&img, hi, 0.5).unwrap().len();
        prop_assert!(n_hi <= n_lo);
    }

    #[test]
    fn sampled_traces_match_their_config(c in config(), seed in any::<u64>()) {
        let s = sample_trace(&c, D, H, 1000, seed).unwrap();
        let got = characterize(&s.trace, 1000).unwrap();
        let reads = (c.read_ratio * c.total_requests as f64).round() / c.total_requests as f64;
        prop_assert_eq!(got.total_requests, c.total_requests);
        prop_assert!((got.read_ratio - reads).abs() < 1e-12);
    }
}

#[test]
fn corpus_is_deterministic_and_exact() {
    let spec = CorpusSpec {
        n_traces: 50,
        device_count: D,
        horizon_us: H,
        bin_width_us: 1000,
        read_ratio: Interval::new(0.2, 0.9),
        total_requests: Interval::new(20, 150),
        burstiness: Interval::new(0.5, 3.0),
        utilization_concentration: Interval::new(0.3, 10.0),
        seed: 11,
    };
    let a = sample_corpus(&spec).unwrap();
    let b = sample_corpus(&spec).unwrap();
    assert_eq!(a.pairs, b.pairs);
    for p in &a.pairs {
        let got = characterize(&p.trace, 1000).unwrap();
        assert_eq!(got.read_ratio, p.config.read_ratio);
        assert_eq!(got.total_requests, p.config.total_requests);
        assert_eq!(got.device_utilization, p.config.device_utilization);
    }
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    a.write_dir(dir_a.path()).unwrap();
    b.write_dir(dir_b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dir_a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 101);
    for n in names {
        assert_eq!(
            std::fs::read(dir_a.path().join(&n)).unwrap(),
            std::fs::read(dir_b.path().join(&n)).unwrap()
        );
    }
}

#[test]
fn burstier_targets_measure_burstier() {
    let mean_fano = |b: f64| {
        let c = WorkloadConfig {
            read_ratio: 0.5,
            total_requests: 150,
            device_utilization: vec![1.0 / D as f64; D],
            burstiness: b,
        };
        (0..100u64)
            .map(|s| {
                characterize(&sample_trace(&c, D, H, 1000, s).unwrap().trace, 1000)
                    .unwrap()
                    .burstiness
            })
            .sum::<f64>()
            / 100.0
    };
    let levels: Vec<f64> = [0.0, 1.0, 2.0, 4.0].iter().map(|&b| mean_fano(b)).collect();
    assert!(levels.windows(2).all(|w| w[1] > w[0]), "{levels:?}");
}
