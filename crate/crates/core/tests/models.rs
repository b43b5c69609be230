use ditto_core::chip::{
    chip_loss, info_nce_from_embeddings, train_chip, ChipArch, ChipHyper, ChipModel,
    EmbeddingVector,
};
use ditto_core::diffusion::{
    diffusion_loss, forward_sample, sample_many, train_diffusion, Denoiser, DiffusionExample,
    DiffusionHyper, NoiseSchedule, SamplerOptions, ScaledImage,
};
use ditto_core::metrics::{adherence, diversity_from_features, spatial_locality};
use ditto_core::outpaint::{extend_many, stitch, stitch_images, OutpaintSpec};
use ditto_core::raster::{augment, decode, encode, AugmentSpec, GridSpec, TraceImage};
use ditto_core::synth::{sample_corpus, CorpusSpec, Interval};
use ditto_core::trace::{config_vector, OpKind, Trace, TraceEvent};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const D: usize = 4;
const W: usize = 16;

fn grid() -> GridSpec {
    GridSpec::new(W, D, W as u64 * 1000).unwrap()
}

fn pairs(n: usize, seed: u64) -> Vec<(Vec<f64>, TraceImage)> {
    let spec = CorpusSpec {
        n_traces: n,
        device_count: D,
        horizon_us: W as u64 * 1000,
        bin_width_us: 1000,
        read_ratio: Interval::new(0.1, 0.9),
        total_requests: Interval::new(4, 30),
        burstiness: Interval::new(0.5, 2.0),
        utilization_concentration: Interval::new(0.5, 5.0),
        seed,
    };
    let corpus = sample_corpus(&spec).unwrap();
    let scale = corpus.manifest.request_scale;
    corpus
        .pairs
        .iter()
        .map(|p| {
            (
                config_vector(&p.config, scale),
                augment(&encode(&p.trace, &grid()).unwrap(), &AugmentSpec::default()),
            )
        })
        .collect()
}

fn tiny_chip_hyper(seed: u64) -> ChipHyper {
    ChipHyper {
        batch: 8,
        steps: 30,
        embed_dim: 8,
        hidden: 16,
        warmup_steps: 5,
        probe_every: 10,
        seed,
        ..Default::default()
    }
}

fn tiny_diffusion(seed: u64) -> (Denoiser, ChipModel) {
    let data = pairs(24, 3);
    let chip = train_chip(&data, &tiny_chip_hyper(1)).unwrap().model;
    let refs: Vec<&[f64]> = data.iter().map(|p| p.0.as_slice()).collect();
    let conds = chip.embed_configs(&refs).unwrap();
    let examples: Vec<DiffusionExample> = data
        .iter()
        .zip(conds)
        .map(|((_, img), cond)| DiffusionExample {
            presence: img.clone(),
            image: img.clone(),
            cond,
        })
        .collect();
    let hyper = DiffusionHyper {
        batch: 4,
        steps: 6,
        base_width: 4,
        warmup_steps: 2,
        probe_every: 3,
        seed,
        ..Default::default()
    };
    let t = train_diffusion(
        &examples,
        &NoiseSchedule::linear_default(),
        &AugmentSpec::default(),
        &hyper,
    )
    .unwrap();
    (t.denoiser, chip)
}

fn unit(v: Vec<f32>) -> EmbeddingVector {
    EmbeddingVector::normalized(v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn info_nce_is_symmetric_and_nonnegative(
        a in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..6),
        b in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 6),
        temp in 0.05f64..2.0,
    ) {
        prop_assume!(a.iter().chain(&b).all(|v| v.iter().map(|x| x * x).sum::<f32>() > 1e-3));
        let n = a.len();
        let ea: Vec<_> = a.into_iter().map(unit).collect();
        let eb: Vec<_> = b.into_iter().take(n).map(unit).collect();
        let ab = info_nce_from_embeddings(&ea, &eb, temp).unwrap();
        let ba = info_nce_from_embeddings(&eb, &ea, temp).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn embeddings_have_unit_norm(seed in 0u64..1000, cfg in prop::collection::vec(0.0f64..1.0, D + 3)) {
        let model = ChipModel::new(ChipArch { hidden: 16, ..ChipArch::new(D, W, 8) }, seed).unwrap();
        let e = model.embed_config(&cfg).unwrap();
        prop_assert!((e.norm() - 1.0).abs() <= 1e-6);
        let img = TraceImage::from_values(grid(), cfg.iter().cycle().take(2 * D * W).map(|&x| x as f32).collect()).unwrap();
        prop_assert!((model.embed_image(&img).unwrap().norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn locality_is_translation_invariant(
        raw in prop::collection::vec((0u64..16_000, 0usize..D, any::<bool>()), 2..40),
        shift in 1usize..4,
    ) {
        let make = |k: usize, dc: usize| {
            let ev = raw.iter().map(|&(t, d, r)| TraceEvent::new(t, d + k, if r { OpKind::Read } else { OpKind::Write })).collect();
            Trace::new(ev, dc, 16_000).unwrap()
        };
        let (a, b) = (make(0, D), make(shift, D + shift));
        for op in OpKind::ALL {
            let gap = |t: &Trace| spatial_locality(t, op).map(|v| v * (t.device_count() - 1) as f64);
            match (gap(&a), gap(&b)) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn self_diversity_is_one(feats in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 2..8)) {
        prop_assume!(feats.windows(2).any(|w| w[0] != w[1]));
        let r = diversity_from_features(&feats, &feats).unwrap();
        prop_assert_eq!(r.diversity_ratio, 1.0);
    }

    #[test]
    fn constant_loss_weights_cancel(k in 0.1f32..20.0, seed in any::<u64>()) {
        let model = Denoiser::new(
            ditto_core::diffusion::DenoiserArch::new(D, W, 4, 4),
            Default::default(),
            3,
        ).unwrap();
        let sched = NoiseSchedule::linear_default();
        let x0 = ScaledImage::from_image(&TraceImage::from_values(grid(), vec![0.5; 2 * D * W]).unwrap());
        let cond = unit(vec![0.5; 4]);
        let one = diffusion_loss(&model, &sched, &x0, &cond, &vec![1.0; 2 * D * W], seed).unwrap();
        let scaled = diffusion_loss(&model, &sched, &x0, &cond, &vec![k; 2 * D * W], seed).unwrap();
        prop_assert!((one - scaled).abs() <= 1e-6 * one.abs().max(1.0));
    }
}

#[test]
fn chip_loss_is_zero_only_for_confident_diagonals() {
    let e1 = unit(vec![1.0, 0.0]);
    let e2 = unit(vec![0.0, 1.0]);
    let perfect =
        info_nce_from_embeddings(&[e1.clone(), e2.clone()], &[e1.clone(), e2.clone()], 1e-3)
            .unwrap();
    assert!(perfect < 1e-12);
    let single = info_nce_from_embeddings(std::slice::from_ref(&e1), std::slice::from_ref(&e2), 0.07).unwrap();
    assert_eq!(single, 0.0);
    let loose = info_nce_from_embeddings(&[e1.clone(), e2.clone()], &[e1, e2], 1.0).unwrap();
    assert!(loose > 0.0);
}

#[test]
fn chip_training_learns_clamps_and_repeats() {
    let data = pairs(40, 5);
    let a = train_chip(&data, &tiny_chip_hyper(9)).unwrap();
    let b = train_chip(&data, &tiny_chip_hyper(9)).unwrap();
    assert!(a.final_probe_loss < a.initial_probe_loss);
    assert!((1e-3..=100.0).contains(&a.model.temperature()));
    assert_eq!(a.probe_curve, b.probe_curve);
    let dir = tempfile::tempdir().unwrap();
    a.model.save(&dir.path().join("a.json"), "h").unwrap();
    b.model.save(&dir.path().join("b.json"), "h").unwrap();
    for ext in ["json", "bin"] {
        assert_eq!(
            std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap(),
            std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap()
        );
    }
    let loaded = ChipModel::load(&dir.path().join("a.json")).unwrap();
    let c: Vec<&[f64]> = data[..8].iter().map(|p| p.0.as_slice()).collect();
    let i: Vec<&TraceImage> = data[..8].iter().map(|p| &p.1).collect();
    assert_eq!(
        chip_loss(&loaded, &c, &i).unwrap(),
        chip_loss(&a.model, &c, &i).unwrap()
    );
}

#[test]
fn schedule_is_monotone() {
    let s = NoiseSchedule::linear_default();
    for t in 1..s.timesteps() {
        assert!(s.beta(t + 1) > s.beta(t));
        assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
    }
    assert!(s.alpha_bar(s.timesteps()) < 1e-3);
}

#[test]
fn forward_marginals_match_within_three_standard_errors() {
    let s = NoiseSchedule::linear_default();
    let g = GridSpec::new(8, 1, 8000).unwrap();
    let pix: Vec<f32> = (0..16).map(|i| (i % 3) as f32 * 0.5).collect();
    let x0 = ScaledImage::from_image(&TraceImage::from_values(g, pix).unwrap());
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for t in [1, 500, 1000] {
        let ab = s.alpha_bar(t);
        let mut sum = [0.0f64; 16];
        let mut sq = [0.0f64; 16];
        for _ in 0..n {
            let eps: Vec<f32> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            for (k, v) in forward_sample(&x0, t, &eps, &s)
                .unwrap()
                .into_iter()
                .enumerate()
            {
                sum[k] += v as f64;
                sq[k] += (v as f64) * (v as f64);
            }
        }
        let var_true = 1.0 - ab;
        for k in 0..16 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let mu = ab.sqrt() * x0.values()[k] as f64;
            assert!(
                (mean - mu).abs() <= 3.0 * (var_true / n as f64).sqrt() + 1e-6,
                "t={t} k={k}"
            );
            // Standard error of a Gaussian sample variance.
            assert!(
                (var - var_true).abs() <= 3.0 * var_true * (2.0 / (n - 1) as f64).sqrt() + 1e-6,
                "t={t} k={k}"
            );
        }
    }
}

#[test]
fn sampling_and_outpainting_contracts() {
    let (den, chip) = tiny_diffusion(2);
    let sched = den.schedule();
    let cond = chip.embed_config(&pairs(1, 8)[0].0).unwrap();
    let opts = SamplerOptions {
        steps: 10,
        batch: 3,
        ..Default::default()
    };
    let seeds = [4u64, 5, 6];
    let a = sample_many(&den, &sched, &[&cond; 3], &seeds, &grid(), &opts).unwrap();
    let b = sample_many(&den, &sched, &[&cond; 3], &seeds, &grid(), &opts).unwrap();
    assert_eq!(a, b);
    assert!(a
        .iter()
        .all(|im| im.values().iter().all(|v| (0.0..=1.0).contains(v))));

    let spec = OutpaintSpec {
        overlap: 4,
        resample_repeats: 2,
        segments: 2,
    };
    let prevs: Vec<&TraceImage> = a.iter().collect();
    let ext = extend_many(&den, &sched, &[&cond; 3], &prevs, &seeds, &spec, &opts).unwrap();
    for (p, e) in prevs.iter().zip(&ext) {
        assert_eq!(e.columns(0, 4), p.columns(W - 4, W));
    }
    let again = extend_many(&den, &sched, &[&cond; 3], &prevs, &seeds, &spec, &opts).unwrap();
    assert_eq!(ext, again);

    // Overlapping columns are counted once: the stitched trace is the decode
    // of the concatenated image, which is W + (W - O) columns wide.
    let segs = vec![a[0].clone(), ext[0].clone()];
    let stitched = stitch_images(&segs, 4).unwrap();
    assert_eq!(stitched.grid().time_bins, 2 * W - 4);
    assert_eq!(stitched.columns(0, W), segs[0].columns(0, W));
    assert_eq!(stitched.columns(W, 2 * W - 4), segs[1].columns(4, W));
    let whole = stitch(&segs, 4, 0.6, 0.5).unwrap();
    assert_eq!(whole, decode(&stitched, 0.6, 0.5).unwrap());
    assert_eq!(whole.horizon_us(), (2 * W - 4) as u64 * 1000);
}

#[test]
fn oracle_traces_have_zero_adherence_error() {
    let spec = CorpusSpec {
        n_traces: 30,
        device_count: 8,
        horizon_us: 64_000,
        bin_width_us: 1000,
        read_ratio: Interval::new(0.1, 0.9),
        total_requests: Interval::new(10, 200),
        burstiness: Interval::new(0.5, 3.0),
        utilization_concentration: Interval::new(0.3, 10.0),
        seed: 21,
    };
    for p in sample_corpus(&spec).unwrap().pairs {
        let r = adherence(&p.config, &p.trace, 1000).unwrap();
        assert_eq!(r.read_ratio_rel_err, 0.0);
        assert_eq!(r.request_count_rel_err, 0.0);
        assert_eq!(r.utilization_mae_pp, 0.0);
    }
}

#[test]
fn diffusion_training_is_deterministic() {
    let (a, _) = tiny_diffusion(7);
    let (b, _) = tiny_diffusion(7);
    let dir = tempfile::tempdir().unwrap();
    a.save(&dir.path().join("a.json"), "h").unwrap();
    b.save(&dir.path().join("b.json"), "h").unwrap();
    for ext in ["json", "bin"] {
        assert_eq!(
            std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap(),
            std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap()
        );
    }
}
