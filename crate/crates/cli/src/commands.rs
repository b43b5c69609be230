use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ditto_core::checkpoint::Manifest;
use ditto_core::chip::{retrieval_accuracy, train_chip as fit_chip, ChipModel};
use ditto_core::diffusion::{
    sample_many, train_diffusion as fit_diffusion, Denoiser, DiffusionExample,
};
use ditto_core::fsutil::{read_json, write_atomic, write_json};
use ditto_core::metrics::{
    adherence, cluster_separation, combined_locality, diversity, spatial_locality,
    write_projection_csv, write_report_csv, AdherenceReport, ReportRow, Separation,
};
use ditto_core::outpaint::{
    extend as extend_once, generate_chain, rate_drift, stitch_images, OutpaintSpec,
};
use ditto_core::raster::{augment, decode, encode, GridSpec, TraceImage};
use ditto_core::run_config::RunConfig;
use ditto_core::seed::{derive_seed, json_hash};
use ditto_core::synth::{sample_corpus, Corpus, CorpusSpec, MANIFEST_FILE};
use ditto_core::trace::{config_vector, parse_trace, OpKind, Trace, TraceEvent, WorkloadConfig};
use ditto_core::Error;
use serde::{Deserialize, Serialize};

use crate::outdir;
use crate::{
    Common, EvaluateArgs, ExtendArgs, GenerateArgs, IngestArgs, SynthesizeArgs, TargetArgs,
    TrainArgs,
};

const CHIP_CHECKPOINT: &str = "chip.json";
const DIFFUSION_CHECKPOINT: &str = "diffusion.json";
const GENERATE_MANIFEST: &str = "generate_manifest.json";
const CHAIN_MANIFEST: &str = "chain_manifest.json";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn breach(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::OverlapMismatch { .. }
            | Error::NonFiniteLoss { .. }
            | Error::Diverged { .. } => CliError::breach(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

type Res<T> = Result<T, CliError>;

fn load_config(common: &Common) -> Res<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_dir(flag: Option<&PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.cloned()
        .or_else(|| cfg.paths.checkpoint_dir.clone())
        .unwrap_or_else(|| outdir::home().join("checkpoints"))
}

fn load_chip(dir: &Path, cfg: &RunConfig) -> Res<ChipModel> {
    let path = dir.join(CHIP_CHECKPOINT);
    if !path.exists() {
        return Err(CliError::usage(format!(
            "no CHIP checkpoint at {}; run `ditto-forge train chip` first",
            path.display()
        )));
    }
    let chip = ChipModel::load(&path)?;
    cfg.check_devices(chip.arch().device_count, "the CHIP checkpoint")?;
    Ok(chip)
}

fn load_denoiser(dir: &Path, cfg: &RunConfig) -> Res<Denoiser> {
    let path = dir.join(DIFFUSION_CHECKPOINT);
    if !path.exists() {
        return Err(CliError::usage(format!(
            "no diffusion checkpoint at {}; run `ditto-forge train diffusion` first",
            path.display()
        )));
    }
    let den = Denoiser::load(&path)?;
    cfg.check_devices(den.arch().device_count, "the diffusion checkpoint")?;
    Ok(den)
}

fn spec_hash(path: &Path) -> Res<String> {
    Ok(read_json::<Manifest>(path)?.spec_hash)
}

fn resolve_target(t: &TargetArgs, cfg: &RunConfig) -> Res<Option<WorkloadConfig>> {
    let target = if let Some(p) = &t.target {
        Some(WorkloadConfig::read_file(p)?)
    } else {
        match (t.read_ratio, t.total_requests, &t.utilization) {
            (None, None, None) if t.burstiness.is_none() => None,
            (Some(read_ratio), Some(total_requests), Some(u)) => Some(WorkloadConfig {
                read_ratio,
                total_requests,
                device_utilization: u.clone(),
                burstiness: t.burstiness.unwrap_or(1.0),
            }),
            _ => {
                return Err(CliError::usage(
                    "an inline target needs --read-ratio, --total-requests and --utilization",
                ))
            }
        }
    };
    if let Some(c) = &target {
        c.validate()?;
        cfg.check_devices(c.device_count(), "the target configuration")?;
    }
    Ok(target)
}

fn grid_of(cfg: &RunConfig) -> Res<GridSpec> {
    Ok(cfg.grid.grid()?)
}

fn read_corpus(flag: Option<&PathBuf>, cfg: &RunConfig) -> Res<Corpus> {
    let dir = flag
        .cloned()
        .or_else(|| cfg.paths.corpus_dir.clone())
        .ok_or_else(|| {
            CliError::usage(
                "no corpus directory: pass --corpus or set paths.corpus_dir in the configuration",
            )
        })?;
    let corpus = Corpus::read_dir(&dir)?;
    cfg.check_devices(corpus.manifest.device_count, "the corpus")?;
    if corpus.manifest.horizon_us != cfg.grid.horizon_us {
        return Err(CliError::usage(format!(
            "corpus horizon {} differs from the configured {}",
            corpus.manifest.horizon_us, cfg.grid.horizon_us
        )));
    }
    if corpus.pairs.is_empty() {
        return Err(CliError::usage(format!(
            "corpus {} is empty",
            dir.display()
        )));
    }
    Ok(corpus)
}

fn fresh_checkpoint(dir: &Path, name: &str, force: bool) -> Res<PathBuf> {
    let path = dir.join(name);
    if path.exists() && !force {
        return Err(CliError::usage(format!(
            "{} exists; pass --force to replace it",
            path.display()
        )));
    }
    Ok(path)
}

fn write_curve(path: &Path, curve: &[(usize, f64)]) -> Res<()> {
    let mut s = String::from("step,loss\n");
    for (step, loss) in curve {
        let _ = writeln!(s, "{step},{loss}");
    }
    Ok(write_atomic(path, s.as_bytes())?)
}

pub fn synthesize_corpus(a: SynthesizeArgs) -> Res<()> {
    let mut spec: CorpusSpec = read_json(&a.spec)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let corpus = sample_corpus(&spec)?;
    let dir = outdir::prepare(a.out.as_deref(), None, "corpus")?;
    corpus.write_dir(&dir)?;
    println!(
        "wrote {} traces to {} ({} configurations redrawn)",
        corpus.pairs.len(),
        dir.display(),
        corpus.manifest.capacity_redraws
    );
    Ok(())
}

/// Splits a trace of any length into consecutive windows of `horizon_us`,
/// rebasing timestamps and dropping windows without events.
fn windows(trace: &Trace, horizon_us: u64) -> Res<Vec<Trace>> {
    let mut out = Vec::new();
    let mut current: Vec<TraceEvent> = Vec::new();
    let mut index = 0;
    for e in trace.events() {
        let w = e.timestamp_us / horizon_us;
        if w != index && !current.is_empty() {
            out.push(Trace::new(
                std::mem::take(&mut current),
                trace.device_count(),
                horizon_us,
            )?);
        }
        index = w;
        let mut ev = *e;
        ev.timestamp_us -= w * horizon_us;
        current.push(ev);
    }
    if !current.is_empty() {
        out.push(Trace::new(current, trace.device_count(), horizon_us)?);
    }
    Ok(out)
}

pub fn ingest(a: IngestArgs) -> Res<()> {
    let cfg = load_config(&a.common)?;
    let mut traces = Vec::new();
    for path in &a.inputs {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let full = parse_trace(&text, cfg.grid.device_count, u64::MAX)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        traces.extend(windows(&full, cfg.grid.horizon_us)?);
    }
    if traces.is_empty() {
        return Err(CliError::usage("the inputs contain no events"));
    }
    let corpus = Corpus::from_traces(traces, cfg.grid.bin_width_us)?;
    let dir = outdir::prepare(a.out.as_deref(), None, "ingest")?;
    corpus.write_dir(&dir)?;
    println!(
        "ingested {} windows into {}",
        corpus.pairs.len(),
        dir.display()
    );
    Ok(())
}

pub fn train_chip(a: TrainArgs) -> Res<()> {
    let cfg = load_config(&a.common)?;
    let corpus = read_corpus(a.corpus.as_ref(), &cfg)?;
    let grid = grid_of(&cfg)?;
    let dir = checkpoint_dir(a.checkpoints.as_ref(), &cfg);
    let path = fresh_checkpoint(&dir, CHIP_CHECKPOINT, a.force)?;
    let scale = corpus.manifest.request_scale;
    let pairs = corpus
        .pairs
        .iter()
        .map(|p| {
            Ok((
                config_vector(&p.config, scale),
                augment(&encode(&p.trace, &grid)?, &cfg.augment),
            ))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let training = fit_chip(&pairs, &cfg.chip_hyper())?;
    let mut model = training.model;
    model.set_request_scale(scale);
    model.save(&path, &cfg.chip_spec_hash())?;
    write_curve(&dir.join("chip_curve.csv"), &training.probe_curve)?;
    let probe = pairs.len().min(cfg.chip.batch);
    let acc = retrieval_accuracy(&model, &pairs[..probe])?;
    println!(
        "chip: probe loss {:.4} -> {:.4}, retrieval on {probe} training pairs {acc:.3}; wrote {}",
        training.initial_probe_loss,
        training.final_probe_loss,
        path.display()
    );
    Ok(())
}

pub fn train_diffusion(a: TrainArgs) -> Res<()> {
    let cfg = load_config(&a.common)?;
    let dir = checkpoint_dir(a.checkpoints.as_ref(), &cfg);
    let chip = load_chip(&dir, &cfg)?;
    let corpus = read_corpus(a.corpus.as_ref(), &cfg)?;
    let grid = grid_of(&cfg)?;
    let path = fresh_checkpoint(&dir, DIFFUSION_CHECKPOINT, a.force)?;
    let vectors: Vec<Vec<f64>> = corpus
        .pairs
        .iter()
        .map(|p| config_vector(&p.config, chip.request_scale()))
        .collect();
    let refs: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    let conds = chip.embed_configs(&refs)?;
    let mut examples = Vec::with_capacity(conds.len());
    for (p, cond) in corpus.pairs.iter().zip(conds) {
        let presence = encode(&p.trace, &grid)?;
        examples.push(DiffusionExample {
            image: augment(&presence, &cfg.augment),
            presence,
            cond,
        });
    }
    let schedule = ditto_core::diffusion::NoiseSchedule::new(cfg.schedule)?;
    let training = fit_diffusion(&examples, &schedule, &cfg.augment, &cfg.diffusion_hyper())?;
    training.denoiser.save(&path, &cfg.diffusion_spec_hash())?;
    write_curve(&dir.join("diffusion_curve.csv"), &training.curve)?;
    write_curve(&dir.join("diffusion_probe.csv"), &training.probe_curve)?;
    println!(
        "diffusion: probe loss {:.4} -> {:.4}; wrote {}",
        training.initial_probe_loss,
        training.final_probe_loss,
        path.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GenerateManifest {
    target: WorkloadConfig,
    target_hash: String,
    count: usize,
    seed: u64,
    seeds: Vec<u64>,
    guidance: f32,
    chip_spec_hash: String,
    diffusion_spec_hash: String,
}

fn write_trace_outputs(dir: &Path, stem: &str, image: &TraceImage, trace: &Trace) -> Res<()> {
    trace.write_file(&dir.join(format!("{stem}.csv")))?;
    image.write_container(&dir.join(format!("{stem}.img")))?;
    write_atomic(&dir.join(format!("{stem}.pgm")), &image.stacked_pgm())?;
    Ok(())
}

pub fn generate(a: GenerateArgs) -> Res<()> {
    let cfg = load_config(&a.common)?;
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let target = resolve_target(&a.target, &cfg)?
        .ok_or_else(|| CliError::usage("a target is required: --target FILE or inline flags"))?;
    let dir = checkpoint_dir(a.checkpoints.as_ref(), &cfg);
    let chip = load_chip(&dir, &cfg)?;
    let den = load_denoiser(&dir, &cfg)?;
    let grid = grid_of(&cfg)?;
    let mut opts = cfg.sampler;
    if let Some(g) = a.guidance {
        opts.guidance = g;
    }
    opts.validate()?;

    let cond = chip.embed_workload(&target)?;
    let seeds: Vec<u64> = (0..a.count)
        .map(|i| derive_seed(cfg.seed, &format!("generate/{i}")))
        .collect();
    let images = sample_many(
        &den,
        &den.schedule(),
        &vec![&cond; a.count],
        &seeds,
        &grid,
        &opts,
    )?;

    let out = outdir::prepare(
        a.out.as_deref(),
        cfg.paths.output_dir.as_deref(),
        "generate",
    )?;
    let target_hash = json_hash(&target);
    let mut rows = Vec::with_capacity(images.len());
    for (i, (image, &seed)) in images.iter().zip(&seeds).enumerate() {
        let trace = decode(image, cfg.threshold, cfg.augment.halo_amplitude)?;
        let stem = format!("gen_{i:04}");
        write_trace_outputs(&out, &stem, image, &trace)?;
        rows.push(ReportRow {
            name: stem,
            seed,
            target_hash: target_hash.clone(),
            events: trace.len(),
            report: adherence(&target, &trace, cfg.grid.bin_width_us)?,
        });
    }
    write_report_csv(&out.join("report.csv"), &rows)?;
    write_json(
        &out.join(GENERATE_MANIFEST),
        &GenerateManifest {
            target,
            target_hash,
            count: a.count,
            seed: cfg.seed,
            seeds,
            guidance: opts.guidance,
            chip_spec_hash: spec_hash(&dir.join(CHIP_CHECKPOINT))?,
            diffusion_spec_hash: spec_hash(&dir.join(DIFFUSION_CHECKPOINT))?,
        },
    )?;
    let mean = AdherenceReport::mean(&rows.iter().map(|r| r.report).collect::<Vec<_>>());
    println!("generated {} traces in {}", rows.len(), out.display());
    println!("mean read_ratio_rel_err {:.4}", mean.read_ratio_rel_err);
    println!(
        "mean request_count_rel_err {:.4}",
        mean.request_count_rel_err
    );
    println!("mean utilization_mae_pp {:.4}", mean.utilization_mae_pp);
    println!("mean burstiness_rel_err {:.4}", mean.burstiness_rel_err);
    Ok(())
}

#[derive(Clone, Serialize, Deserialize)]
struct ChainManifest {
    target: WorkloadConfig,
    /// Image container used as the first segment, if any.
    base: Option<PathBuf>,
    segments: usize,
    overlap: usize,
    resample_repeats: usize,
    seed: u64,
    guidance: f32,
    stitched_time_bins: usize,
    segment_events: Vec<usize>,
    rate_drift: f64,
}

pub fn extend(a: ExtendArgs) -> Res<()> {
    let cfg = load_config(&a.common)?;
    let grid = grid_of(&cfg)?;
    let mut plan = match &a.chain {
        Some(p) => read_json::<ChainManifest>(p)?,
        None => {
            let target = resolve_target(&a.target, &cfg)?.ok_or_else(|| {
                CliError::usage("a target is required: --target FILE or inline flags")
            })?;
            ChainManifest {
                target,
                base: a.base.clone(),
                segments: a.segments.unwrap_or(cfg.outpaint.segments),
                overlap: a.overlap.unwrap_or(cfg.outpaint.overlap),
                resample_repeats: cfg.outpaint.resample_repeats,
                seed: cfg.seed,
                guidance: a.guidance.unwrap_or(cfg.sampler.guidance),
                stitched_time_bins: 0,
                segment_events: Vec::new(),
                rate_drift: 0.0,
            }
        }
    };
    plan.target.validate()?;
    cfg.check_devices(plan.target.device_count(), "the target configuration")?;
    let spec = OutpaintSpec {
        overlap: plan.overlap,
        resample_repeats: plan.resample_repeats,
        segments: plan.segments,
    };
    spec.validate(grid.time_bins)?;
    let mut opts = cfg.sampler;
    opts.guidance = plan.guidance;
    opts.validate()?;

    let dir = checkpoint_dir(a.checkpoints.as_ref(), &cfg);
    let chip = load_chip(&dir, &cfg)?;
    let den = load_denoiser(&dir, &cfg)?;
    let schedule = den.schedule();
    let cond = chip.embed_workload(&plan.target)?;
    let segments = match &plan.base {
        Some(base) => {
            let first = TraceImage::read_container(base)?;
            if first.grid() != &grid {
                return Err(CliError::usage(format!(
                    "{} does not match the configured grid",
                    base.display()
                )));
            }
            let mut chain = vec![first];
            for k in 1..spec.segments {
                let seed = derive_seed(plan.seed, &format!("segment/{k}"));
                let next = extend_once(
                    &den,
                    &schedule,
                    &cond,
                    chain.last().expect("non-empty"),
                    &spec,
                    seed,
                    &opts,
                )?;
                chain.push(next);
            }
            chain
        }
        None => generate_chain(&den, &schedule, &[&cond], &spec, plan.seed, &grid, &opts)?,
    };
    // Verified before anything is written.
    let stitched = stitch_images(&segments, spec.overlap)?;
    let trace = decode(&stitched, cfg.threshold, cfg.augment.halo_amplitude)?;
    let counts = segments
        .iter()
        .map(|s| Ok(decode(s, cfg.threshold, cfg.augment.halo_amplitude)?.len()))
        .collect::<Res<Vec<usize>>>()?;
    plan.stitched_time_bins = stitched.grid().time_bins;
    plan.rate_drift = rate_drift(&counts);
    plan.segment_events = counts;

    let out = outdir::prepare(a.out.as_deref(), cfg.paths.output_dir.as_deref(), "extend")?;
    for (k, s) in segments.iter().enumerate() {
        s.write_container(&out.join(format!("segment_{k:02}.img")))?;
    }
    write_trace_outputs(&out, "stitched", &stitched, &trace)?;
    write_json(&out.join(CHAIN_MANIFEST), &plan)?;
    println!(
        "stitched {} segments into {} bins ({} events, rate drift {:.3}) in {}",
        segments.len(),
        plan.stitched_time_bins,
        trace.len(),
        plan.rate_drift,
        out.display()
    );
    Ok(())
}

struct Item {
    name: String,
    trace: Trace,
    image: TraceImage,
}

/// Traces named `trace_*.csv` or `gen_*.csv`; the image is the sibling
/// `.img` container when present and the re-encoded trace otherwise.
fn load_set(dir: &Path, cfg: &RunConfig) -> Res<Vec<Item>> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    if dir.join(MANIFEST_FILE).exists() {
        let m: ditto_core::synth::CorpusManifest = read_json(&dir.join(MANIFEST_FILE))?;
        cfg.check_devices(m.device_count, &dir.display().to_string())?;
    }
    if dir.join(GENERATE_MANIFEST).exists() {
        let m: GenerateManifest = read_json(&dir.join(GENERATE_MANIFEST))?;
        cfg.check_devices(m.target.device_count(), &dir.display().to_string())?;
    }
    let grid = grid_of(cfg)?;
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".csv") && (name.starts_with("trace_") || name.starts_with("gen_"))
        })
        .collect();
    names.sort();
    let mut items = Vec::with_capacity(names.len());
    for path in names {
        let trace = Trace::read_file(&path, cfg.grid.device_count, cfg.grid.horizon_us)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let img_path = path.with_extension("img");
        let image = if img_path.exists() {
            let img = TraceImage::read_container(&img_path)?;
            if img.grid() != &grid {
                return Err(CliError::usage(format!(
                    "{} does not match the configured grid",
                    img_path.display()
                )));
            }
            img
        } else {
            augment(&encode(&trace, &grid)?, &cfg.augment)
        };
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("")
            .to_owned();
        items.push(Item { name, trace, image });
    }
    if items.is_empty() {
        return Err(CliError::usage(format!(
            "no trace_*.csv or gen_*.csv files in {}",
            dir.display()
        )));
    }
    Ok(items)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn localities(items: &[Item]) -> Vec<f64> {
    items
        .iter()
        .filter_map(|i| combined_locality(&i.trace))
        .collect()
}

pub fn evaluate(a: EvaluateArgs) -> Res<()> {
    let cfg = load_config(&a.common)?;
    let real = load_set(&a.real, &cfg)?;
    let generated = load_set(&a.generated, &cfg)?;
    let group_b = a
        .generated_b
        .as_deref()
        .map(|d| load_set(d, &cfg))
        .transpose()?;
    let dir = checkpoint_dir(a.checkpoints.as_ref(), &cfg);
    let chip = load_chip(&dir, &cfg)?;

    let imgs = |items: &[Item]| items.iter().map(|i| i.image.clone()).collect::<Vec<_>>();
    let div = diversity(&imgs(&real), &imgs(&generated), &chip)?;
    let out = outdir::prepare(
        a.out.as_deref(),
        cfg.paths.output_dir.as_deref(),
        "evaluate",
    )?;
    let labels: Vec<String> = real
        .iter()
        .map(|i| format!("real:{}", i.name))
        .chain(generated.iter().map(|i| format!("gen:{}", i.name)))
        .collect();
    write_projection_csv(&out.join("projection.csv"), &labels, &div.projection)?;

    let mut loc = String::from("group,name,read_locality,write_locality,combined_locality\n");
    let mut groups: Vec<(&str, &[Item])> = vec![("real", &real), ("gen", &generated)];
    if let Some(b) = &group_b {
        groups.push(("gen_b", b));
    }
    for (label, items) in &groups {
        for i in items.iter() {
            let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                loc,
                "{label},{},{},{},{}",
                i.name,
                f(spatial_locality(&i.trace, OpKind::Read)),
                f(spatial_locality(&i.trace, OpKind::Write)),
                f(combined_locality(&i.trace))
            );
        }
    }
    write_atomic(&out.join("locality.csv"), loc.as_bytes())?;

    let mut summary = serde_json::json!({
        "real": real.len(),
        "generated": generated.len(),
        "diversity_ratio": div.diversity_ratio,
        "mean_pairwise_real": div.mean_pairwise_real,
        "mean_pairwise_gen": div.mean_pairwise_gen,
        "min_nearest_real_dist": div.min_nearest_real_dist,
        "explained_variance": div.explained_variance,
        "locality_metric": "device-index proxy",
        "locality_real_mean": mean(&localities(&real)),
        "locality_generated_mean": mean(&localities(&generated)),
    });
    println!("diversity_ratio {:.4}", div.diversity_ratio);
    println!("min_nearest_real_dist {:.4}", div.min_nearest_real_dist);
    println!(
        "locality (device-index proxy) real {:.4} generated {:.4}",
        summary["locality_real_mean"], summary["locality_generated_mean"]
    );

    let manifest_path = a.generated.join(GENERATE_MANIFEST);
    if manifest_path.exists() {
        let m: GenerateManifest = read_json(&manifest_path)?;
        let mut rows = Vec::with_capacity(generated.len());
        for (k, i) in generated.iter().enumerate() {
            rows.push(ReportRow {
                name: i.name.clone(),
                seed: m.seeds.get(k).copied().unwrap_or(m.seed),
                target_hash: m.target_hash.clone(),
                events: i.trace.len(),
                report: adherence(&m.target, &i.trace, cfg.grid.bin_width_us)?,
            });
        }
        write_report_csv(&out.join("report.csv"), &rows)?;
        let avg = AdherenceReport::mean(&rows.iter().map(|r| r.report).collect::<Vec<_>>());
        println!("mean read_ratio_rel_err {:.4}", avg.read_ratio_rel_err);
        println!(
            "mean request_count_rel_err {:.4}",
            avg.request_count_rel_err
        );
        println!("mean utilization_mae_pp {:.4}", avg.utilization_mae_pp);
        summary["adherence"] = serde_json::to_value(avg).expect("plain struct");
    }
    if let Some(b) = &group_b {
        let sep = cluster_separation(&localities(&generated), &localities(b))?;
        let d = match sep.cohens_d {
            Separation::Finite(d) => serde_json::json!(d),
            Separation::Infinite => serde_json::json!("infinite"),
        };
        println!(
            "cohens_d_locality {d} (means {:.4} vs {:.4})",
            sep.mean_a, sep.mean_b
        );
        summary["cohens_d_locality"] = d;
        summary["locality_generated_b_mean"] = serde_json::json!(sep.mean_b);
    }
    write_json(&out.join("summary.json"), &summary)?;
    println!("reports in {}", out.display());
    Ok(())
}
