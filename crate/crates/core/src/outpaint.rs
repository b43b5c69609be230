//! Rightward extension of generated images and stitching into long traces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chip::EmbeddingVector;
use crate::diffusion::{
    check_sampling, reverse_process, sample_many, scaled_nhwc, to_trace_image, Denoiser,
    KnownRegion, NoiseSchedule, SamplerOptions,
};
use crate::error::{Error, Result};
use crate::raster::{decode, GridSpec, TraceImage, CHANNELS};
use crate::seed::derive_seed;
use crate::trace::Trace;

pub const MAX_RESAMPLE_REPEATS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutpaintSpec {
    /// Columns shared by consecutive segments.
    pub overlap: usize,
    pub resample_repeats: usize,
    pub segments: usize,
}

impl OutpaintSpec {
    /// Quarter-width overlap, one pass per step, two segments.
    pub fn for_width(time_bins: usize) -> Self {
        Self {
            overlap: (time_bins / 4).max(1),
            resample_repeats: 1,
            segments: 2,
        }
    }

    pub fn validate(&self, time_bins: usize) -> Result<()> {
        if self.overlap == 0 || self.overlap >= time_bins {
            return Err(Error::domain(format!(
                "overlap {} must lie in [1, {time_bins})",
                self.overlap
            )));
        }
        if self.resample_repeats == 0 || self.resample_repeats > MAX_RESAMPLE_REPEATS {
            return Err(Error::domain(format!(
                "resample_repeats {} must lie in [1, {MAX_RESAMPLE_REPEATS}]",
                self.resample_repeats
            )));
        }
        if self.segments == 0 {
            return Err(Error::domain("a chain needs at least one segment"));
        }
        Ok(())
    }

    /// Width of `segments` stitched segments.
    pub fn stitched_width(&self, time_bins: usize) -> usize {
        time_bins + (self.segments - 1) * (time_bins - self.overlap)
    }
}

/// Continues each `prev` to the right. Output columns `[0, O)` equal
/// columns `[W - O, W)` of the corresponding `prev` bit for bit.
pub fn extend_many(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    conds: &[&EmbeddingVector],
    prevs: &[&TraceImage],
    seeds: &[u64],
    spec: &OutpaintSpec,
    opts: &SamplerOptions,
) -> Result<Vec<TraceImage>> {
    if conds.len() != prevs.len() || conds.len() != seeds.len() {
        return Err(Error::domain(
            "extend needs one embedding and one seed per previous segment",
        ));
    }
    let Some(first) = prevs.first() else {
        return Ok(Vec::new());
    };
    let grid = *first.grid();
    spec.validate(grid.time_bins)?;
    if prevs.iter().any(|p| p.grid() != &grid) || !model.grid_matches(&grid) {
        return Err(Error::domain(
            "previous segments must share the denoiser grid",
        ));
    }
    check_sampling(model, conds, opts)?;
    let (w, o) = (grid.time_bins, spec.overlap);
    let shifted: Vec<TraceImage> = prevs.iter().map(|p| shift_left(p, w - o)).collect();
    let known_x0: Vec<Vec<f32>> = shifted.iter().map(scaled_nhwc).collect();

    let mut out = Vec::with_capacity(prevs.len());
    for start in (0..prevs.len()).step_by(opts.batch) {
        let end = (start + opts.batch).min(prevs.len());
        let mut rngs: Vec<ChaCha8Rng> = seeds[start..end]
            .iter()
            .map(|&s| ChaCha8Rng::seed_from_u64(s))
            .collect();
        let known = KnownRegion {
            x0: known_x0[start..end].iter().map(Vec::as_slice).collect(),
            columns: o,
            repeats: spec.resample_repeats,
        };
        let xs = reverse_process(
            model,
            schedule,
            &conds[start..end],
            &mut rngs,
            opts,
            Some(&known),
        );
        for (x, src) in xs.iter().zip(&shifted[start..end]) {
            out.push(overwrite_known(to_trace_image(x, grid), src, o));
        }
    }
    Ok(out)
}

pub fn extend(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    cond: &EmbeddingVector,
    prev: &TraceImage,
    spec: &OutpaintSpec,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<TraceImage> {
    Ok(extend_many(model, schedule, &[cond], &[prev], &[seed], spec, opts)?.remove(0))
}

/// Image whose column `b` is column `b + by` of `image`, zero-padded.
fn shift_left(image: &TraceImage, by: usize) -> TraceImage {
    let g = *image.grid();
    let w = g.time_bins;
    let mut v = vec![0.0; image.values().len()];
    for row in 0..CHANNELS * g.device_count {
        let src = &image.values()[row * w..(row + 1) * w];
        v[row * w..row * w + (w - by)].copy_from_slice(&src[by..]);
    }
    TraceImage::from_values(g, v).expect("values copied from a valid image")
}

fn overwrite_known(mut image: TraceImage, known: &TraceImage, columns: usize) -> TraceImage {
    let g = *image.grid();
    for c in 0..CHANNELS {
        for d in 0..g.device_count {
            for b in 0..columns {
                image.set(c, d, b, known.get(c, d, b));
            }
        }
    }
    image
}

/// A chain: one plain sample followed by `segments - 1` extensions. `conds`
/// holds either one embedding for the whole chain or one per segment.
pub fn generate_chain(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    conds: &[&EmbeddingVector],
    spec: &OutpaintSpec,
    seed: u64,
    grid: &GridSpec,
    opts: &SamplerOptions,
) -> Result<Vec<TraceImage>> {
    generate_chains(
        model,
        schedule,
        &[conds.to_vec()],
        spec,
        &[seed],
        grid,
        opts,
    )
    .map(|mut v| v.remove(0))
}

/// Several independent chains advanced together, one batch per segment.
pub fn generate_chains(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    conds: &[Vec<&EmbeddingVector>],
    spec: &OutpaintSpec,
    seeds: &[u64],
    grid: &GridSpec,
    opts: &SamplerOptions,
) -> Result<Vec<Vec<TraceImage>>> {
    spec.validate(grid.time_bins)?;
    if conds.len() != seeds.len() {
        return Err(Error::domain("one seed per chain is required"));
    }
    for c in conds {
        if c.len() != 1 && c.len() != spec.segments {
            return Err(Error::domain(format!(
                "a chain takes 1 or {} embeddings, got {}",
                spec.segments,
                c.len()
            )));
        }
    }
    let cond_at = |chain: usize, k: usize| conds[chain][k.min(conds[chain].len() - 1)];
    let segment_seed = |chain: usize, k: usize| derive_seed(seeds[chain], &format!("segment/{k}"));
    let first_conds: Vec<&EmbeddingVector> = (0..conds.len()).map(|i| cond_at(i, 0)).collect();
    let first_seeds: Vec<u64> = (0..conds.len()).map(|i| segment_seed(i, 0)).collect();
    let mut chains: Vec<Vec<TraceImage>> =
        sample_many(model, schedule, &first_conds, &first_seeds, grid, opts)?
            .into_iter()
            .map(|img| vec![img])
            .collect();
    for k in 1..spec.segments {
        let cs: Vec<&EmbeddingVector> = (0..conds.len()).map(|i| cond_at(i, k)).collect();
        let ss: Vec<u64> = (0..conds.len()).map(|i| segment_seed(i, k)).collect();
        let prevs: Vec<&TraceImage> = chains
            .iter()
            .map(|c| c.last().expect("non-empty chain"))
            .collect();
        let next = extend_many(model, schedule, &cs, &prevs, &ss, spec, opts)?;
        for (chain, img) in chains.iter_mut().zip(next) {
            chain.push(img);
        }
    }
    Ok(chains)
}

/// Joins segments into one image: the first in full, then columns `[O, W)`
/// of each later one, after checking every overlap bit for bit.
pub fn stitch_images(segments: &[TraceImage], overlap: usize) -> Result<TraceImage> {
    let first = segments
        .first()
        .ok_or_else(|| Error::domain("nothing to stitch"))?;
    let grid = *first.grid();
    let w = grid.time_bins;
    if overlap == 0 || overlap >= w {
        return Err(Error::domain(format!(
            "overlap {overlap} must lie in [1, {w})"
        )));
    }
    for (k, pair) in segments.windows(2).enumerate() {
        if pair[1].grid() != &grid {
            return Err(Error::domain(format!(
                "segment {} has a different grid",
                k + 1
            )));
        }
        let tail = pair[0].columns(w - overlap, w);
        let head = pair[1].columns(0, overlap);
        let same = tail
            .iter()
            .zip(&head)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::OverlapMismatch { index: k + 1 });
        }
    }
    let total = w + (segments.len() - 1) * (w - overlap);
    let out_grid = grid.with_time_bins(total);
    let mut values = Vec::with_capacity(out_grid.len());
    for row in 0..CHANNELS * grid.device_count {
        for (k, seg) in segments.iter().enumerate() {
            let start = if k == 0 { 0 } else { overlap };
            values.extend_from_slice(&seg.values()[row * w + start..(row + 1) * w]);
        }
    }
    TraceImage::from_values(out_grid, values)
}

/// Decodes the stitched image over `bin_width * total_columns`.
pub fn stitch(
    segments: &[TraceImage],
    overlap: usize,
    threshold: f32,
    halo_amplitude: f32,
) -> Result<Trace> {
    let image = stitch_images(segments, overlap)?;
    decode(&image, threshold, halo_amplitude)
}

/// Mean absolute difference between adjacent counts over the mean count.
pub fn rate_drift(counts: &[usize]) -> f64 {
    if counts.len() < 2 {
        return 0.0;
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let diffs: f64 = counts
        .windows(2)
        .map(|p| (p[0] as f64 - p[1] as f64).abs())
        .sum();
    diffs / (counts.len() - 1) as f64 / mean
}
