//! Conditional denoising diffusion over trace images.
//!
//! The denoiser predicts the injected noise. Training draws `t` uniformly,
//! weights the squared error towards event pixels and their halo, and
//! swaps the conditioning embedding for a learned null vector with a small
//! probability so guided sampling is available later.

use std::path::Path;

use ditto_nn::{Adam, AdamConfig, Conv2d, Graph, Linear, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::chip::{lr_at, EmbeddingVector};
use crate::error::{Error, Result};
use crate::raster::{halo, AugmentSpec, GridSpec, TraceImage, CHANNELS};
use crate::seed::derive_seed;

const CHECKPOINT_KIND: &str = "diffusion";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear-beta schedule. Steps are 1-based; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            timesteps,
            beta_start,
            beta_end,
        } = spec;
        if timesteps < 2 {
            return Err(Error::config("diffusion needs at least 2 timesteps"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::config(
                "betas must satisfy 0 < beta_start < beta_end < 1",
            ));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            spec,
            betas,
            alpha_bars,
        })
    }

    pub fn linear_default() -> Self {
        Self::new(ScheduleSpec::default()).expect("default schedule is valid")
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn timesteps(&self) -> usize {
        self.spec.timesteps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `steps` evenly spaced timesteps from `T` down to 1, without repeats.
    pub fn strided(&self, steps: usize) -> Vec<usize> {
        let t_max = self.timesteps();
        let steps = steps.clamp(1, t_max);
        let mut ts: Vec<usize> = (0..steps)
            .map(|k| {
                if steps == 1 {
                    t_max
                } else {
                    1 + ((t_max - 1) as f64 * k as f64 / (steps - 1) as f64).round() as usize
                }
            })
            .collect();
        ts.dedup();
        ts.reverse();
        ts
    }
}

/// Image mapped to `[-1, 1]` by `y = 2x - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledImage {
    grid: GridSpec,
    values: Vec<f32>,
}

impl ScaledImage {
    pub fn from_image(image: &TraceImage) -> Self {
        Self {
            grid: *image.grid(),
            values: image.values().iter().map(|&x| 2.0 * x - 1.0).collect(),
        }
    }

    /// Clamps to `[-1, 1]` and maps back to `[0, 1]`.
    pub fn to_image(&self) -> TraceImage {
        let v = self
            .values
            .iter()
            .map(|&y| (y.clamp(-1.0, 1.0) + 1.0) * 0.5)
            .collect();
        TraceImage::from_values(self.grid, v).expect("clamped values lie in [0, 1]")
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample(
    x0: &ScaledImage,
    t: usize,
    eps: &[f32],
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    if t == 0 || t > schedule.timesteps() {
        return Err(Error::domain(format!(
            "timestep {t} outside 1..={}",
            schedule.timesteps()
        )));
    }
    if eps.len() != x0.values.len() {
        return Err(Error::domain(format!(
            "noise has {} values, image has {}",
            eps.len(),
            x0.values.len()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(x0
        .values
        .iter()
        .zip(eps)
        .map(|(&x, &e)| a * x + s * e)
        .collect())
}

/// `1 + lambda * halo(presence)` with a unit-amplitude halo.
pub fn sparsity_weight_map(presence: &TraceImage, lambda: f32, augment: &AugmentSpec) -> Vec<f32> {
    if lambda == 0.0 {
        return vec![1.0; presence.values().len()];
    }
    halo(presence, augment, 1.0)
        .values()
        .iter()
        .map(|&h| 1.0 + lambda * h)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub device_count: usize,
    pub time_bins: usize,
    pub embed_dim: usize,
    pub base_width: usize,
    pub time_dim: usize,
    pub hidden: usize,
}

impl DenoiserArch {
    pub fn new(device_count: usize, time_bins: usize, embed_dim: usize, base_width: usize) -> Self {
        Self {
            device_count,
            time_bins,
            embed_dim,
            base_width,
            time_dim: 64,
            hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_count == 0 || self.embed_dim == 0 || self.base_width == 0 || self.hidden == 0
        {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        if !self.time_bins.is_multiple_of(2) {
            return Err(Error::config("denoiser needs an even number of time bins"));
        }
        if !self.time_dim.is_multiple_of(2) || self.time_dim == 0 {
            return Err(Error::config("time embedding width must be even"));
        }
        Ok(())
    }

    /// Vertical pooling factor; odd device counts are only pooled in time.
    fn pool_rows(&self) -> usize {
        if self.device_count.is_multiple_of(2) {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    time: Linear,
    cond: Linear,
    rows: usize,
    width: usize,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rows: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv2d::same3(store, &format!("{name}.conv1"), cin, cout, 1.0, rng);
        let conv2 = Conv2d::same3(store, &format!("{name}.conv2"), cout, cout, 0.0, rng);
        let skip = (cin != cout).then(|| {
            Conv2d::new(
                store,
                &format!("{name}.skip"),
                cin,
                cout,
                (1, 1),
                (1, 1),
                (0, 0),
                1.0,
                rng,
            )
        });
        let time = Linear::new(store, &format!("{name}.time"), hidden, cout, 1.0, rng);
        let cond = Linear::new(
            store,
            &format!("{name}.cond"),
            hidden,
            rows * cout,
            1.0,
            rng,
        );
        Self {
            conv1,
            conv2,
            skip,
            time,
            cond,
            rows,
            width: cout,
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, temb: Var, cemb: Var) -> Var {
        let n = g.shape(x)[0];
        let h = g.silu(x);
        let h = self.conv1.forward(g, h);
        let tb = self.time.forward(g, temb);
        let tb = g.reshape(tb, [n, 1, self.width]);
        let cb = self.cond.forward(g, cemb);
        let cb = g.reshape(cb, [n, self.rows, self.width]);
        let h = g.add_row_bias(h, tb);
        let h = g.add_row_bias(h, cb);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.skip {
            Some(s) => s.forward(g, x),
            None => x,
        };
        g.add(skip, h)
    }
}

#[derive(Clone, Debug)]
struct UNet {
    time_fc: [Linear; 2],
    cond_fc: Linear,
    null: ParamId,
    conv_in: Conv2d,
    down: ResBlock,
    mid: [ResBlock; 2],
    up: [ResBlock; 2],
    conv_out: Conv2d,
}

impl UNet {
    fn build(arch: &DenoiserArch, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (f, hd) = (arch.base_width, arch.hidden);
        let rows0 = arch.device_count;
        let rows1 = rows0 / arch.pool_rows();
        let time_fc = [
            Linear::new(store, "time.fc0", arch.time_dim, hd, 1.0, rng),
            Linear::new(store, "time.fc1", hd, hd, 1.0, rng),
        ];
        let cond_fc = Linear::new(store, "cond.fc0", arch.embed_dim, hd, 1.0, rng);
        let bound = 1.0 / (arch.embed_dim as f32).sqrt();
        let null = store.add_uniform("cond.null", [1, arch.embed_dim], bound, rng);
        let conv_in = Conv2d::same3(store, "conv_in", CHANNELS, f, 1.0, rng);
        let down = ResBlock::new(store, "down0", f, f, rows0, hd, rng);
        let mid = [
            ResBlock::new(store, "mid0", f, 2 * f, rows1, hd, rng),
            ResBlock::new(store, "mid1", 2 * f, 2 * f, rows1, hd, rng),
        ];
        let up = [
            ResBlock::new(store, "up0", 3 * f, f, rows0, hd, rng),
            ResBlock::new(store, "up1", f, f, rows0, hd, rng),
        ];
        let conv_out = Conv2d::same3(store, "conv_out", f, CHANNELS, 0.0, rng);
        Self {
            time_fc,
            cond_fc,
            null,
            conv_in,
            down,
            mid,
            up,
            conv_out,
        }
    }
}

/// Sinusoidal features of the timestep, `[sin(t f_i), cos(t f_i)]`.
fn timestep_features(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let mut cos = Vec::with_capacity(half);
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            data.push(a.sin() as f32);
            cos.push(a.cos() as f32);
        }
        data.extend(cos);
    }
    Tensor::new([ts.len(), dim], data)
}

/// U-shaped noise predictor `f(x_t, t, c)`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    arch: DenoiserArch,
    schedule: ScheduleSpec,
    store: ParamStore,
    net: UNet,
    trained_steps: usize,
}

impl Denoiser {
    pub fn new(arch: DenoiserArch, schedule: ScheduleSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        NoiseSchedule::new(schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = UNet::build(&arch, &mut store, &mut rng);
        Ok(Self {
            arch,
            schedule,
            store,
            net,
            trained_steps: 0,
        })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.schedule).expect("validated at construction")
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    pub fn grid_matches(&self, grid: &GridSpec) -> bool {
        grid.device_count == self.arch.device_count && grid.time_bins == self.arch.time_bins
    }

    /// `x: [N, D, W, C]` in NHWC, `cond: [N, E]`, rows flagged in `null`
    /// replaced by the learned null embedding.
    fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        ts: &[usize],
        cond: Tensor,
        null: Vec<bool>,
    ) -> Var {
        let net = &self.net;
        let t = g.input(timestep_features(ts, self.arch.time_dim));
        let t = net.time_fc[0].forward(g, t);
        let t = g.silu(t);
        let t = net.time_fc[1].forward(g, t);
        let temb = g.silu(t);

        let c = g.input(cond);
        let c = if null.iter().any(|&m| m) {
            let nv = g.param(net.null);
            g.select_rows(c, nv, null)
        } else {
            c
        };
        let c = net.cond_fc.forward(g, c);
        let cemb = g.silu(c);

        let h0 = net.conv_in.forward(g, x);
        let a = net.down.forward(g, h0, temb, cemb);
        let p = g.avg_pool(a, self.arch.pool_rows(), 2);
        let b = net.mid[0].forward(g, p, temb, cemb);
        let b = net.mid[1].forward(g, b, temb, cemb);
        let u = g.upsample(b, self.arch.pool_rows(), 2);
        let cat = g.concat(u, a);
        let d = net.up[0].forward(g, cat, temb, cemb);
        let d = net.up[1].forward(g, d, temb, cemb);
        let d = g.silu(d);
        net.conv_out.forward(g, d)
    }

    /// Noise prediction for a batch of NHWC inputs, without gradients.
    pub(crate) fn predict(
        &self,
        x: &[f32],
        ts: &[usize],
        cond: &[f32],
        null: Vec<bool>,
    ) -> Vec<f32> {
        let n = ts.len();
        let (h, w) = (self.arch.device_count, self.arch.time_bins);
        let mut g = Graph::new(&self.store);
        let xv = g.input(Tensor::new([n, h, w, CHANNELS], x.to_vec()));
        let out = self.forward(
            &mut g,
            xv,
            ts,
            Tensor::new([n, self.arch.embed_dim], cond.to_vec()),
            null,
        );
        g.value(out).data().to_vec()
    }

    pub fn save(&self, manifest_path: &Path, spec_hash: &str) -> Result<()> {
        let meta = serde_json::json!({
            "arch": self.arch,
            "schedule": self.schedule,
            "embed_dim": self.arch.embed_dim,
            "device_count": self.arch.device_count,
            "trained_steps": self.trained_steps,
        });
        checkpoint::save(manifest_path, CHECKPOINT_KIND, spec_hash, meta, &self.store)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (manifest, loaded) = checkpoint::load(manifest_path, CHECKPOINT_KIND)?;
        let field = |k: &str| {
            manifest
                .meta
                .get(k)
                .cloned()
                .unwrap_or(serde_json::Value::Null)
        };
        let arch: DenoiserArch =
            serde_json::from_value(field("arch")).map_err(|e| Error::json(manifest_path, e))?;
        let schedule: ScheduleSpec =
            serde_json::from_value(field("schedule")).map_err(|e| Error::json(manifest_path, e))?;
        let trained_steps: usize = serde_json::from_value(field("trained_steps"))
            .map_err(|e| Error::json(manifest_path, e))?;
        let mut model = Self::new(arch, schedule, 0)?;
        checkpoint::restore_into(&mut model.store, &loaded, manifest_path)?;
        model.trained_steps = trained_steps;
        Ok(model)
    }
}

/// `[C, H, W]` values to NHWC.
fn to_nhwc(values: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; values.len()];
    for c in 0..CHANNELS {
        for d in 0..h {
            for b in 0..w {
                out[(d * w + b) * CHANNELS + c] = values[(c * h + d) * w + b];
            }
        }
    }
    out
}

fn from_nhwc(values: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; values.len()];
    for c in 0..CHANNELS {
        for d in 0..h {
            for b in 0..w {
                out[(c * h + d) * w + b] = values[(d * w + b) * CHANNELS + c];
            }
        }
    }
    out
}

/// One training example: the augmented image, its pre-augmentation
/// presence image and the CHIP embedding of its configuration.
#[derive(Clone, Debug)]
pub struct DiffusionExample {
    pub image: TraceImage,
    pub presence: TraceImage,
    pub cond: EmbeddingVector,
}

/// Weighted noise-prediction loss of one example at a seeded `(t, eps)`.
pub fn diffusion_loss(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &ScaledImage,
    cond: &EmbeddingVector,
    weight: &[f32],
    seed: u64,
) -> Result<f64> {
    if !model.grid_matches(x0.grid()) || weight.len() != x0.values.len() {
        return Err(Error::domain(
            "image, weight map and denoiser shapes differ",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=schedule.timesteps());
    let eps: Vec<f32> = (0..x0.values.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let xt = forward_sample(x0, t, &eps, schedule)?;
    let (h, w) = (model.arch.device_count, model.arch.time_bins);
    let pred = from_nhwc(
        &model.predict(&to_nhwc(&xt, h, w), &[t], cond.values(), vec![false]),
        h,
        w,
    );
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ((&e, &f), &wv) in eps.iter().zip(&pred).zip(weight) {
        let d = (e - f) as f64;
        num += wv as f64 * d * d;
        den += wv as f64;
    }
    let loss = num / den;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, loss });
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionHyper {
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f32,
    pub warmup_steps: usize,
    pub cond_dropout: f64,
    pub sparsity_lambda: f32,
    pub base_width: usize,
    /// Exponential moving average of the weights; `None` keeps the raw ones.
    pub ema_decay: Option<f32>,
    pub probe_every: usize,
    pub seed: u64,
}

impl Default for DiffusionHyper {
    fn default() -> Self {
        Self {
            batch: 16,
            steps: 10_000,
            learning_rate: 1e-3,
            warmup_steps: 200,
            cond_dropout: 0.1,
            sparsity_lambda: 4.0,
            base_width: 32,
            ema_decay: Some(0.999),
            probe_every: 250,
            seed: 0,
        }
    }
}

impl DiffusionHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.steps == 0 || self.base_width == 0 {
            return Err(Error::config(
                "diffusion batch, steps and base_width must be positive",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("diffusion learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::config("cond_dropout must lie in [0, 1]"));
        }
        if !(self.sparsity_lambda >= 0.0 && self.sparsity_lambda.is_finite()) {
            return Err(Error::config("sparsity_lambda must be finite and >= 0"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config("ema_decay must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionTraining {
    pub denoiser: Denoiser,
    /// Training loss of every step.
    pub curve: Vec<(usize, f64)>,
    pub probe_curve: Vec<(usize, f64)>,
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
}

struct Batch {
    x: Vec<f32>,
    ts: Vec<usize>,
    cond: Vec<f32>,
    null: Vec<bool>,
    eps: Vec<f32>,
    weight: Vec<f32>,
}

struct Prepared {
    x0: Vec<f32>,
    weight: Vec<f32>,
}

fn make_batch(
    idx: &[usize],
    prepared: &[Prepared],
    corpus: &[DiffusionExample],
    schedule: &NoiseSchedule,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let per = prepared[0].x0.len();
    let mut b = Batch {
        x: Vec::with_capacity(idx.len() * per),
        ts: Vec::with_capacity(idx.len()),
        cond: Vec::new(),
        null: Vec::with_capacity(idx.len()),
        eps: Vec::with_capacity(idx.len() * per),
        weight: Vec::with_capacity(idx.len() * per),
    };
    for &i in idx {
        let t = rng.random_range(1..=schedule.timesteps());
        let ab = schedule.alpha_bar(t);
        let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let p = &prepared[i];
        for &x in &p.x0 {
            let e: f32 = rng.sample(StandardNormal);
            b.eps.push(e);
            b.x.push(sa * x + sn * e);
        }
        b.weight.extend_from_slice(&p.weight);
        b.ts.push(t);
        b.cond.extend_from_slice(corpus[i].cond.values());
        b.null.push(dropout > 0.0 && rng.random_bool(dropout));
    }
    b
}

fn batch_loss(model: &Denoiser, b: &Batch, grads: bool) -> (f64, Option<ditto_nn::Gradients>) {
    let n = b.ts.len();
    let (h, w) = (model.arch.device_count, model.arch.time_bins);
    let mut g = Graph::new(&model.store);
    let x = g.input(Tensor::new([n, h, w, CHANNELS], b.x.clone()));
    let cond = Tensor::new([n, model.arch.embed_dim], b.cond.clone());
    let pred = model.forward(&mut g, x, &b.ts, cond, b.null.clone());
    let loss = g.weighted_mse(pred, b.eps.clone(), b.weight.clone());
    let value = g.value(loss).item() as f64;
    let grads = grads.then(|| g.backward(loss));
    (value, grads)
}

pub fn train_diffusion(
    corpus: &[DiffusionExample],
    schedule: &NoiseSchedule,
    augment: &AugmentSpec,
    hyper: &DiffusionHyper,
) -> Result<DiffusionTraining> {
    hyper.validate()?;
    let first = corpus
        .first()
        .ok_or_else(|| Error::domain("empty diffusion corpus"))?;
    let grid = *first.image.grid();
    let embed_dim = first.cond.dim();
    for ex in corpus {
        if ex.image.grid() != &grid || ex.presence.grid() != &grid || ex.cond.dim() != embed_dim {
            return Err(Error::domain(
                "diffusion corpus mixes grids or embedding sizes",
            ));
        }
    }
    let (h, w) = (grid.device_count, grid.time_bins);
    let arch = DenoiserArch::new(h, w, embed_dim, hyper.base_width);
    let mut model = Denoiser::new(
        arch,
        *schedule.spec(),
        derive_seed(hyper.seed, "diffusion/init"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, "diffusion/batches"));

    // Each image's weights are divided by their mean so the batch loss is
    // the average of per-image normalised losses.
    let prepared: Vec<Prepared> = corpus
        .iter()
        .map(|ex| {
            let x0 = to_nhwc(ScaledImage::from_image(&ex.image).values(), h, w);
            let wm = to_nhwc(
                &sparsity_weight_map(&ex.presence, hyper.sparsity_lambda, augment),
                h,
                w,
            );
            let mean = wm.iter().map(|&v| v as f64).sum::<f64>() / wm.len() as f64;
            Prepared {
                x0,
                weight: wm.iter().map(|&v| (v as f64 / mean) as f32).collect(),
            }
        })
        .collect();

    let mut probe_rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, "diffusion/probe"));
    let probe_idx: Vec<usize> = {
        let mut all: Vec<usize> = (0..corpus.len()).collect();
        all.shuffle(&mut probe_rng);
        all.truncate(hyper.batch.max(8).min(corpus.len()));
        all
    };
    let probe = make_batch(&probe_idx, &prepared, corpus, schedule, 0.0, &mut probe_rng);
    let initial = batch_loss(&model, &probe, false).0;
    let mut probe_curve = vec![(0, initial)];
    let mut curve = Vec::with_capacity(hyper.steps);

    let mut opt = Adam::new(
        &model.store,
        AdamConfig {
            lr: hyper.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut ema = hyper.ema_decay.map(|_| model.store.clone());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut strikes = 0;
    for step in 0..hyper.steps {
        let mut idx = Vec::with_capacity(hyper.batch);
        while idx.len() < hyper.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = make_batch(
            &idx,
            &prepared,
            corpus,
            schedule,
            hyper.cond_dropout,
            &mut rng,
        );
        let (loss, grads) = batch_loss(&model, &batch, true);
        let grads = grads.expect("requested");
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        curve.push((step + 1, loss));
        opt.set_lr(lr_at(
            step,
            hyper.steps,
            hyper.warmup_steps,
            hyper.learning_rate,
        ));
        opt.step(&mut model.store, &grads);
        if let (Some(e), Some(decay)) = (ema.as_mut(), hyper.ema_decay) {
            // Short runs would otherwise stay close to the initial weights.
            let d = decay.min((1 + step) as f32 / (10 + step) as f32);
            for id in model.store.ids() {
                let src = model.store.get(id).data();
                for (m, &p) in e.get_mut(id).data_mut().iter_mut().zip(src) {
                    *m = d * *m + (1.0 - d) * p;
                }
            }
        }

        let done = step + 1;
        if hyper.probe_every > 0 && done % hyper.probe_every == 0 {
            let p = batch_loss(&model, &probe, false).0;
            if !p.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss: p });
            }
            log::debug!("diffusion step {done}: loss {loss:.4}, probe {p:.4}");
            probe_curve.push((done, p));
            strikes = if p > 2.0 * initial { strikes + 1 } else { 0 };
            if strikes >= 3 {
                return Err(Error::Diverged {
                    step: done,
                    probe_loss: p,
                    initial,
                });
            }
        }
    }
    if let Some(e) = ema {
        model.store = e;
    }
    model.trained_steps = hyper.steps;
    let final_probe_loss = batch_loss(&model, &probe, false).0;
    Ok(DiffusionTraining {
        denoiser: model,
        curve,
        probe_curve,
        initial_probe_loss: initial,
        final_probe_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerOptions {
    /// Classifier-free guidance scale `s >= 1`; 1 disables guidance.
    pub guidance: f32,
    /// Number of strided reverse steps.
    pub steps: usize,
    /// Images denoised together.
    pub batch: usize,
    /// Condition every pass on the learned null embedding instead.
    pub unconditional: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            guidance: 1.0,
            steps: 100,
            batch: 25,
            unconditional: false,
        }
    }
}

impl SamplerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance >= 1.0 && self.guidance.is_finite()) {
            return Err(Error::config("guidance scale must be >= 1"));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::config("sampler steps and batch must be positive"));
        }
        Ok(())
    }
}

/// Columns `[0, columns)` pinned to known scaled values during sampling.
pub(crate) struct KnownRegion<'a> {
    /// Per sample, NHWC scaled values of the full image; only the known
    /// columns are read.
    pub x0: Vec<&'a [f32]>,
    pub columns: usize,
    pub repeats: usize,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Strided ancestral sampler over a batch, returning NHWC scaled values.
/// Every sample draws its noise from its own generator.
pub(crate) fn reverse_process(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    conds: &[&EmbeddingVector],
    rngs: &mut [ChaCha8Rng],
    opts: &SamplerOptions,
    known: Option<&KnownRegion<'_>>,
) -> Vec<Vec<f32>> {
    let (h, w) = (model.arch.device_count, model.arch.time_bins);
    let per = h * w * CHANNELS;
    let n = conds.len();
    let ts = schedule.strided(opts.steps);
    let guided = opts.guidance > 1.0 && !opts.unconditional;
    let cond: Vec<f32> = conds
        .iter()
        .flat_map(|c| c.values().iter().copied())
        .collect();
    let known_col = |i: usize| (i / CHANNELS) % w;

    let mut xs: Vec<Vec<f32>> = rngs.iter_mut().map(|r| gaussian(r, per)).collect();
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let beta = 1.0 - ab_t / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let c1 = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).max(0.0).sqrt();
        let repeats = known.map_or(1, |kr| kr.repeats.max(1));
        for r in 0..repeats {
            let flat: Vec<f32> = xs.concat();
            let eps = if guided {
                let mut x2 = flat.clone();
                x2.extend_from_slice(&flat);
                let mut c2 = cond.clone();
                c2.extend_from_slice(&cond);
                let mut null = vec![false; n];
                null.extend(std::iter::repeat_n(true, n));
                let out = model.predict(&x2, &vec![t; 2 * n], &c2, null);
                let (fc, fnull) = out.split_at(n * per);
                let s = opts.guidance;
                fc.iter()
                    .zip(fnull)
                    .map(|(&a, &b)| (1.0 - s) * b + s * a)
                    .collect::<Vec<f32>>()
            } else {
                model.predict(&flat, &vec![t; n], &cond, vec![opts.unconditional; n])
            };
            for (i, (x, rng)) in xs.iter_mut().zip(rngs.iter_mut()).enumerate() {
                let e = &eps[i * per..(i + 1) * per];
                let noise = if t_prev > 0 {
                    gaussian(rng, per)
                } else {
                    Vec::new()
                };
                for j in 0..per {
                    let xt = x[j] as f64;
                    let x0 =
                        ((xt - (1.0 - ab_t).sqrt() * e[j] as f64) / ab_t.sqrt()).clamp(-1.0, 1.0);
                    let mut v = c0 * x0 + c1 * xt;
                    if t_prev > 0 {
                        v += sigma * noise[j] as f64;
                    }
                    x[j] = v as f32;
                }
                if let Some(kr) = known {
                    let (sa, sn) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
                    let known_x0 = kr.x0[i];
                    let fresh = if t_prev > 0 {
                        gaussian(rng, per)
                    } else {
                        vec![0.0; per]
                    };
                    for j in 0..per {
                        if known_col(j) < kr.columns {
                            x[j] = sa * known_x0[j] + sn * fresh[j];
                        }
                    }
                    // Jump back to the current noise level for another pass.
                    if r + 1 < repeats && t_prev < t {
                        let a = (ab_t / ab_prev).sqrt() as f32;
                        let s = (1.0 - ab_t / ab_prev).max(0.0).sqrt() as f32;
                        let z = gaussian(rng, per);
                        for j in 0..per {
                            x[j] = a * x[j] + s * z[j];
                        }
                    }
                }
            }
        }
    }
    xs
}

pub(crate) fn check_sampling(
    model: &Denoiser,
    conds: &[&EmbeddingVector],
    opts: &SamplerOptions,
) -> Result<()> {
    opts.validate()?;
    if model.trained_steps == 0 {
        return Err(Error::domain("denoiser has not been trained"));
    }
    if let Some(c) = conds.iter().find(|c| c.dim() != model.arch.embed_dim) {
        return Err(Error::domain(format!(
            "conditioning embedding has {} values, denoiser expects {}",
            c.dim(),
            model.arch.embed_dim
        )));
    }
    Ok(())
}

pub(crate) fn to_trace_image(values: &[f32], grid: GridSpec) -> TraceImage {
    let chw = from_nhwc(values, grid.device_count, grid.time_bins);
    ScaledImage { grid, values: chw }.to_image()
}

pub(crate) fn scaled_nhwc(image: &TraceImage) -> Vec<f32> {
    let g = image.grid();
    to_nhwc(
        ScaledImage::from_image(image).values(),
        g.device_count,
        g.time_bins,
    )
}

/// Draws one image per `(cond, seed)` pair.
pub fn sample_many(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    conds: &[&EmbeddingVector],
    seeds: &[u64],
    grid: &GridSpec,
    opts: &SamplerOptions,
) -> Result<Vec<TraceImage>> {
    check_sampling(model, conds, opts)?;
    if conds.len() != seeds.len() {
        return Err(Error::domain(
            "one seed per conditioning embedding is required",
        ));
    }
    if !model.grid_matches(grid) {
        return Err(Error::domain("grid does not match the denoiser"));
    }
    let mut out = Vec::with_capacity(conds.len());
    for (cs, ss) in conds.chunks(opts.batch).zip(seeds.chunks(opts.batch)) {
        let mut rngs: Vec<ChaCha8Rng> = ss.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let xs = reverse_process(model, schedule, cs, &mut rngs, opts, None);
        out.extend(xs.iter().map(|x| to_trace_image(x, *grid)));
    }
    Ok(out)
}

pub fn sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    cond: &EmbeddingVector,
    seed: u64,
    grid: &GridSpec,
    opts: &SamplerOptions,
) -> Result<TraceImage> {
    Ok(sample_many(model, schedule, &[cond], &[seed], grid, opts)?.remove(0))
}
