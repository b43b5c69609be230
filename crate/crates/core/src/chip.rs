//! Contrastive alignment of configuration vectors and trace images.

use std::path::Path;

use ditto_nn::{Adam, AdamConfig, Conv2d, Graph, Linear, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::raster::{TraceImage, CHANNELS};
use crate::seed::derive_seed;
use crate::trace::{config_vector, WorkloadConfig};

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const MIN_TEMPERATURE: f64 = 1e-3;
pub const MAX_TEMPERATURE: f64 = 100.0;
pub const INITIAL_TEMPERATURE: f64 = 0.07;
const CHECKPOINT_KIND: &str = "chip";

/// Unit-norm embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalises `values`; fails on a zero or non-finite vector.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        let norm = values
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::domain(
                "cannot normalise a zero or non-finite vector",
            ));
        }
        Ok(Self(
            values
                .into_iter()
                .map(|v| (v as f64 / norm) as f32)
                .collect(),
        ))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine similarity, which for unit vectors is the dot product.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipArch {
    pub device_count: usize,
    pub time_bins: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub conv_widths: [usize; 3],
}

impl ChipArch {
    pub fn new(device_count: usize, time_bins: usize, embed_dim: usize) -> Self {
        Self {
            device_count,
            time_bins,
            embed_dim,
            hidden: 128,
            conv_widths: [32, 64, 64],
        }
    }

    pub fn config_dim(&self) -> usize {
        self.device_count + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_count == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::config("chip dimensions must be positive"));
        }
        if self.time_bins < 8 {
            return Err(Error::config(
                "chip image encoder needs at least 8 time bins",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    cfg: [Linear; 3],
    convs: [Conv2d; 3],
    proj: Linear,
    log_temperature: ParamId,
}

impl Layers {
    fn build(arch: &ChipArch, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let h = arch.hidden;
        let cfg = [
            Linear::new(store, "config.fc0", arch.config_dim(), h, 1.0, rng),
            Linear::new(store, "config.fc1", h, h, 1.0, rng),
            Linear::new(store, "config.fc2", h, arch.embed_dim, 1.0, rng),
        ];
        let [w0, w1, w2] = arch.conv_widths;
        let down = |store: &mut ParamStore, name: &str, cin, cout, rng: &mut ChaCha8Rng| {
            Conv2d::new(store, name, cin, cout, (3, 3), (1, 2), (1, 1), 1.0, rng)
        };
        let convs = [
            down(store, "image.conv0", CHANNELS, w0, rng),
            down(store, "image.conv1", w0, w1, rng),
            down(store, "image.conv2", w1, w2, rng),
        ];
        let proj = Linear::new(
            store,
            "image.proj",
            arch.device_count * w2,
            arch.embed_dim,
            1.0,
            rng,
        );
        let log_temperature = store.add(
            "log_temperature",
            Tensor::scalar(INITIAL_TEMPERATURE.ln() as f32),
        );
        Self {
            cfg,
            convs,
            proj,
            log_temperature,
        }
    }
}

/// Config MLP and convolutional image encoder sharing a unit sphere.
#[derive(Clone, Debug)]
pub struct ChipModel {
    arch: ChipArch,
    store: ParamStore,
    layers: Layers,
    /// Divisor applied to request counts in config vectors.
    request_scale: f64,
}

impl ChipModel {
    pub fn new(arch: ChipArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = Layers::build(&arch, &mut store, &mut rng);
        Ok(Self {
            arch,
            store,
            layers,
            request_scale: 1.0,
        })
    }

    pub fn arch(&self) -> &ChipArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn request_scale(&self) -> f64 {
        self.request_scale
    }

    pub fn set_request_scale(&mut self, scale: f64) {
        self.request_scale = scale;
    }

    /// Embeds a configuration through [`config_vector`] with the stored scale.
    pub fn embed_workload(&self, config: &WorkloadConfig) -> Result<EmbeddingVector> {
        config.validate()?;
        self.embed_config(&config_vector(config, self.request_scale))
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn temperature(&self) -> f64 {
        (self.store.get(self.layers.log_temperature).item() as f64)
            .exp()
            .clamp(MIN_TEMPERATURE, MAX_TEMPERATURE)
    }

    fn check_config(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.arch.config_dim() {
            return Err(Error::domain(format!(
                "config vector has length {}, expected {}",
                v.len(),
                self.arch.config_dim()
            )));
        }
        Ok(())
    }

    fn check_image(&self, img: &TraceImage) -> Result<()> {
        let g = img.grid();
        if g.device_count != self.arch.device_count || g.time_bins != self.arch.time_bins {
            return Err(Error::domain(format!(
                "image is {}x{}, expected {}x{}",
                g.device_count, g.time_bins, self.arch.device_count, self.arch.time_bins
            )));
        }
        Ok(())
    }

    fn config_forward(&self, g: &mut Graph<'_>, configs: &[&[f64]]) -> Result<Var> {
        for c in configs {
            self.check_config(c)?;
        }
        let data = configs
            .iter()
            .flat_map(|c| c.iter().map(|&v| v as f32))
            .collect();
        let mut x = g.input(Tensor::new([configs.len(), self.arch.config_dim()], data));
        for (i, layer) in self.layers.cfg.iter().enumerate() {
            x = layer.forward(g, x);
            if i + 1 < self.layers.cfg.len() {
                x = g.silu(x);
            }
        }
        Ok(g.l2_normalize(x))
    }

    fn image_forward(&self, g: &mut Graph<'_>, images: &[&TraceImage]) -> Result<Var> {
        for img in images {
            self.check_image(img)?;
        }
        let (h, w) = (self.arch.device_count, self.arch.time_bins);
        let x = g.input(images_nhwc(images, h, w));
        let mut x = x;
        for conv in &self.layers.convs {
            x = conv.forward(g, x);
            x = g.silu(x);
        }
        let pooled = g.mean_w(x);
        let flat = g.reshape(pooled, [images.len(), h * self.arch.conv_widths[2]]);
        let e = self.layers.proj.forward(g, flat);
        Ok(g.l2_normalize(e))
    }

    fn logits(&self, g: &mut Graph<'_>, configs: &[&[f64]], images: &[&TraceImage]) -> Result<Var> {
        if configs.len() != images.len() {
            return Err(Error::domain(format!(
                "{} configs but {} images in the batch",
                configs.len(),
                images.len()
            )));
        }
        if configs.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let ec = self.config_forward(g, configs)?;
        let ei = self.image_forward(g, images)?;
        let raw = g.matmul_ex(ec, ei, true);
        let lt = g.param(self.layers.log_temperature);
        Ok(g.div_by_exp(
            raw,
            lt,
            MIN_TEMPERATURE.ln() as f32,
            MAX_TEMPERATURE.ln() as f32,
        ))
    }

    pub fn embed_config(&self, config: &[f64]) -> Result<EmbeddingVector> {
        Ok(self.embed_configs(&[config])?.remove(0))
    }

    pub fn embed_configs(&self, configs: &[&[f64]]) -> Result<Vec<EmbeddingVector>> {
        if configs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.store);
        let e = self.config_forward(&mut g, configs)?;
        Ok(rows(g.value(e), self.arch.embed_dim))
    }

    pub fn embed_image(&self, image: &TraceImage) -> Result<EmbeddingVector> {
        Ok(self.embed_images(&[image])?.remove(0))
    }

    pub fn embed_images(&self, images: &[&TraceImage]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new(&self.store);
            let e = self.image_forward(&mut g, chunk)?;
            out.extend(rows(g.value(e), self.arch.embed_dim));
        }
        Ok(out)
    }

    pub fn save(&self, manifest_path: &Path, spec_hash: &str) -> Result<()> {
        let meta = serde_json::json!({
            "arch": self.arch,
            "embed_dim": self.arch.embed_dim,
            "device_count": self.arch.device_count,
            "request_scale": self.request_scale,
        });
        checkpoint::save(manifest_path, CHECKPOINT_KIND, spec_hash, meta, &self.store)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (manifest, loaded) = checkpoint::load(manifest_path, CHECKPOINT_KIND)?;
        let arch: ChipArch = serde_json::from_value(manifest.meta["arch"].clone())
            .map_err(|e| Error::json(manifest_path, e))?;
        let mut model = Self::new(arch, 0)?;
        checkpoint::restore_into(&mut model.store, &loaded, manifest_path)?;
        model.request_scale = manifest.meta["request_scale"].as_f64().unwrap_or(1.0);
        Ok(model)
    }
}

fn rows(t: &Tensor, e: usize) -> Vec<EmbeddingVector> {
    t.data()
        .chunks_exact(e)
        .map(|r| EmbeddingVector(r.to_vec()))
        .collect()
}

/// `(c, d, b)` images to an NHWC tensor `[N, D, W, C]`.
pub(crate) fn images_nhwc(images: &[&TraceImage], h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0f32; images.len() * h * w * CHANNELS];
    for (n, img) in images.iter().enumerate() {
        let v = img.values();
        let base = n * h * w * CHANNELS;
        for c in 0..CHANNELS {
            for d in 0..h {
                for b in 0..w {
                    data[base + (d * w + b) * CHANNELS + c] = v[(c * h + d) * w + b];
                }
            }
        }
    }
    Tensor::new([images.len(), h, w, CHANNELS], data)
}

/// Symmetric InfoNCE of the positional pairing, evaluated through the model.
pub fn chip_loss(model: &ChipModel, configs: &[&[f64]], images: &[&TraceImage]) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let logits = model.logits(&mut g, configs, images)?;
    let loss = g.symmetric_info_nce(logits);
    Ok(g.value(loss).item() as f64)
}

/// Reference symmetric InfoNCE on precomputed embeddings, in `f64`.
pub fn info_nce_from_embeddings(
    configs: &[EmbeddingVector],
    images: &[EmbeddingVector],
    temperature: f64,
) -> Result<f64> {
    if configs.len() != images.len() || configs.is_empty() {
        return Err(Error::domain(
            "embedding batches must be non-empty and of equal length",
        ));
    }
    let b = configs.len();
    let logits: Vec<Vec<f64>> = configs
        .iter()
        .map(|c| images.iter().map(|i| c.cosine(i) / temperature).collect())
        .collect();
    let lse = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut row = 0.0;
    let mut col = 0.0;
    for i in 0..b {
        row += lse(&mut logits[i].iter().copied()) - logits[i][i];
        col += lse(&mut (0..b).map(|j| logits[j][i])) - logits[i][i];
    }
    Ok(0.5 * (row + col) / b as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChipHyper {
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f32,
    pub warmup_steps: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub probe_every: usize,
    pub seed: u64,
}

impl Default for ChipHyper {
    fn default() -> Self {
        Self {
            batch: 32,
            steps: 2000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden: 128,
            probe_every: 100,
            seed: 0,
        }
    }
}

impl ChipHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.steps == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::config(
                "chip batch, steps, embed_dim and hidden must be positive",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("chip learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay to a tenth of `base`.
pub(crate) fn lr_at(step: usize, steps: usize, warmup: usize, base: f32) -> f32 {
    if step < warmup {
        return base * (step + 1) as f32 / warmup as f32;
    }
    let span = steps.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    base * (0.1 + 0.9 * cos) as f32
}

#[derive(Clone, Debug)]
pub struct ChipTraining {
    pub model: ChipModel,
    /// `(step, probe loss)`, starting with the untrained model at step 0.
    pub probe_curve: Vec<(usize, f64)>,
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
}

pub fn train_chip(pairs: &[(Vec<f64>, TraceImage)], hyper: &ChipHyper) -> Result<ChipTraining> {
    hyper.validate()?;
    if pairs.len() < hyper.batch {
        return Err(Error::domain(format!(
            "corpus of {} pairs is smaller than batch {}",
            pairs.len(),
            hyper.batch
        )));
    }
    let grid = *pairs[0].1.grid();
    let mut arch = ChipArch::new(grid.device_count, grid.time_bins, hyper.embed_dim);
    arch.hidden = hyper.hidden;
    let mut model = ChipModel::new(arch, derive_seed(hyper.seed, "chip/init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, "chip/batches"));

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let probe: Vec<usize> = order[..hyper.batch].to_vec();
    let probe_loss = |m: &ChipModel| {
        let c: Vec<&[f64]> = probe.iter().map(|&i| pairs[i].0.as_slice()).collect();
        let im: Vec<&TraceImage> = probe.iter().map(|&i| &pairs[i].1).collect();
        chip_loss(m, &c, &im)
    };
    let initial = probe_loss(&model)?;
    let mut curve = vec![(0, initial)];

    let mut opt = Adam::new(
        &model.store,
        AdamConfig {
            lr: hyper.learning_rate,
            ..AdamConfig::default()
        },
    );
    let (lo, hi) = (MIN_TEMPERATURE.ln() as f32, MAX_TEMPERATURE.ln() as f32);
    let mut cursor = pairs.len();
    for step in 0..hyper.steps {
        if cursor + hyper.batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + hyper.batch];
        cursor += hyper.batch;
        let c: Vec<&[f64]> = idx.iter().map(|&i| pairs[i].0.as_slice()).collect();
        let im: Vec<&TraceImage> = idx.iter().map(|&i| &pairs[i].1).collect();

        let grads = {
            let mut g = Graph::new(&model.store);
            let logits = model.logits(&mut g, &c, &im)?;
            let loss = g.symmetric_info_nce(logits);
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss: value });
            }
            let grads = g.backward(loss);
            if !grads.all_finite() {
                return Err(Error::NonFiniteLoss { step, loss: value });
            }
            grads
        };
        opt.set_lr(lr_at(
            step,
            hyper.steps,
            hyper.warmup_steps,
            hyper.learning_rate,
        ));
        opt.step(&mut model.store, &grads);
        let lt = model.store.get_mut(model.layers.log_temperature);
        lt.data_mut()[0] = lt.data()[0].clamp(lo, hi);

        let done = step + 1;
        if hyper.probe_every > 0 && (done % hyper.probe_every == 0 || done == hyper.steps) {
            let p = probe_loss(&model)?;
            if !p.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss: p });
            }
            log::debug!("chip step {done}: probe loss {p:.4}");
            curve.push((done, p));
        }
    }
    let final_probe_loss = probe_loss(&model)?;
    Ok(ChipTraining {
        model,
        probe_curve: curve,
        initial_probe_loss: initial,
        final_probe_loss,
    })
}

/// Fraction of rows whose highest logit sits on the diagonal. Ties go to
/// the lowest column index.
pub fn retrieval_accuracy_from_embeddings(
    configs: &[EmbeddingVector],
    images: &[EmbeddingVector],
) -> f64 {
    if configs.is_empty() || configs.len() != images.len() {
        return 0.0;
    }
    let hits = configs
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, img) in images.iter().enumerate() {
                let v = c.cosine(img);
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best == *i
        })
        .count();
    hits as f64 / configs.len() as f64
}

pub fn retrieval_accuracy(model: &ChipModel, pairs: &[(Vec<f64>, TraceImage)]) -> Result<f64> {
    let c: Vec<&[f64]> = pairs.iter().map(|p| p.0.as_slice()).collect();
    let im: Vec<&TraceImage> = pairs.iter().map(|p| &p.1).collect();
    let ec = model.embed_configs(&c)?;
    let ei = model.embed_images(&im)?;
    Ok(retrieval_accuracy_from_embeddings(&ec, &ei))
}
