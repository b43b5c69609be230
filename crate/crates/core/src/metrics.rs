//! Evaluation: configuration adherence, diversity in the CHIP image space,
//! device-index locality and effect sizes between groups.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::chip::ChipModel;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::raster::TraceImage;
use crate::trace::{characterize, OpKind, Trace, WorkloadConfig};

/// Floor on the denominator of relative errors.
pub const REL_EPS: f64 = 1e-9;

pub fn rel_err(measured: f64, target: f64) -> f64 {
    (measured - target).abs() / target.max(REL_EPS)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    pub read_ratio_rel_err: f64,
    pub request_count_rel_err: f64,
    /// Mean absolute per-device utilisation error, in percentage points.
    pub utilization_mae_pp: f64,
    pub burstiness_rel_err: f64,
}

impl AdherenceReport {
    /// Field-wise mean; zero for an empty slice.
    pub fn mean(reports: &[AdherenceReport]) -> AdherenceReport {
        if reports.is_empty() {
            return AdherenceReport::default();
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&AdherenceReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        AdherenceReport {
            read_ratio_rel_err: sum(|r| r.read_ratio_rel_err),
            request_count_rel_err: sum(|r| r.request_count_rel_err),
            utilization_mae_pp: sum(|r| r.utilization_mae_pp),
            burstiness_rel_err: sum(|r| r.burstiness_rel_err),
        }
    }
}

pub fn adherence(
    target: &WorkloadConfig,
    generated: &Trace,
    bin_width_us: u64,
) -> Result<AdherenceReport> {
    if target.device_count() != generated.device_count() {
        return Err(Error::domain(format!(
            "target has {} devices, generated trace has {}",
            target.device_count(),
            generated.device_count()
        )));
    }
    let m = characterize(generated, bin_width_us)?;
    Ok(adherence_of(target, &m))
}

/// Errors of an already characterised configuration against a target.
pub fn adherence_of(target: &WorkloadConfig, measured: &WorkloadConfig) -> AdherenceReport {
    let d = target.device_count().max(1) as f64;
    let mae = target
        .device_utilization
        .iter()
        .zip(&measured.device_utilization)
        .map(|(t, m)| (t - m).abs())
        .sum::<f64>()
        / d;
    AdherenceReport {
        read_ratio_rel_err: rel_err(measured.read_ratio, target.read_ratio),
        request_count_rel_err: rel_err(
            measured.total_requests as f64,
            target.total_requests as f64,
        ),
        utilization_mae_pp: 100.0 * mae,
        burstiness_rel_err: rel_err(measured.burstiness, target.burstiness),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub mean_pairwise_gen: f64,
    pub mean_pairwise_real: f64,
    pub diversity_ratio: f64,
    /// Smallest distance from any generated image to its nearest real one.
    pub min_nearest_real_dist: f64,
    /// Top-two principal coordinates, real rows first.
    pub projection: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_pairwise(xs: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            sum += dist(&xs[i], &xs[j]);
            n += 1;
        }
    }
    sum / n as f64
}

pub fn diversity_from_features(
    real: &[Vec<f64>],
    generated: &[Vec<f64>],
) -> Result<DiversityReport> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::domain(
            "diversity needs at least two real and two generated images",
        ));
    }
    let dim = real[0].len();
    if real.iter().chain(generated).any(|f| f.len() != dim) {
        return Err(Error::domain("feature vectors differ in length"));
    }
    let mean_pairwise_real = mean_pairwise(real);
    if mean_pairwise_real == 0.0 {
        return Err(Error::domain(
            "real images are indistinguishable in feature space",
        ));
    }
    let mean_pairwise_gen = mean_pairwise(generated);
    let min_nearest_real_dist = generated
        .iter()
        .map(|g| {
            real.iter()
                .map(|r| dist(g, r))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min);
    let (projection, explained_variance) = pca2(real.iter().chain(generated));
    Ok(DiversityReport {
        mean_pairwise_gen,
        mean_pairwise_real,
        diversity_ratio: mean_pairwise_gen / mean_pairwise_real,
        min_nearest_real_dist,
        projection,
        explained_variance,
    })
}

/// Projects rows onto the two leading principal axes. Each axis is signed
/// so that its largest-magnitude loading is positive.
fn pca2<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> (Vec<[f64; 2]>, [f64; 2]) {
    let rows: Vec<&Vec<f64>> = rows.collect();
    let (n, dim) = (rows.len(), rows[0].len());
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n.saturating_sub(1).max(1)) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut axes = Vec::new();
    let mut variances = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, c| if c.abs() > acc.abs() { c } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        variances[k] = eig.eigenvalues[idx].max(0.0);
        axes.push(v);
    }
    let projection = (0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (k, axis) in axes.iter().enumerate() {
                p[k] = (0..dim).map(|j| x[(i, j)] * axis[j]).sum();
            }
            p
        })
        .collect();
    (projection, variances)
}

/// Diversity of generated images against real ones in the CHIP image
/// embedding space.
pub fn diversity(
    real: &[TraceImage],
    generated: &[TraceImage],
    chip: &ChipModel,
) -> Result<DiversityReport> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::domain(
            "diversity needs at least two real and two generated images",
        ));
    }
    let feats = |imgs: &[TraceImage]| -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&TraceImage> = imgs.iter().collect();
        Ok(chip
            .embed_images(&refs)?
            .iter()
            .map(|e| e.values().iter().map(|&v| v as f64).collect())
            .collect())
    };
    diversity_from_features(&feats(real)?, &feats(generated)?)
}

/// Mean absolute device-index jump between consecutive events of `op`,
/// divided by `D - 1`. `None` with fewer than two such events.
pub fn spatial_locality(trace: &Trace, op: OpKind) -> Option<f64> {
    let devices: Vec<usize> = trace
        .events()
        .iter()
        .filter(|e| e.op == op)
        .map(|e| e.device_id)
        .collect();
    if devices.len() < 2 {
        return None;
    }
    if trace.device_count() < 2 {
        return Some(0.0);
    }
    let gaps: f64 = devices.windows(2).map(|p| p[0].abs_diff(p[1]) as f64).sum();
    Some(gaps / (devices.len() - 1) as f64 / (trace.device_count() - 1) as f64)
}

/// Locality over both operations: the mean of the per-op values that exist.
pub fn combined_locality(trace: &Trace) -> Option<f64> {
    let vals: Vec<f64> = OpKind::ALL
        .iter()
        .filter_map(|&op| spatial_locality(trace, op))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Separation {
    Finite(f64),
    /// Both groups are constant and their means differ.
    Infinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSeparation {
    pub cohens_d: Separation,
    pub mean_a: f64,
    pub mean_b: f64,
}

impl ClusterSeparation {
    /// At least `threshold`, counting infinite separation as passing.
    pub fn at_least(&self, threshold: f64) -> bool {
        match self.cohens_d {
            Separation::Finite(d) => d >= threshold,
            Separation::Infinite => true,
        }
    }

    /// Sign of `mean_a - mean_b`.
    pub fn direction(&self) -> f64 {
        (self.mean_a - self.mean_b).signum()
    }
}

/// Cohen's d with the pooled unbiased standard deviation.
pub fn cluster_separation(a: &[f64], b: &[f64]) -> Result<ClusterSeparation> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::domain("each group needs at least two values"));
    }
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, v)
    };
    let (ma, va) = stats(a);
    let (mb, vb) = stats(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    let diff = (ma - mb).abs();
    let cohens_d = if pooled > 0.0 {
        Separation::Finite(diff / pooled)
    } else if diff == 0.0 {
        Separation::Finite(0.0)
    } else {
        Separation::Infinite
    };
    Ok(ClusterSeparation {
        cohens_d,
        mean_a: ma,
        mean_b: mb,
    })
}

/// One row of the generation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub seed: u64,
    pub target_hash: String,
    pub events: usize,
    pub report: AdherenceReport,
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut s = String::from(
        "name,seed,target_hash,events,read_ratio_rel_err,request_count_rel_err,utilization_mae_pp,burstiness_rel_err\n",
    );
    for r in rows {
        let a = &r.report;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.name,
            r.seed,
            r.target_hash,
            r.events,
            a.read_ratio_rel_err,
            a.request_count_rel_err,
            a.utilization_mae_pp,
            a.burstiness_rel_err
        );
    }
    fsutil::write_atomic(path, s.as_bytes())
}

pub fn write_projection_csv(path: &Path, labels: &[String], projection: &[[f64; 2]]) -> Result<()> {
    let mut s = String::from("label,x,y\n");
    for (l, p) in labels.iter().zip(projection) {
        let _ = writeln!(s, "{l},{},{}", p[0], p[1]);
    }
    fsutil::write_atomic(path, s.as_bytes())
}
