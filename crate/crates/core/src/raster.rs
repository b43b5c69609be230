//! Trace <-> image codec.
//!
//! An image has two channels (read, write), one row per device and one
//! column per time bin. The base encoding marks presence only; [`augment`]
//! adds a truncated Gaussian halo around every event pixel, and [`decode`]
//! turns thresholded time-axis peaks back into events at bin centres.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::trace::{OpKind, Trace, TraceEvent};

pub const CHANNELS: usize = 2;
pub const DEFAULT_THRESHOLD: f32 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub time_bins: usize,
    pub device_count: usize,
    pub horizon_us: u64,
}

impl GridSpec {
    pub const MIN_TIME_BINS: usize = 8;

    pub fn new(time_bins: usize, device_count: usize, horizon_us: u64) -> Result<Self> {
        let g = Self {
            time_bins,
            device_count,
            horizon_us,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_bins < Self::MIN_TIME_BINS {
            return Err(Error::config(format!(
                "time_bins {} below {}",
                self.time_bins,
                Self::MIN_TIME_BINS
            )));
        }
        if self.device_count == 0 {
            return Err(Error::config("device_count must be at least 1"));
        }
        if self.horizon_us < self.time_bins as u64 {
            return Err(Error::config(
                "horizon_us must give every bin at least 1 us",
            ));
        }
        Ok(())
    }

    /// Integer bin width; the division remainder belongs to the last bin.
    pub fn bin_width_us(&self) -> u64 {
        self.horizon_us / self.time_bins as u64
    }

    pub fn bin_of(&self, timestamp_us: u64) -> usize {
        ((timestamp_us / self.bin_width_us()) as usize).min(self.time_bins - 1)
    }

    pub fn bin_center_us(&self, bin: usize) -> u64 {
        let w = self.bin_width_us();
        bin as u64 * w + w / 2
    }

    pub fn len(&self) -> usize {
        CHANNELS * self.device_count * self.time_bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same bin width over `time_bins` columns.
    pub fn with_time_bins(&self, time_bins: usize) -> Self {
        Self {
            time_bins,
            device_count: self.device_count,
            horizon_us: self.bin_width_us() * time_bins as u64,
        }
    }
}

/// `C x H x W` raster in C-order `(channel, device, bin)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceImage {
    grid: GridSpec,
    values: Vec<f32>,
}

impl TraceImage {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f32>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::domain(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn index(&self, channel: usize, device: usize, bin: usize) -> usize {
        (channel * self.grid.device_count + device) * self.grid.time_bins + bin
    }

    pub fn get(&self, channel: usize, device: usize, bin: usize) -> f32 {
        self.values[self.index(channel, device, bin)]
    }

    pub(crate) fn set(&mut self, channel: usize, device: usize, bin: usize, v: f32) {
        let i = self.index(channel, device, bin);
        self.values[i] = v;
    }

    /// Columns `[start, end)` of every row, as a new image over the
    /// corresponding sub-horizon.
    pub fn columns(&self, start: usize, end: usize) -> Vec<f32> {
        let (h, w) = (self.grid.device_count, self.grid.time_bins);
        let mut out = Vec::with_capacity(CHANNELS * h * (end - start));
        for row in 0..CHANNELS * h {
            out.extend_from_slice(&self.values[row * w + start..row * w + end]);
        }
        out
    }

    pub fn count_at_least(&self, threshold: f32) -> usize {
        self.values.iter().filter(|&&v| v >= threshold).count()
    }

    /// Binary P5 PGM of one channel, `value = round(pixel * 255)`.
    pub fn channel_pgm(&self, channel: usize) -> Vec<u8> {
        let (h, w) = (self.grid.device_count, self.grid.time_bins);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        let start = channel * h * w;
        out.extend(
            self.values[start..start + h * w]
                .iter()
                .map(|&v| (v * 255.0).round() as u8),
        );
        out
    }

    /// Both channels stacked vertically (reads on top) in one P5 PGM.
    pub fn stacked_pgm(&self) -> Vec<u8> {
        let (h, w) = (self.grid.device_count, self.grid.time_bins);
        let mut out = format!("P5\n{w} {}\n255\n", CHANNELS * h).into_bytes();
        out.extend(self.values.iter().map(|&v| (v * 255.0).round() as u8));
        out
    }

    pub fn write_container(&self, path: &Path) -> Result<()> {
        let header = ImageHeader {
            channels: CHANNELS,
            rows: self.grid.device_count,
            cols: self.grid.time_bins,
            horizon_us: self.grid.horizon_us,
        };
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fsutil::write_atomic(path, &bytes)?;
        fsutil::write_json(&sidecar_path(path), &header)
    }

    pub fn read_container(path: &Path) -> Result<Self> {
        let header: ImageHeader = fsutil::read_json(&sidecar_path(path))?;
        if header.channels != CHANNELS {
            return Err(Error::domain(format!(
                "{}: expected {CHANNELS} channels",
                path.display()
            )));
        }
        let grid = GridSpec {
            time_bins: header.cols,
            device_count: header.rows,
            horizon_us: header.horizon_us,
        };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != grid.len() * 4 {
            return Err(Error::domain(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                grid.len() * 4,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_values(grid, values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageHeader {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub horizon_us: u64,
}

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Time-axis standard deviation, in bins.
    pub sigma_t: f32,
    /// Device-axis standard deviation, in rows.
    pub sigma_d: f32,
    pub halo_amplitude: f32,
    pub kernel_radius: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            sigma_t: 1.0,
            sigma_d: 0.5,
            halo_amplitude: 0.5,
            kernel_radius: 2,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_t > 0.0 && self.sigma_d > 0.0) {
            return Err(Error::config("augment sigmas must be positive"));
        }
        if !(self.halo_amplitude > 0.0 && self.halo_amplitude < 1.0) {
            return Err(Error::config("halo_amplitude must lie in (0, 1)"));
        }
        if self.kernel_radius == 0 {
            return Err(Error::config("kernel_radius must be at least 1"));
        }
        Ok(())
    }

    /// Checks the joint constraint `halo_amplitude < threshold <= 1`.
    pub fn validate_threshold(&self, threshold: f32) -> Result<()> {
        if !(threshold > self.halo_amplitude && threshold <= 1.0) {
            return Err(Error::config(format!(
                "decode threshold {threshold} must lie in (halo_amplitude {}, 1]",
                self.halo_amplitude
            )));
        }
        Ok(())
    }

    pub(crate) fn weight(&self, dt: isize, dd: isize) -> f32 {
        let t = (dt * dt) as f32 / (2.0 * self.sigma_t * self.sigma_t);
        let d = (dd * dd) as f32 / (2.0 * self.sigma_d * self.sigma_d);
        (-(t + d)).exp()
    }
}

pub fn encode(trace: &Trace, grid: &GridSpec) -> Result<TraceImage> {
    if trace.device_count() != grid.device_count {
        return Err(Error::domain(format!(
            "trace has {} devices, grid has {}",
            trace.device_count(),
            grid.device_count
        )));
    }
    if trace.horizon_us() != grid.horizon_us {
        return Err(Error::domain(format!(
            "trace horizon {} differs from grid horizon {}",
            trace.horizon_us(),
            grid.horizon_us
        )));
    }
    let mut img = TraceImage::zeros(*grid);
    for e in trace.events() {
        img.set(
            e.op.channel(),
            e.device_id,
            grid.bin_of(e.timestamp_us),
            1.0,
        );
    }
    Ok(img)
}

/// Max-combines a halo of `amplitude * kernel` around every pixel `>= 1`.
pub(crate) fn halo(image: &TraceImage, spec: &AugmentSpec, amplitude: f32) -> TraceImage {
    let (h, w) = (
        image.grid.device_count as isize,
        image.grid.time_bins as isize,
    );
    let r = spec.kernel_radius as isize;
    let mut out = image.clone();
    for c in 0..CHANNELS {
        for d0 in 0..h {
            for b0 in 0..w {
                if image.get(c, d0 as usize, b0 as usize) < 1.0 {
                    continue;
                }
                for dd in -r..=r {
                    let d = d0 + dd;
                    if d < 0 || d >= h {
                        continue;
                    }
                    for dt in -r..=r {
                        let b = b0 + dt;
                        if b < 0 || b >= w || (dd == 0 && dt == 0) {
                            continue;
                        }
                        let v = amplitude * spec.weight(dt, dd);
                        let i = out.index(c, d as usize, b as usize);
                        if v > out.values[i] {
                            out.values[i] = v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn augment(image: &TraceImage, spec: &AugmentSpec) -> TraceImage {
    halo(image, spec, spec.halo_amplitude)
}

/// Emits one event per pixel that reaches `threshold` and is a non-strict
/// maximum against its left and right neighbours.
pub fn decode(image: &TraceImage, threshold: f32, halo_amplitude: f32) -> Result<Trace> {
    if !(threshold > halo_amplitude && threshold <= 1.0) {
        return Err(Error::config(format!(
            "decode threshold {threshold} must lie in (halo_amplitude {halo_amplitude}, 1]"
        )));
    }
    let grid = image.grid;
    let (h, w) = (grid.device_count, grid.time_bins);
    let mut events = Vec::new();
    for b in 0..w {
        for c in 0..CHANNELS {
            for d in 0..h {
                let v = image.get(c, d, b);
                if v < threshold {
                    continue;
                }
                let left = if b > 0 {
                    image.get(c, d, b - 1)
                } else {
                    f32::NEG_INFINITY
                };
                let right = if b + 1 < w {
                    image.get(c, d, b + 1)
                } else {
                    f32::NEG_INFINITY
                };
                if v >= left && v >= right {
                    let op = OpKind::from_channel(c).expect("two channels");
                    events.push(TraceEvent::new(grid.bin_center_us(b), d, op));
                }
            }
        }
    }
    Trace::new(events, h, grid.horizon_us)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(64, 4, 64_000).unwrap()
    }

    #[test]
    fn empty_trace_encodes_to_zeros() {
        let img = encode(&Trace::empty(4, 64_000).unwrap(), &grid()).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
        let aug = augment(&img, &AugmentSpec::default());
        assert_eq!(aug, img);
        assert!(decode(&img, 0.6, 0.5).unwrap().is_empty());
    }

    #[test]
    fn single_read_lands_in_its_bin() {
        let trace = Trace::new(vec![TraceEvent::new(5500, 2, OpKind::Read)], 4, 64_000).unwrap();
        let img = encode(&trace, &grid()).unwrap();
        assert_eq!(img.count_at_least(1e-9), 1);
        assert_eq!(img.get(0, 2, 5), 1.0);
    }

    #[test]
    fn same_cell_collapses_to_presence() {
        let trace = Trace::new(
            vec![
                TraceEvent::new(100, 1, OpKind::Write),
                TraceEvent::new(900, 1, OpKind::Write),
            ],
            4,
            64_000,
        )
        .unwrap();
        let img = encode(&trace, &grid()).unwrap();
        assert_eq!(img.count_at_least(1e-9), 1);
        assert_eq!(img.get(1, 1, 0), 1.0);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let t = Trace::empty(3, 64_000).unwrap();
        assert!(matches!(encode(&t, &grid()), Err(Error::Domain(_))));
        let t = Trace::empty(4, 32_000).unwrap();
        assert!(matches!(encode(&t, &grid()), Err(Error::Domain(_))));
    }

    #[test]
    fn halo_matches_closed_form() {
        let mut img = TraceImage::zeros(grid());
        img.set(0, 2, 5, 1.0);
        let spec = AugmentSpec {
            sigma_t: 1.0,
            sigma_d: 0.5,
            halo_amplitude: 0.5,
            kernel_radius: 2,
        };
        let aug = augment(&img, &spec);
        let expected = 0.5 * (-0.5f32).exp();
        assert!((aug.get(0, 2, 6) - expected).abs() < 1e-7);
        assert!((aug.get(0, 2, 6) - 0.3033).abs() < 1e-4);
        assert_eq!(aug.get(0, 2, 5), 1.0);
        // one row away: exp(-1/(2*0.25)) = exp(-2)
        assert!((aug.get(0, 3, 5) - 0.5 * (-2.0f32).exp()).abs() < 1e-7);
        // outside the radius and in the other channel nothing changes
        assert_eq!(aug.get(0, 2, 8), 0.0);
        assert_eq!(aug.get(1, 2, 5), 0.0);
    }

    #[test]
    fn overlapping_halos_take_the_max() {
        let mut img = TraceImage::zeros(grid());
        img.set(0, 1, 10, 1.0);
        img.set(0, 1, 12, 1.0);
        let spec = AugmentSpec::default();
        let aug = augment(&img, &spec);
        let one = spec.halo_amplitude * spec.weight(1, 0);
        assert_eq!(aug.get(0, 1, 11), one);
        assert!(aug
            .values()
            .iter()
            .all(|&v| v == 1.0 || v <= spec.halo_amplitude));
    }

    #[test]
    fn decode_reads_back_the_peak() {
        let mut img = TraceImage::zeros(grid());
        img.set(0, 2, 5, 1.0);
        img.set(0, 2, 6, 0.3033);
        let t = decode(&img, 0.6, 0.5).unwrap();
        assert_eq!(t.events(), &[TraceEvent::new(5500, 2, OpKind::Read)]);
    }

    #[test]
    fn decode_threshold_must_exceed_halo() {
        let img = TraceImage::zeros(grid());
        assert!(matches!(decode(&img, 0.5, 0.5), Err(Error::Config(_))));
        assert!(matches!(decode(&img, 1.1, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn decode_keeps_plateaus_and_drops_shoulders() {
        let mut img = TraceImage::zeros(grid());
        img.set(1, 0, 3, 0.9);
        img.set(1, 0, 4, 0.9);
        img.set(1, 0, 5, 0.7);
        img.set(1, 0, 6, 0.8);
        let t = decode(&img, 0.6, 0.5).unwrap();
        let bins: Vec<usize> = t
            .events()
            .iter()
            .map(|e| grid().bin_of(e.timestamp_us))
            .collect();
        assert_eq!(bins, vec![3, 4, 6]);
    }

    #[test]
    fn remainder_goes_to_last_bin() {
        let g = GridSpec::new(8, 1, 8 * 1000 + 7).unwrap();
        assert_eq!(g.bin_width_us(), 1000);
        assert_eq!(g.bin_of(8006), 7);
    }

    #[test]
    fn container_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = TraceImage::zeros(GridSpec::new(8, 2, 800).unwrap());
        img.set(0, 1, 3, 1.0);
        img.set(1, 0, 0, 0.25);
        let path = dir.path().join("x.img");
        img.write_container(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 2 * 2 * 8 * 4);
        let header: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(header["channels"], 2);
        assert_eq!(header["rows"], 2);
        assert_eq!(header["cols"], 8);
        assert_eq!(header["horizon_us"], 800);
        assert_eq!(TraceImage::read_container(&path).unwrap(), img);

        let pgm = img.channel_pgm(1);
        let body = &pgm[pgm.len() - 16..];
        assert_eq!(body[0], 64); // round(0.25 * 255)
        assert!(pgm.starts_with(b"P5\n8 2\n255\n"));
        assert!(img.stacked_pgm().starts_with(b"P5\n8 4\n255\n"));
    }
}
