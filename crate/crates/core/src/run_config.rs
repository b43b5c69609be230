//! Whole-pipeline configuration, loaded from JSON by the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chip::ChipHyper;
use crate::diffusion::{DiffusionHyper, SamplerOptions, ScheduleSpec};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::outpaint::OutpaintSpec;
use crate::raster::{AugmentSpec, GridSpec, DEFAULT_THRESHOLD};
use crate::seed::{derive_seed, json_hash};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub device_count: usize,
    pub time_bins: usize,
    pub horizon_us: u64,
    pub bin_width_us: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            device_count: 8,
            time_bins: 64,
            horizon_us: 64_000,
            bin_width_us: 1000,
        }
    }
}

impl GridConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.time_bins, self.device_count, self.horizon_us)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub grid: GridConfig,
    pub augment: AugmentSpec,
    pub threshold: f32,
    pub chip: ChipHyper,
    pub diffusion: DiffusionHyper,
    pub schedule: ScheduleSpec,
    pub sampler: SamplerOptions,
    pub outpaint: OutpaintSpec,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = GridConfig::default();
        Self {
            paths: Paths::default(),
            grid,
            augment: AugmentSpec::default(),
            threshold: DEFAULT_THRESHOLD,
            chip: ChipHyper::default(),
            diffusion: DiffusionHyper::default(),
            schedule: ScheduleSpec::default(),
            sampler: SamplerOptions::default(),
            outpaint: OutpaintSpec::for_width(grid.time_bins),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = fsutil::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        g.grid()?;
        if g.bin_width_us == 0 || g.horizon_us != g.bin_width_us * g.time_bins as u64 {
            return Err(Error::config(format!(
                "grid: horizon_us {} must equal bin_width_us {} x time_bins {}",
                g.horizon_us, g.bin_width_us, g.time_bins
            )));
        }
        self.augment.validate()?;
        self.augment.validate_threshold(self.threshold)?;
        self.chip.validate()?;
        self.diffusion.validate()?;
        crate::diffusion::NoiseSchedule::new(self.schedule)?;
        self.sampler.validate()?;
        self.outpaint
            .validate(g.time_bins)
            .map_err(|e| Error::config(format!("outpaint: {e}")))?;
        Ok(())
    }

    /// Per-stage seed derived from the global one.
    pub fn stage_seed(&self, tag: &str) -> u64 {
        derive_seed(self.seed, tag)
    }

    pub fn chip_hyper(&self) -> ChipHyper {
        ChipHyper {
            seed: self.stage_seed("chip"),
            ..self.chip.clone()
        }
    }

    pub fn diffusion_hyper(&self) -> DiffusionHyper {
        DiffusionHyper {
            seed: self.stage_seed("diffusion"),
            ..self.diffusion.clone()
        }
    }

    /// Hash of everything that determines a CHIP checkpoint.
    pub fn chip_spec_hash(&self) -> String {
        json_hash(&serde_json::json!({
            "grid": self.grid,
            "augment": self.augment,
            "chip": self.chip_hyper(),
        }))
    }

    /// Hash of everything that determines a diffusion checkpoint.
    pub fn diffusion_spec_hash(&self) -> String {
        json_hash(&serde_json::json!({
            "grid": self.grid,
            "augment": self.augment,
            "chip": self.chip_hyper(),
            "diffusion": self.diffusion_hyper(),
            "schedule": self.schedule,
        }))
    }

    /// Confirms that artefacts built for `device_count` devices fit this run.
    pub fn check_devices(&self, device_count: usize, what: &str) -> Result<()> {
        if device_count != self.grid.device_count {
            return Err(Error::config(format!(
                "{what} has {device_count} devices but the run is configured for {}",
                self.grid.device_count
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn cross_field_checks() {
        let mut c = RunConfig::default();
        c.threshold = 0.4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = RunConfig::default();
        c.outpaint.overlap = 64;
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = RunConfig::default();
        c.grid.horizon_us = 65_000;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 9, "chip": {"steps": 5}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.chip.steps, 5);
        assert_eq!(c.chip.batch, 32);
        assert_ne!(c.chip_hyper().seed, c.diffusion_hyper().seed);
    }
}
