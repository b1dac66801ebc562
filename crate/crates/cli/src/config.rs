//! Versionable run description shared by every subcommand.

use std::path::{Path, PathBuf};

use dlo_core::adapt::AdaptConfig;
use dlo_core::baselines::{MppiConfig, WlsConfig};
use dlo_core::controller::ControllerConfig;
use dlo_core::datasets::{CollectionConfig, DofMask};
use dlo_core::episode::{DesiredShapeConfig, EpisodeConfig, Method};
use dlo_core::rod::{DloParams, SimConfig};
use dlo_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionSection {
    /// Seconds of collection per DLO.
    pub duration: f64,
    pub period: f64,
    pub dt: f64,
    pub separation_guard: f64,
    pub orientation_range_deg: f64,
}

impl Default for CollectionSection {
    fn default() -> Self {
        let c = CollectionConfig::default();
        Self {
            duration: 600.0,
            period: c.period,
            dt: c.dt,
            separation_guard: c.separation_guard,
            orientation_range_deg: c.orientation_range_deg,
        }
    }
}

impl CollectionSection {
    pub fn to_core(&self) -> CollectionConfig {
        CollectionConfig {
            period: self.period,
            dt: self.dt,
            separation_guard: self.separation_guard,
            orientation_range_deg: self.orientation_range_deg,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub wls: WlsConfig,
    pub mppi: MppiConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatterySection {
    pub episodes: usize,
    /// Seconds per episode.
    pub duration: f64,
    pub dt: f64,
    pub noise_std: f64,
    pub methods: Vec<Method>,
    pub desired: DesiredShapeConfig,
    /// Extra `ours` runs at these learning rates (bench only).
    pub eta_sweep: Vec<f64>,
    /// Extra `ours` runs at these observation noise levels (bench only).
    pub noise_sweep: Vec<f64>,
    /// Worker threads; the `DLOLAB_WORKERS` variable takes precedence.
    pub workers: Option<usize>,
}

impl Default for BatterySection {
    fn default() -> Self {
        Self {
            episodes: 10,
            duration: 30.0,
            dt: 0.1,
            noise_std: 0.0,
            methods: vec![Method::Ours],
            desired: DesiredShapeConfig::default(),
            eta_sweep: vec![],
            noise_sweep: vec![],
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Planar (2D) tasks: the rod lies on a table, ends move in-plane only.
    pub planar: bool,
    pub sim: SimConfig,
    /// The manipulated DLO.
    pub dlo: DloParams,
    /// DLOs for offline data collection; defaults to `[dlo]`.
    pub dlo_list: Option<Vec<DloParams>>,
    pub collection: CollectionSection,
    pub training: TrainConfig,
    pub controller: ControllerConfig,
    pub adaptation: AdaptConfig,
    pub baseline: BaselineSection,
    pub battery: BatterySection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            planar: false,
            sim: SimConfig::default(),
            dlo: DloParams::table(0).expect("table entry 0"),
            dlo_list: None,
            collection: CollectionSection::default(),
            training: TrainConfig::default(),
            controller: ControllerConfig::default(),
            adaptation: AdaptConfig::default(),
            baseline: BaselineSection::default(),
            battery: BatterySection::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::validation(format!("{origin}: {e}")))?;
        if cfg.planar {
            cfg.controller.dof_mask = DofMask::planar();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::validation(format!("cannot read {}: {e}", p.display())))?;
                Self::from_json(&text, &p.display().to_string())
            }
        }
    }

    pub fn dlos(&self) -> Vec<DloParams> {
        self.dlo_list.clone().unwrap_or_else(|| vec![self.dlo.clone()])
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            duration: self.battery.duration,
            dt: self.battery.dt,
            noise_std: self.battery.noise_std,
            controller: self.controller.clone(),
            adaptation: self.adaptation.clone(),
            wls: self.baseline.wls.clone(),
            mppi: self.baseline.mppi.clone(),
        }
    }

    /// Checks every section before anything runs.
    pub fn validate(&self) -> Result<(), CliError> {
        self.sim.validate()?;
        self.dlo.validate()?;
        for d in self.dlos() {
            d.validate()?;
        }
        if self.dlo_list.as_ref().is_some_and(|l| l.is_empty()) {
            return Err(CliError::validation("dlo_list must not be empty"));
        }
        self.collection.to_core().validate()?;
        if !(self.collection.duration > 0.0) {
            return Err(CliError::validation("collection.duration must be positive"));
        }
        self.training.validate()?;
        self.episode_config().validate(self.sim.feature_count)?;
        if self.planar != self.controller.dof_mask.is_planar() {
            return Err(CliError::validation("controller.dof_mask disagrees with the planar flag"));
        }
        if self.battery.methods.is_empty() {
            return Err(CliError::validation("battery.methods must not be empty"));
        }
        if self.battery.workers == Some(0) {
            return Err(CliError::validation("battery.workers must be positive"));
        }
        if self.battery.eta_sweep.iter().any(|e| !(*e >= 0.0)) || self.battery.noise_sweep.iter().any(|n| !(*n >= 0.0)) {
            return Err(CliError::validation("sweep values must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text, "inline").unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}", "inline").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [r#"{"sed": 1}"#, r#"{"battery": {"episode": 3}}"#, r#"{"adaptation": {"eta": 1, "beta": 2}}"#] {
            let err = RunConfig::from_json(bad, "inline").unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}");
        }
    }

    #[test]
    fn planar_flag_sets_the_mask() {
        let cfg = RunConfig::from_json(r#"{"planar": true}"#, "inline").unwrap();
        assert!(cfg.controller.dof_mask.is_planar());
        assert!(RunConfig::from_json(r#"{"battery": {"episodes": 2, "methods": []}}"#, "inline").is_err());
        assert!(RunConfig::from_json(r#"{"collection": {"duration": -1}}"#, "inline").is_err());
    }
}
