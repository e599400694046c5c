//! TOML-backed configuration tree, with defaults describing the reference
//! corridor: 2.5 km, eight signalized intersections, one speed limit.

use crate::acc::AccConfig;
use crate::grid::UniformGrid;
use crate::planner::PlannerConfig;
use crate::powertrain::{CostMapGrids, PowertrainParams};
use crate::signals::{
    HistoricalSpat, IntersectionTimingModel, RedDistribution, TrafficModel,
};
use crate::sim::{IdmParams, SimConfig};
use crate::vehicle::{AccelLimits, RouteSpec, VehicleParams};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Vehicle(#[from] crate::vehicle::VehicleError),
    #[error(transparent)]
    Powertrain(#[from] crate::powertrain::PowertrainError),
    #[error(transparent)]
    Signals(#[from] crate::signals::SignalError),
}

/// Piecewise-constant profile segment. Values apply to [start_m, end_m).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Segment {
    pub start_m: f64,
    pub end_m: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteConfig {
    pub length_m: f64,
    pub step_m: f64,
    pub speed_limit_mps: f64,
    pub intersections_m: Vec<f64>,
    /// Optional grade overrides; flat elsewhere.
    pub grade_segments: Vec<Segment>,
    /// Optional per-segment speed limits over the default.
    pub speed_limit_segments: Vec<Segment>,
    /// Optional CSV files (columns start_m,end_m,value) merged after the
    /// inline segments.
    pub grade_csv: Option<String>,
    pub speed_limit_csv: Option<String>,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self {
            length_m: 2500.0,
            step_m: 1.0,
            speed_limit_mps: 17.9,
            intersections_m: vec![300.0, 580.0, 860.0, 1140.0, 1420.0, 1700.0, 1980.0, 2260.0],
            grade_segments: vec![],
            speed_limit_segments: vec![],
            grade_csv: None,
            speed_limit_csv: None,
        }
    }
}

fn parse_segment_csv(text: &str) -> Result<Vec<Segment>, ConfigError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("start_m")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(ConfigError::Invalid(format!("segment csv line {}: need 3 columns", i + 1)));
        }
        let parse = |s: &str| -> Result<f64, ConfigError> {
            s.trim()
                .parse()
                .map_err(|e| ConfigError::Invalid(format!("segment csv line {}: {e}", i + 1)))
        };
        out.push(Segment {
            start_m: parse(fields[0])?,
            end_m: parse(fields[1])?,
            value: parse(fields[2])?,
        });
    }
    Ok(out)
}

impl RouteConfig {
    /// Materializes the per-step profiles. Relative CSV paths resolve
    /// against `base_dir`.
    pub fn build(&self, base_dir: Option<&Path>) -> Result<RouteSpec, ConfigError> {
        let n = (self.length_m / self.step_m).round() as usize;
        let mut grade = vec![0.0; n];
        let mut limit = vec![self.speed_limit_mps; n];
        let mut grade_segments = self.grade_segments.clone();
        let mut limit_segments = self.speed_limit_segments.clone();
        let resolve = |p: &str| match base_dir {
            Some(dir) if Path::new(p).is_relative() => dir.join(p),
            _ => Path::new(p).to_path_buf(),
        };
        if let Some(path) = &self.grade_csv {
            grade_segments.extend(parse_segment_csv(&std::fs::read_to_string(resolve(path))?)?);
        }
        if let Some(path) = &self.speed_limit_csv {
            limit_segments.extend(parse_segment_csv(&std::fs::read_to_string(resolve(path))?)?);
        }
        for (profile, segments) in [(&mut grade, &grade_segments), (&mut limit, &limit_segments)] {
            for seg in segments {
                if seg.end_m <= seg.start_m {
                    return Err(ConfigError::Invalid(format!(
                        "segment [{}, {}) is empty",
                        seg.start_m, seg.end_m
                    )));
                }
                let lo = (seg.start_m / self.step_m).floor().max(0.0) as usize;
                let hi = ((seg.end_m / self.step_m).ceil() as usize).min(n);
                for cell in profile[lo..hi].iter_mut() {
                    *cell = seg.value;
                }
            }
        }
        Ok(RouteSpec::new(self.length_m, self.step_m, grade, limit, self.intersections_m.clone())?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionConfig {
    pub cycle_s: f64,
    pub offset_s: f64,
    /// Scenario-to-scenario jitter of the cycle start.
    pub offset_std_s: f64,
    pub red_mean_s: f64,
    pub red_std_s: f64,
    pub red_min_s: f64,
    pub red_max_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalsConfig {
    pub yellow_s: f64,
    /// Percentile for conservative red-duration estimates.
    pub eta_percent: f64,
    /// Synthetic historical sample count per intersection.
    pub hist_samples: usize,
    pub hist_seed: u64,
    pub intersections: Vec<IntersectionConfig>,
}

impl Default for SignalsConfig {
    fn default() -> Self {
        let mk = |cycle: f64, offset: f64, red: f64| IntersectionConfig {
            cycle_s: cycle,
            offset_s: offset,
            offset_std_s: 15.0,
            red_mean_s: red,
            red_std_s: 6.0,
            red_min_s: (red - 15.0).max(5.0),
            red_max_s: red + 15.0,
        };
        Self {
            yellow_s: 3.0,
            eta_percent: 90.0,
            hist_samples: 200,
            hist_seed: 0x5eed_516,
            intersections: vec![
                mk(70.0, 12.0, 28.0),
                mk(80.0, 45.0, 34.0),
                mk(65.0, 8.0, 26.0),
                mk(75.0, 60.0, 30.0),
                mk(90.0, 22.0, 38.0),
                mk(70.0, 35.0, 27.0),
                mk(85.0, 70.0, 33.0),
                mk(60.0, 15.0, 24.0),
            ],
        }
    }
}

impl SignalsConfig {
    pub fn models(&self) -> Vec<IntersectionTimingModel> {
        self.intersections
            .iter()
            .map(|i| IntersectionTimingModel {
                cycle_s: i.cycle_s,
                yellow_s: self.yellow_s,
                nominal_offset_s: i.offset_s,
                offset_std_s: i.offset_std_s,
                red: RedDistribution {
                    mean_s: i.red_mean_s,
                    std_s: i.red_std_s,
                    min_s: i.red_min_s,
                    max_s: i.red_max_s,
                },
            })
            .collect()
    }

    pub fn historical(&self, models: &[IntersectionTimingModel]) -> HistoricalSpat {
        HistoricalSpat::from_models(models, self.hist_samples, self.eta_percent, self.hist_seed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostMapConfig {
    pub soc_min: f64,
    pub soc_max: f64,
    pub speed_max_mps: f64,
    pub speed_points: usize,
    pub torque_min_nm: f64,
    pub torque_max_nm: f64,
    pub torque_points: usize,
}

impl Default for CostMapConfig {
    fn default() -> Self {
        Self {
            soc_min: 0.60,
            soc_max: 0.95,
            speed_max_mps: 20.0,
            speed_points: 41,
            torque_min_nm: -4600.0,
            torque_max_nm: 3400.0,
            torque_points: 161,
        }
    }
}

impl CostMapConfig {
    pub fn grids(&self) -> CostMapGrids {
        let n_soc = ((self.soc_max - self.soc_min) / 0.01).round() as usize + 1;
        CostMapGrids {
            soc: UniformGrid::from_range(self.soc_min, self.soc_min + 0.01 * (n_soc - 1) as f64, n_soc),
            speed: UniformGrid::from_range(0.0, self.speed_max_mps, self.speed_points),
            torque: UniformGrid::from_range(self.torque_min_nm, self.torque_max_nm, self.torque_points),
        }
    }
}

/// The whole configuration tree. Every section has defaults, so a partial
/// TOML file overrides only what it names.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub vehicle: VehicleParams,
    pub limits: AccelLimits,
    pub route: RouteConfig,
    pub signals: SignalsConfig,
    pub powertrain: PowertrainParams,
    pub costmap: CostMapConfig,
    pub planner: PlannerConfig,
    pub acc: AccConfig,
    pub sim: SimConfig,
    pub idm: IdmParams,
    pub traffic: TrafficModel,
}

/// Route and signal artifacts materialized from a config.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub route: RouteSpec,
    pub models: Vec<IntersectionTimingModel>,
    pub hist: HistoricalSpat,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Swaps in the coarse planner preset for large batches.
    pub fn with_fast_planner(mut self) -> Self {
        self.planner = PlannerConfig::fast();
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.vehicle.validate()?;
        self.powertrain.validate()?;
        self.sim.validate().map_err(ConfigError::Invalid)?;
        if (self.powertrain.wheel_radius_m - self.vehicle.wheel_radius_m).abs() > 1e-9 {
            return Err(ConfigError::Invalid(
                "powertrain.wheel_radius_m must match vehicle.wheel_radius_m".into(),
            ));
        }
        if self.route.intersections_m.len() != self.signals.intersections.len() {
            return Err(ConfigError::Invalid(format!(
                "route has {} intersections but signals configure {}",
                self.route.intersections_m.len(),
                self.signals.intersections.len()
            )));
        }
        for m in self.signals.models() {
            m.nominal_spec().validate()?;
            if m.red.max_s + self.signals.yellow_s >= m.cycle_s {
                return Err(ConfigError::Invalid(
                    "red_max_s + yellow_s must stay below the cycle".into(),
                ));
            }
        }
        if !(self.signals.eta_percent > 0.0 && self.signals.eta_percent <= 100.0) {
            return Err(ConfigError::Invalid("eta_percent must be in (0, 100]".into()));
        }
        Ok(())
    }

    /// Builds the route and signal artifacts. Relative CSV paths resolve
    /// against `base_dir`.
    pub fn assemble(&self, base_dir: Option<&Path>) -> Result<Assembled, ConfigError> {
        let route = self.route.build(base_dir)?;
        let models = self.signals.models();
        let hist = self.signals.historical(&models);
        Ok(Assembled { route, models, hist })
    }
}
