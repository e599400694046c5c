//! Energy metrics, Monte-Carlo batches, and paired controller comparisons.
//!
//! Episodes run in parallel workers but results are keyed and sorted by
//! seed, so summaries are independent of scheduling.

use crate::acc::ViolationKind;
use crate::config::{Assembled, Config};
use crate::planner::{CostModelKind, TerminalTableCache};
use crate::powertrain::CostMap;
use crate::signals::sample_scenario;
use crate::sim::{run_episode, ControllerMode, EpisodeContext, SimTrace};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub const METERS_PER_MILE: f64 = 1609.344;
/// Electrical energy equivalent of one gallon of gasoline.
pub const KWH_PER_GALLON_EQUIV: f64 = 33.7;
pub const J_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("net energy is not positive; miles-per-gallon-equivalent is undefined")]
    ZeroEnergy,
    #[error("distance must be positive")]
    ZeroDistance,
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

/// Miles per gallon equivalent from gallons of fuel, net battery kWh, and
/// miles driven.
pub fn mpge(fuel_gal: f64, elec_kwh: f64, distance_mi: f64) -> Result<f64, EvalError> {
    if !(distance_mi > 0.0) {
        return Err(EvalError::ZeroDistance);
    }
    let gal_equiv = fuel_gal + elec_kwh / KWH_PER_GALLON_EQUIV;
    if !(gal_equiv > 0.0) {
        return Err(EvalError::ZeroEnergy);
    }
    Ok(distance_mi / gal_equiv)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub mode: String,
    pub fuel_gal_equiv: f64,
    pub battery_kwh: f64,
    pub distance_mi: f64,
    pub travel_time_s: f64,
    pub mpge: f64,
    pub initial_soc: f64,
    pub final_soc: f64,
    pub gap_violations: usize,
    pub red_violations: usize,
    pub accel_violations: usize,
}

impl EpisodeMetrics {
    pub fn total_violations(&self) -> usize {
        self.gap_violations + self.red_violations + self.accel_violations
    }
}

/// Derives episode metrics from trace totals.
pub fn metrics_from_trace(
    trace: &SimTrace,
    seed: u64,
    mode: ControllerMode,
) -> Result<EpisodeMetrics, EvalError> {
    let t = &trace.totals;
    let fuel_gal = t.fuel_energy_j / J_PER_KWH / KWH_PER_GALLON_EQUIV;
    let battery_kwh = t.battery_energy_j / J_PER_KWH;
    let distance_mi = t.distance_m / METERS_PER_MILE;
    let mpge = mpge(fuel_gal, battery_kwh, distance_mi)?;
    let mut gap = 0;
    let mut red = 0;
    let mut accel = 0;
    for v in &trace.violations {
        match v.kind {
            ViolationKind::Gap { .. } => gap += 1,
            ViolationKind::RedOccupancy { .. } => red += 1,
            ViolationKind::AccelBound { .. } => accel += 1,
        }
    }
    Ok(EpisodeMetrics {
        seed,
        mode: mode.to_string(),
        fuel_gal_equiv: fuel_gal,
        battery_kwh,
        distance_mi,
        travel_time_s: t.travel_time_s,
        mpge,
        initial_soc: t.initial_soc,
        final_soc: t.final_soc,
        gap_violations: gap,
        red_violations: red,
        accel_violations: accel,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub q10: f64,
    pub q90: f64,
    pub min: f64,
    pub max: f64,
}

impl SummaryStats {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let q = |p: f64| crate::signals::empirical_quantile(samples, p);
        Some(Self {
            mean,
            median: q(0.5),
            std: var.sqrt(),
            q10: q(0.1),
            q90: q(0.9),
            min: samples.iter().cloned().fold(f64::INFINITY, f64::min),
            max: samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub mode: String,
    pub episodes_ok: usize,
    pub episodes_failed: usize,
    pub mpge: Option<SummaryStats>,
    pub travel_time_s: Option<SummaryStats>,
    pub total_violations: usize,
}

#[derive(Debug, Serialize)]
pub struct BatchOutcome {
    pub episodes: Vec<EpisodeMetrics>,
    pub failures: Vec<(u64, String)>,
    pub summary: McSummary,
}

/// Shared immutable state for a batch of episodes.
pub struct Harness<'a> {
    pub cfg: &'a Config,
    pub asm: &'a Assembled,
    pub cost_map: &'a CostMap,
    pub tables: &'a TerminalTableCache,
}

impl Harness<'_> {
    /// Runs one seeded episode in the given mode with the given stage-cost
    /// energy model.
    pub fn run_seed(
        &self,
        mode: ControllerMode,
        energy: CostModelKind,
        seed: u64,
    ) -> Result<(EpisodeMetrics, SimTrace), EvalError> {
        self.run_seed_with(mode, energy, seed, false)
    }

    /// Like [`Harness::run_seed`], optionally pinning every signal schedule
    /// to its nominal timing (deterministic SPaT); the seed then varies only
    /// the traffic.
    pub fn run_seed_with(
        &self,
        mode: ControllerMode,
        energy: CostModelKind,
        seed: u64,
        deterministic_spat: bool,
    ) -> Result<(EpisodeMetrics, SimTrace), EvalError> {
        let mut scenario = sample_scenario(&self.asm.models, &self.cfg.traffic, seed);
        if deterministic_spat {
            for (sig, model) in scenario.signals.iter_mut().zip(&self.asm.models) {
                sig.red_s = model.red.mean_s;
                sig.offset_s = model.nominal_offset_s;
            }
        }
        let mut sim_cfg = self.cfg.sim.clone();
        sim_cfg.mode = mode;
        let ctx = EpisodeContext {
            route: &self.asm.route,
            veh: &self.cfg.vehicle,
            pt: &self.cfg.powertrain,
            accel: self.cfg.limits,
            acc_cfg: &self.cfg.acc,
            planner_cfg: &self.cfg.planner,
            sim_cfg: &sim_cfg,
            idm: &self.cfg.idm,
            models: &self.asm.models,
            hist: &self.asm.hist,
            scenario: &scenario,
            cost_map: self.cost_map,
            energy,
            tables: self.tables,
        };
        let trace = run_episode(&ctx)?;
        let metrics = metrics_from_trace(&trace, seed, mode)?;
        Ok((metrics, trace))
    }

    /// Runs a scenario that was already materialized (e.g. loaded from a
    /// replay file).
    pub fn run_scenario(
        &self,
        mode: ControllerMode,
        energy: CostModelKind,
        scenario: &crate::signals::Scenario,
    ) -> Result<(EpisodeMetrics, SimTrace), EvalError> {
        let mut sim_cfg = self.cfg.sim.clone();
        sim_cfg.mode = mode;
        let ctx = EpisodeContext {
            route: &self.asm.route,
            veh: &self.cfg.vehicle,
            pt: &self.cfg.powertrain,
            accel: self.cfg.limits,
            acc_cfg: &self.cfg.acc,
            planner_cfg: &self.cfg.planner,
            sim_cfg: &sim_cfg,
            idm: &self.cfg.idm,
            models: &self.asm.models,
            hist: &self.asm.hist,
            scenario,
            cost_map: self.cost_map,
            energy,
            tables: self.tables,
        };
        let trace = run_episode(&ctx)?;
        let metrics = metrics_from_trace(&trace, scenario.id, mode)?;
        Ok((metrics, trace))
    }

    /// N seeded episodes, seeds base..base+n. Order-insensitive by
    /// construction: results are sorted by seed.
    pub fn monte_carlo(
        &self,
        mode: ControllerMode,
        energy: CostModelKind,
        n: usize,
        base_seed: u64,
    ) -> BatchOutcome {
        let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed + i).collect();
        let mut results: Vec<(u64, Result<EpisodeMetrics, String>)> = seeds
            .par_iter()
            .map(|&seed| {
                let r = self.run_seed(mode, energy, seed).map(|(m, _)| m).map_err(|e| e.to_string());
                (seed, r)
            })
            .collect();
        results.sort_by_key(|(seed, _)| *seed);
        let mut episodes = Vec::new();
        let mut failures = Vec::new();
        for (seed, r) in results {
            match r {
                Ok(m) => episodes.push(m),
                Err(e) => failures.push((seed, e)),
            }
        }
        let mpge_samples: Vec<f64> = episodes.iter().map(|m| m.mpge).collect();
        let time_samples: Vec<f64> = episodes.iter().map(|m| m.travel_time_s).collect();
        let summary = McSummary {
            mode: mode.to_string(),
            episodes_ok: episodes.len(),
            episodes_failed: failures.len(),
            mpge: SummaryStats::from_samples(&mpge_samples),
            travel_time_s: SummaryStats::from_samples(&time_samples),
            total_violations: episodes.iter().map(|m| m.total_violations()).sum(),
        };
        BatchOutcome { episodes, failures, summary }
    }

    /// Paired run of two controller arms on shared scenario seeds.
    pub fn compare(
        &self,
        a: (ControllerMode, CostModelKind),
        b: (ControllerMode, CostModelKind),
        n: usize,
        base_seed: u64,
    ) -> CompareReport {
        self.compare_with(a, b, n, base_seed, false)
    }

    /// Paired comparison, optionally under deterministic signal schedules.
    pub fn compare_with(
        &self,
        a: (ControllerMode, CostModelKind),
        b: (ControllerMode, CostModelKind),
        n: usize,
        base_seed: u64,
        deterministic_spat: bool,
    ) -> CompareReport {
        let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed + i).collect();
        let mut rows: Vec<CompareRow> = seeds
            .par_iter()
            .filter_map(|&seed| {
                let ma = self.run_seed_with(a.0, a.1, seed, deterministic_spat).ok()?.0;
                let mb = self.run_seed_with(b.0, b.1, seed, deterministic_spat).ok()?.0;
                Some(CompareRow {
                    seed,
                    mpge_a: ma.mpge,
                    mpge_b: mb.mpge,
                    travel_time_a_s: ma.travel_time_s,
                    travel_time_b_s: mb.travel_time_s,
                    battery_kwh_a: ma.battery_kwh,
                    battery_kwh_b: mb.battery_kwh,
                    final_soc_a: ma.final_soc,
                    final_soc_b: mb.final_soc,
                    violations_a: ma.total_violations(),
                    violations_b: mb.total_violations(),
                })
            })
            .collect();
        rows.sort_by_key(|r| r.seed);
        CompareReport::from_rows(a, b, rows)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub seed: u64,
    pub mpge_a: f64,
    pub mpge_b: f64,
    pub travel_time_a_s: f64,
    pub travel_time_b_s: f64,
    pub battery_kwh_a: f64,
    pub battery_kwh_b: f64,
    pub final_soc_a: f64,
    pub final_soc_b: f64,
    pub violations_a: usize,
    pub violations_b: usize,
}

#[derive(Debug, Serialize)]
pub struct CompareReport {
    pub arm_a: String,
    pub arm_b: String,
    pub rows: Vec<CompareRow>,
    pub mean_mpge_a: f64,
    pub mean_mpge_b: f64,
    pub mean_travel_time_a_s: f64,
    pub mean_travel_time_b_s: f64,
    /// Percent change of B relative to A.
    pub mpge_pct_change: f64,
    pub travel_time_pct_change: f64,
}

fn arm_label(mode: ControllerMode, energy: CostModelKind) -> String {
    match energy {
        CostModelKind::PowerMap => mode.to_string(),
        CostModelKind::WheelEnergy => format!("{mode}+wheel-energy"),
    }
}

impl CompareReport {
    fn from_rows(
        a: (ControllerMode, CostModelKind),
        b: (ControllerMode, CostModelKind),
        rows: Vec<CompareRow>,
    ) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_mpge_a = rows.iter().map(|r| r.mpge_a).sum::<f64>() / n;
        let mean_mpge_b = rows.iter().map(|r| r.mpge_b).sum::<f64>() / n;
        let mean_tt_a = rows.iter().map(|r| r.travel_time_a_s).sum::<f64>() / n;
        let mean_tt_b = rows.iter().map(|r| r.travel_time_b_s).sum::<f64>() / n;
        Self {
            arm_a: arm_label(a.0, a.1),
            arm_b: arm_label(b.0, b.1),
            rows,
            mean_mpge_a,
            mean_mpge_b,
            mean_travel_time_a_s: mean_tt_a,
            mean_travel_time_b_s: mean_tt_b,
            mpge_pct_change: (mean_mpge_b - mean_mpge_a) / mean_mpge_a * 100.0,
            travel_time_pct_change: (mean_tt_b - mean_tt_a) / mean_tt_a * 100.0,
        }
    }
}

pub const EPISODE_CSV_HEADER: &str = "seed,mode,mpge,travel_time_s,fuel_gal_equiv,battery_kwh,distance_mi,initial_soc,final_soc,gap_violations,red_violations,accel_violations";

pub fn episodes_to_csv(episodes: &[EpisodeMetrics]) -> String {
    let mut out = String::from(EPISODE_CSV_HEADER);
    out.push('\n');
    for m in episodes {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.9},{:.9},{:.6},{:.9},{:.9},{},{},{}\n",
            m.seed,
            m.mode,
            m.mpge,
            m.travel_time_s,
            m.fuel_gal_equiv,
            m.battery_kwh,
            m.distance_mi,
            m.initial_soc,
            m.final_soc,
            m.gap_violations,
            m.red_violations,
            m.accel_violations,
        ));
    }
    out
}

pub const COMPARE_CSV_HEADER: &str = "seed,mpge_a,mpge_b,travel_time_a_s,travel_time_b_s,battery_kwh_a,battery_kwh_b,final_soc_a,final_soc_b,violations_a,violations_b";

pub fn compare_to_csv(report: &CompareReport) -> String {
    let mut out = String::from(COMPARE_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.9},{:.9},{:.9},{:.9},{},{}\n",
            r.seed,
            r.mpge_a,
            r.mpge_b,
            r.travel_time_a_s,
            r.travel_time_b_s,
            r.battery_kwh_a,
            r.battery_kwh_b,
            r.final_soc_a,
            r.final_soc_b,
            r.violations_a,
            r.violations_b,
        ));
    }
    out
}
