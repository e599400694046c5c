//! Pre-transmission parallel hybrid powertrain: motor, engine, starter
//! generator, and battery models, the equivalent-consumption torque split,
//! and the precomputed power cost map the planner queries.
//!
//! Component efficiency surfaces are smooth parametric surrogates (a
//! quadratic-loss motor map and a Willans-line engine), fully defined by the
//! config. Efficiencies are always applied in the direction that loses
//! energy: divide when motoring, multiply when regenerating.

use crate::grid::UniformGrid;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const OMEGA_EPS: f64 = 1e-6;
const TORQUE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PowertrainError {
    #[error("motor torque {torque:.1} N·m outside limits at speed {omega:.2} rad/s")]
    TorqueOutOfRange { torque: f64, omega: f64 },
    #[error("battery power {power:.0} W exceeds the deliverable envelope")]
    PowerEnvelopeExceeded { power: f64 },
    #[error("no admissible torque split meets wheel torque {torque:.1} N·m at {speed:.2} m/s")]
    InfeasibleDemand { torque: f64, speed: f64 },
    #[error("cost map query ({v:.2} m/s, {torque:.1} N·m) outside the admissible hull")]
    OutOfHull { v: f64, torque: f64 },
    #[error("powertrain parameter error: {0}")]
    BadParams(String),
    #[error("cost map io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cost map metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotorParams {
    pub torque_max_nm: f64,
    pub power_max_w: f64,
    pub regen_torque_max_nm: f64,
    pub regen_power_max_w: f64,
    pub eta_max: f64,
    pub eta_min: f64,
    pub loss_torque_coeff: f64,
    pub loss_speed_coeff: f64,
    pub torque_ref_nm: f64,
    pub speed_ref_rads: f64,
}

impl Default for MotorParams {
    fn default() -> Self {
        Self {
            torque_max_nm: 2600.0,
            power_max_w: 125_000.0,
            regen_torque_max_nm: 1600.0,
            regen_power_max_w: 40_000.0,
            eta_max: 0.93,
            eta_min: 0.60,
            loss_torque_coeff: 0.12,
            loss_speed_coeff: 0.08,
            torque_ref_nm: 2200.0,
            speed_ref_rads: 70.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineParams {
    pub torque_max_nm: f64,
    pub power_max_w: f64,
    /// Intrinsic conversion efficiency of the Willans line.
    pub willans_eff: f64,
    /// Friction loss power per unit engine speed, W/(rad/s).
    pub friction_w_per_rads: f64,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            torque_max_nm: 1200.0,
            power_max_w: 70_000.0,
            willans_eff: 0.35,
            friction_w_per_rads: 60.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HsgParams {
    pub eta: f64,
}

impl Default for HsgParams {
    fn default() -> Self {
        Self { eta: 0.90 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryParams {
    /// Open-circuit voltage intercept, V.
    pub voc0_v: f64,
    /// Open-circuit voltage slope over SOC, V.
    pub voc_slope_v: f64,
    pub resistance_ohm: f64,
    /// Pack capacity, A·s.
    pub capacity_as: f64,
    pub aux_power_w: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            voc0_v: 320.0,
            voc_slope_v: 60.0,
            resistance_ohm: 0.1,
            capacity_as: 91_000.0,
            aux_power_w: 250.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowertrainParams {
    pub wheel_radius_m: f64,
    /// Speed boundaries between gears, m/s; one fewer entry than ratios.
    pub gear_upshift_speeds_mps: Vec<f64>,
    pub gear_ratios: Vec<f64>,
    pub clutch_eff: f64,
    pub motor: MotorParams,
    pub engine: EngineParams,
    pub hsg: HsgParams,
    pub battery: BatteryParams,
    pub brake_torque_max_nm: f64,
    /// Equivalence-factor schedule: piecewise linear over SOC.
    pub ecms_soc_points: Vec<f64>,
    pub ecms_s_values: Vec<f64>,
    /// Motor-torque candidate count for the split search.
    pub motor_candidates: usize,
}

impl Default for PowertrainParams {
    fn default() -> Self {
        Self {
            wheel_radius_m: 0.32,
            gear_upshift_speeds_mps: vec![],
            gear_ratios: vec![1.0],
            clutch_eff: 0.98,
            motor: MotorParams::default(),
            engine: EngineParams::default(),
            hsg: HsgParams::default(),
            battery: BatteryParams::default(),
            brake_torque_max_nm: 3000.0,
            ecms_soc_points: vec![0.0, 0.3, 0.6, 1.0],
            ecms_s_values: vec![4.0, 2.6, 1.8, 1.0],
            motor_candidates: 101,
        }
    }
}

impl PowertrainParams {
    pub fn validate(&self) -> Result<(), PowertrainError> {
        if self.gear_ratios.is_empty()
            || self.gear_upshift_speeds_mps.len() + 1 != self.gear_ratios.len()
        {
            return Err(PowertrainError::BadParams(
                "gear_ratios must have one more entry than gear_upshift_speeds_mps".into(),
            ));
        }
        if self.gear_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(PowertrainError::BadParams("gear ratios must be positive".into()));
        }
        for (name, eta) in [
            ("clutch_eff", self.clutch_eff),
            ("motor.eta_max", self.motor.eta_max),
            ("motor.eta_min", self.motor.eta_min),
            ("engine.willans_eff", self.engine.willans_eff),
            ("hsg.eta", self.hsg.eta),
        ] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(PowertrainError::BadParams(format!("{name} must be in (0, 1]")));
            }
        }
        if !(self.battery.capacity_as > 0.0) || !(self.battery.resistance_ohm > 0.0) {
            return Err(PowertrainError::BadParams("battery capacity and resistance must be positive".into()));
        }
        if self.voc(0.0) <= 0.0 || self.voc(1.0) <= 0.0 {
            return Err(PowertrainError::BadParams("open-circuit voltage must stay positive".into()));
        }
        if self.ecms_soc_points.len() != self.ecms_s_values.len() || self.ecms_soc_points.len() < 2 {
            return Err(PowertrainError::BadParams("equivalence schedule needs matching point lists".into()));
        }
        if self.motor_candidates < 2 {
            return Err(PowertrainError::BadParams("motor_candidates must be at least 2".into()));
        }
        Ok(())
    }

    pub fn gear_ratio(&self, v: f64) -> f64 {
        let mut idx = 0;
        for (i, &threshold) in self.gear_upshift_speeds_mps.iter().enumerate() {
            if v >= threshold {
                idx = i + 1;
            }
        }
        self.gear_ratios[idx]
    }

    /// Motor shaft speed at vehicle speed `v`, rad/s.
    pub fn motor_speed(&self, v: f64) -> f64 {
        v / (self.wheel_radius_m * self.gear_ratio(v))
    }

    pub fn motor_torque_limit(&self, omega: f64) -> f64 {
        self.motor.torque_max_nm.min(self.motor.power_max_w / omega.max(OMEGA_EPS))
    }

    pub fn regen_torque_limit(&self, omega: f64) -> f64 {
        self.motor.regen_torque_max_nm.min(self.motor.regen_power_max_w / omega.max(OMEGA_EPS))
    }

    pub fn engine_torque_limit(&self, omega: f64) -> f64 {
        self.engine.torque_max_nm.min(self.engine.power_max_w / omega.max(OMEGA_EPS))
    }

    pub fn motor_eta(&self, torque: f64, omega: f64) -> f64 {
        let t = torque.abs() / self.motor.torque_ref_nm;
        let w = omega.abs() / self.motor.speed_ref_rads;
        (self.motor.eta_max
            - self.motor.loss_torque_coeff * t * t
            - self.motor.loss_speed_coeff * w * w)
            .clamp(self.motor.eta_min, self.motor.eta_max)
    }

    pub fn equivalence_factor(&self, soc: f64) -> f64 {
        let xs = &self.ecms_soc_points;
        let ys = &self.ecms_s_values;
        if soc <= xs[0] {
            return ys[0];
        }
        for i in 0..xs.len() - 1 {
            if soc <= xs[i + 1] {
                let w = (soc - xs[i]) / (xs[i + 1] - xs[i]);
                return ys[i] + w * (ys[i + 1] - ys[i]);
            }
        }
        *ys.last().unwrap()
    }

    pub fn voc(&self, soc: f64) -> f64 {
        self.battery.voc0_v + self.battery.voc_slope_v * soc
    }

    /// Wheel-torque envelope at vehicle speed `v`: the lower bound is maximum
    /// regeneration plus friction braking, the upper bound is motor plus
    /// engine through the clutch.
    pub fn wheel_torque_bounds(&self, v: f64) -> (f64, f64) {
        let r = self.gear_ratio(v);
        let omega = self.motor_speed(v);
        let upper = r * (self.motor_torque_limit(omega)
            + self.clutch_eff * self.engine_torque_limit(omega));
        let lower = -r * self.regen_torque_limit(omega) - self.brake_torque_max_nm;
        (lower, upper)
    }
}

fn motor_power_unchecked(torque: f64, omega: f64, params: &PowertrainParams) -> f64 {
    let mech = torque * omega;
    if mech == 0.0 {
        return 0.0;
    }
    let eta = params.motor_eta(torque, omega);
    if mech > 0.0 {
        mech / eta
    } else {
        mech * eta
    }
}

/// Electrical power drawn by (or returned from) the traction motor.
pub fn motor_power(torque: f64, v: f64, params: &PowertrainParams) -> Result<f64, PowertrainError> {
    let omega = params.motor_speed(v);
    if torque > params.motor_torque_limit(omega) + TORQUE_TOL
        || -torque > params.regen_torque_limit(omega) + TORQUE_TOL
    {
        return Err(PowertrainError::TorqueOutOfRange { torque, omega });
    }
    Ok(motor_power_unchecked(torque, omega, params))
}

/// Starter-generator electrical power. Idle (zero torque) in
/// charge-depleting operation, so this contributes nothing to the battery
/// power balance by default.
pub fn hsg_power(torque: f64, omega: f64, params: &PowertrainParams) -> f64 {
    let mech = torque * omega;
    if mech == 0.0 {
        return 0.0;
    }
    if mech > 0.0 {
        mech / params.hsg.eta
    } else {
        mech * params.hsg.eta
    }
}

/// Fuel power of the Willans-line engine. Zero when the engine is off.
pub fn engine_fuel_power(engine_torque: f64, omega: f64, engine_on: bool, params: &PowertrainParams) -> f64 {
    if !engine_on {
        return 0.0;
    }
    debug_assert!(engine_torque >= -TORQUE_TOL);
    (engine_torque.max(0.0) * omega + params.engine.friction_w_per_rads * omega)
        / params.engine.willans_eff
}

#[derive(Debug, Clone, Copy)]
pub struct BatteryStep {
    pub soc_next: f64,
    pub elec_power_w: f64,
    pub current_a: f64,
}

/// Advances the battery by `dt` seconds under terminal power `p_b`.
pub fn battery_step(
    p_b: f64,
    soc: f64,
    params: &PowertrainParams,
    dt: f64,
) -> Result<BatteryStep, PowertrainError> {
    let voc = params.voc(soc);
    let r = params.battery.resistance_ohm;
    let disc = voc * voc - 4.0 * r * p_b;
    if disc < 0.0 {
        return Err(PowertrainError::PowerEnvelopeExceeded { power: p_b });
    }
    let current = (voc - disc.sqrt()) / (2.0 * r);
    Ok(BatteryStep {
        soc_next: soc - current * dt / params.battery.capacity_as,
        elec_power_w: voc * current,
        current_a: current,
    })
}

/// Instantaneous electrochemical power for terminal power `p_b`, without
/// advancing SOC.
fn elec_power(p_b: f64, soc: f64, params: &PowertrainParams) -> Option<(f64, f64)> {
    let voc = params.voc(soc);
    let r = params.battery.resistance_ohm;
    let disc = voc * voc - 4.0 * r * p_b;
    if disc < 0.0 {
        return None;
    }
    let current = (voc - disc.sqrt()) / (2.0 * r);
    Some((voc * current, current))
}

/// One admissible actuator assignment meeting a wheel-torque demand.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TorqueSplit {
    pub motor_torque_nm: f64,
    pub engine_torque_nm: f64,
    pub engine_on: bool,
    pub brake_torque_nm: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitOutcome {
    pub split: TorqueSplit,
    /// Fuel power plus equivalence-weighted electrochemical power, W.
    pub cost_w: f64,
    pub fuel_power_w: f64,
    /// Terminal battery power including auxiliaries, W.
    pub battery_power_w: f64,
    pub elec_power_w: f64,
    pub current_a: f64,
}

fn evaluate_split(
    split: TorqueSplit,
    omega: f64,
    soc: f64,
    s_factor: f64,
    params: &PowertrainParams,
) -> Option<SplitOutcome> {
    let p_m = motor_power_unchecked(split.motor_torque_nm, omega, params);
    let p_hsg = hsg_power(0.0, omega, params);
    let p_b = p_m + p_hsg + params.battery.aux_power_w;
    let (p_elec, current) = elec_power(p_b, soc, params)?;
    let fuel = engine_fuel_power(split.engine_torque_nm, omega, split.engine_on, params);
    Some(SplitOutcome {
        split,
        cost_w: fuel + s_factor * p_elec,
        fuel_power_w: fuel,
        battery_power_w: p_b,
        elec_power_w: p_elec,
        current_a: current,
    })
}

/// Minimum-cost torque split for wheel torque `t_w` at speed `v`.
///
/// Engine-off fixes the motor torque exactly (friction braking only absorbs
/// demand below the regeneration limit); engine-on scans a discretized motor
/// torque candidate set with the engine covering the remainder. Ties break
/// toward the smallest engine torque, then engine off, then the smallest
/// motor torque.
pub fn ecms_split(
    v: f64,
    t_w: f64,
    soc: f64,
    params: &PowertrainParams,
) -> Result<SplitOutcome, PowertrainError> {
    let r = params.gear_ratio(v);
    let omega = params.motor_speed(v);
    let motor_lim = params.motor_torque_limit(omega);
    let regen_lim = params.regen_torque_limit(omega);
    let engine_lim = params.engine_torque_limit(omega);
    let s_factor = params.equivalence_factor(soc);

    let mut best: Option<SplitOutcome> = None;
    let mut consider = |cand: Option<SplitOutcome>| {
        if let Some(c) = cand {
            let better = match &best {
                None => true,
                Some(b) => {
                    let ca = (c.cost_w, c.split.engine_torque_nm.abs(), c.split.engine_on as u8, c.split.motor_torque_nm);
                    let ba = (b.cost_w, b.split.engine_torque_nm.abs(), b.split.engine_on as u8, b.split.motor_torque_nm);
                    ca < ba
                }
            };
            if better {
                best = Some(c);
            }
        }
    };

    // Engine off: the motor meets the demand exactly, spilling into friction
    // braking only past the regeneration limit.
    let t_m_exact = t_w / r;
    if t_m_exact <= motor_lim + TORQUE_TOL {
        if t_m_exact >= -regen_lim - TORQUE_TOL {
            let split = TorqueSplit {
                motor_torque_nm: t_m_exact.clamp(-regen_lim, motor_lim),
                engine_torque_nm: 0.0,
                engine_on: false,
                brake_torque_nm: 0.0,
            };
            consider(evaluate_split(split, omega, soc, s_factor, params));
        } else {
            let t_m = -regen_lim;
            let brake = r * t_m - t_w;
            if brake <= params.brake_torque_max_nm + TORQUE_TOL {
                let split = TorqueSplit {
                    motor_torque_nm: t_m,
                    engine_torque_nm: 0.0,
                    engine_on: false,
                    brake_torque_nm: brake.max(0.0),
                };
                consider(evaluate_split(split, omega, soc, s_factor, params));
            }
        }
    }

    // Engine on: scan motor candidates, engine covers the remainder through
    // the clutch. No friction braking while the engine drives.
    let n = params.motor_candidates;
    let lo = -regen_lim;
    let span = motor_lim + regen_lim;
    for i in 0..n {
        let t_m = lo + span * i as f64 / (n - 1) as f64;
        let t_e = (t_w / r - t_m) / params.clutch_eff;
        if t_e < -TORQUE_TOL || t_e > engine_lim + TORQUE_TOL {
            continue;
        }
        let split = TorqueSplit {
            motor_torque_nm: t_m,
            engine_torque_nm: t_e.max(0.0),
            engine_on: true,
            brake_torque_nm: 0.0,
        };
        consider(evaluate_split(split, omega, soc, s_factor, params));
    }

    best.ok_or(PowertrainError::InfeasibleDemand { torque: t_w, speed: v })
}

/// Grid axes of a cost map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMapGrids {
    pub soc: UniformGrid,
    pub speed: UniformGrid,
    pub torque: UniformGrid,
}

impl CostMapGrids {
    pub fn validate(&self) -> Result<(), PowertrainError> {
        if self.soc.n() > 1 && (self.soc.step() - 0.01).abs() > 1e-9 {
            return Err(PowertrainError::BadParams(format!(
                "SOC grid step must be 0.01, got {}",
                self.soc.step()
            )));
        }
        if self.speed.n() < 2 || self.torque.n() < 2 {
            return Err(PowertrainError::BadParams("speed and torque grids need >= 2 points".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostMapMeta {
    pub grids: CostMapGrids,
    pub params_hash: String,
    pub created_unix_s: u64,
}

/// Precomputed minimum power cost over (SOC plane, speed, wheel torque).
/// Inadmissible cells hold NaN.
#[derive(Debug, Clone)]
pub struct CostMap {
    pub meta: CostMapMeta,
    values: Vec<f64>,
}

/// A single SOC plane of the cost map, for tight planner loops.
#[derive(Debug, Clone, Copy)]
pub struct CostPlane<'a> {
    speed: &'a UniformGrid,
    torque: &'a UniformGrid,
    values: &'a [f64],
}

impl<'a> CostPlane<'a> {
    /// Bilinear interpolation; `None` when outside the hull or when any
    /// corner of the enclosing cell is inadmissible.
    pub fn lookup(&self, v: f64, t_w: f64) -> Option<f64> {
        let (iv, wv) = self.speed.bracket(v)?;
        let (it, wt) = self.torque.bracket(t_w)?;
        let nt = self.torque.n();
        let idx = |i: usize, j: usize| i * nt + j;
        let c00 = self.values[idx(iv, it)];
        let (c01, c10, c11);
        if self.speed.n() == 1 {
            c10 = c00;
        } else {
            c10 = self.values[idx(iv + 1, it)];
        }
        if self.torque.n() == 1 {
            c01 = c00;
            c11 = c10;
        } else {
            c01 = self.values[idx(iv, it + 1)];
            c11 = if self.speed.n() == 1 { c01 } else { self.values[idx(iv + 1, it + 1)] };
        }
        if c00.is_nan() || c01.is_nan() || c10.is_nan() || c11.is_nan() {
            return None;
        }
        let a = c00 + (c01 - c00) * wt;
        let b = c10 + (c11 - c10) * wt;
        Some(a + (b - a) * wv)
    }

    pub fn torque_hull(&self) -> (f64, f64) {
        (self.torque.lo(), self.torque.hi())
    }
}

pub fn params_hash(params: &PowertrainParams) -> String {
    let json = serde_json::to_string(params).expect("params serialize");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Pre-optimizes the torque-split cost over the full grid.
pub fn build_cost_map(
    params: &PowertrainParams,
    grids: &CostMapGrids,
) -> Result<CostMap, PowertrainError> {
    params.validate()?;
    grids.validate()?;
    let n_soc = grids.soc.n();
    let n_v = grids.speed.n();
    let n_t = grids.torque.n();
    let mut values = vec![f64::NAN; n_soc * n_v * n_t];

    values
        .par_chunks_mut(n_v * n_t)
        .enumerate()
        .for_each(|(is, plane)| {
            let soc = grids.soc.value(is);
            for iv in 0..n_v {
                let v = grids.speed.value(iv);
                let (t_lo, t_hi) = params.wheel_torque_bounds(v);
                for it in 0..n_t {
                    let t_w = grids.torque.value(it);
                    if t_w < t_lo - TORQUE_TOL || t_w > t_hi + TORQUE_TOL {
                        continue;
                    }
                    if let Ok(outcome) = ecms_split(v, t_w, soc, params) {
                        plane[iv * n_t + it] = outcome.cost_w;
                    }
                }
            }
        });

    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(CostMap {
        meta: CostMapMeta {
            grids: grids.clone(),
            params_hash: params_hash(params),
            created_unix_s: created,
        },
        values,
    })
}

impl CostMap {
    /// Assembles a map from externally computed values, e.g. a synthetic
    /// cost surface. Values are row-major over (soc, speed, torque).
    pub fn from_values(grids: CostMapGrids, values: Vec<f64>, label: &str) -> Self {
        assert_eq!(values.len(), grids.soc.n() * grids.speed.n() * grids.torque.n());
        Self {
            meta: CostMapMeta {
                grids,
                params_hash: label.to_string(),
                created_unix_s: 0,
            },
            values,
        }
    }

    pub fn grids(&self) -> &CostMapGrids {
        &self.meta.grids
    }

    pub fn plane_index(&self, soc: f64) -> usize {
        self.meta.grids.soc.nearest(soc)
    }

    pub fn plane(&self, soc: f64) -> CostPlane<'_> {
        let n_v = self.meta.grids.speed.n();
        let n_t = self.meta.grids.torque.n();
        let is = self.plane_index(soc);
        CostPlane {
            speed: &self.meta.grids.speed,
            torque: &self.meta.grids.torque,
            values: &self.values[is * n_v * n_t..(is + 1) * n_v * n_t],
        }
    }

    pub fn cell(&self, is: usize, iv: usize, it: usize) -> f64 {
        let n_v = self.meta.grids.speed.n();
        let n_t = self.meta.grids.torque.n();
        self.values[(is * n_v + iv) * n_t + it]
    }

    /// Interpolated cost at (`v`, `t_w`) on the SOC plane nearest to `soc`.
    pub fn lookup(&self, v: f64, t_w: f64, soc: f64) -> Result<f64, PowertrainError> {
        self.plane(soc)
            .lookup(v, t_w)
            .ok_or(PowertrainError::OutOfHull { v, torque: t_w })
    }

    /// Writes the value tensor as little-endian f64 plus a JSON sidecar at
    /// `<path>.meta.json`.
    pub fn save(&self, path: &Path) -> Result<(), PowertrainError> {
        let mut file = std::fs::File::create(path)?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
        let meta_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| PowertrainError::Meta(e.to_string()))?;
        std::fs::write(meta_path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PowertrainError> {
        let meta_json = std::fs::read_to_string(sidecar_path(path))?;
        let meta: CostMapMeta =
            serde_json::from_str(&meta_json).map_err(|e| PowertrainError::Meta(e.to_string()))?;
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let expected = meta.grids.soc.n() * meta.grids.speed.n() * meta.grids.torque.n();
        if bytes.len() != expected * 8 {
            return Err(PowertrainError::Meta(format!(
                "value tensor holds {} bytes, metadata expects {}",
                bytes.len(),
                expected * 8
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { meta, values })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// Default cost-map grids for the default powertrain.
pub fn default_grids() -> CostMapGrids {
    CostMapGrids {
        soc: UniformGrid::from_range(0.60, 0.95, 36),
        speed: UniformGrid::from_range(0.0, 20.0, 41),
        torque: UniformGrid::from_range(-4600.0, 3400.0, 161),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> PowertrainParams {
        PowertrainParams::default()
    }

    /// Flat 0.9 efficiency motor for direction checks.
    fn flat_eta_params() -> PowertrainParams {
        let mut p = params();
        p.motor.eta_max = 0.9;
        p.motor.eta_min = 0.9;
        p.motor.loss_torque_coeff = 0.0;
        p.motor.loss_speed_coeff = 0.0;
        p
    }

    #[test]
    fn motor_power_zero_torque() {
        assert_eq!(motor_power(0.0, 12.0, &params()).unwrap(), 0.0);
    }

    #[test]
    fn motor_power_direction_of_efficiency() {
        let p = flat_eta_params();
        // omega = v / R_w = 31.25 rad/s at 10 m/s; pick torque for 9 kW mech.
        let omega = p.motor_speed(10.0);
        let t = 9000.0 / omega;
        let pm = motor_power(t, 10.0, &p).unwrap();
        assert!((pm - 10_000.0).abs() < 1e-9, "motoring {pm}");
        let t = -10_000.0 / omega;
        let pm = motor_power(t, 10.0, &p).unwrap();
        assert!((pm + 9000.0).abs() < 1e-9, "regen {pm}");
    }

    #[test]
    fn motor_power_rejects_out_of_range() {
        let p = params();
        let omega = p.motor_speed(15.0);
        let lim = p.motor_torque_limit(omega);
        assert!(matches!(
            motor_power(lim + 1.0, 15.0, &p),
            Err(PowertrainError::TorqueOutOfRange { .. })
        ));
        let rl = p.regen_torque_limit(omega);
        assert!(motor_power(-rl - 1.0, 15.0, &p).is_err());
    }

    #[test]
    fn battery_zero_power_identity() {
        let p = params();
        let out = battery_step(0.0, 0.8, &p, 0.2).unwrap();
        assert_eq!(out.current_a, 0.0);
        assert_eq!(out.soc_next, 0.8);
        assert_eq!(out.elec_power_w, 0.0);
    }

    #[test]
    fn battery_regen_raises_soc() {
        let p = params();
        let out = battery_step(-20_000.0, 0.8, &p, 1.0).unwrap();
        assert!(out.current_a < 0.0);
        assert!(out.soc_next > 0.8);
        assert!(out.elec_power_w < 0.0);
    }

    #[test]
    fn battery_closed_form_oracle() {
        let mut p = params();
        p.battery.voc0_v = 350.0;
        p.battery.voc_slope_v = 0.0;
        p.battery.resistance_ohm = 0.1;
        let out = battery_step(10_000.0, 0.5, &p, 1.0).unwrap();
        // Quadratic root by hand: i = (350 - sqrt(350^2 - 4*0.1*1e4)) / 0.2.
        let expected_i = (350.0 - (350.0_f64 * 350.0 - 4000.0).sqrt()) / 0.2;
        assert!((out.current_a - expected_i).abs() < 1e-9);
        assert!((expected_i - 28.8086).abs() < 1e-3);
        assert!(out.elec_power_w > 10_000.0);
    }

    #[test]
    fn battery_envelope_error() {
        let p = params();
        let voc = p.voc(0.5);
        let max_power = voc * voc / (4.0 * p.battery.resistance_ohm);
        assert!(matches!(
            battery_step(max_power * 1.01, 0.5, &p, 1.0),
            Err(PowertrainError::PowerEnvelopeExceeded { .. })
        ));
    }

    #[test]
    fn battery_power_identity() {
        let p = params();
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let p_b = -60_000.0 + 160_000.0 * next();
            let soc = 0.6 + 0.35 * next();
            let out = battery_step(p_b, soc, &p, 0.2).unwrap();
            let rhs = p_b + out.current_a * out.current_a * p.battery.resistance_ohm;
            let denom = out.elec_power_w.abs().max(1.0);
            assert!((out.elec_power_w - rhs).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn ecms_regen_is_negative_cost() {
        let p = params();
        let out = ecms_split(12.0, -1200.0, 0.9, &p).unwrap();
        assert!(!out.split.engine_on);
        assert!(out.split.motor_torque_nm < 0.0);
        assert!(out.cost_w < 0.0, "cost {}", out.cost_w);
        assert_eq!(out.split.brake_torque_nm, 0.0);
    }

    #[test]
    fn ecms_zero_demand_zero_aux_is_free() {
        let mut p = params();
        p.battery.aux_power_w = 0.0;
        let out = ecms_split(8.0, 0.0, 0.9, &p).unwrap();
        assert_eq!(out.cost_w, 0.0);
        assert_eq!(out.split.motor_torque_nm, 0.0);
        assert_eq!(out.split.engine_torque_nm, 0.0);
        assert!(!out.split.engine_on);
        assert_eq!(out.split.brake_torque_nm, 0.0);
    }

    #[test]
    fn ecms_prefers_electric_at_high_soc() {
        let p = params();
        let out = ecms_split(10.0, 800.0, 0.92, &p).unwrap();
        assert!(!out.split.engine_on, "engine chosen: {:?}", out.split);

        // Exhaustive oracle over a refined motor-candidate set, engine on and
        // off, evaluated with the same physics.
        let r = p.gear_ratio(10.0);
        let omega = p.motor_speed(10.0);
        let s = p.equivalence_factor(0.92);
        let motor_lim = p.motor_torque_limit(omega);
        let regen_lim = p.regen_torque_limit(omega);
        let engine_lim = p.engine_torque_limit(omega);
        let mut oracle_best = f64::INFINITY;
        let mut oracle_engine_on = true;
        // Engine off exact split.
        let t_m = 800.0 / r;
        if t_m <= motor_lim {
            let split = TorqueSplit {
                motor_torque_nm: t_m,
                engine_torque_nm: 0.0,
                engine_on: false,
                brake_torque_nm: 0.0,
            };
            let o = evaluate_split(split, omega, 0.92, s, &p).unwrap();
            if o.cost_w < oracle_best {
                oracle_best = o.cost_w;
                oracle_engine_on = false;
            }
        }
        for i in 0..=1000 {
            let t_m = -regen_lim + (motor_lim + regen_lim) * i as f64 / 1000.0;
            let t_e = (800.0 / r - t_m) / p.clutch_eff;
            if !(0.0..=engine_lim).contains(&t_e) {
                continue;
            }
            let split = TorqueSplit {
                motor_torque_nm: t_m,
                engine_torque_nm: t_e,
                engine_on: true,
                brake_torque_nm: 0.0,
            };
            let o = evaluate_split(split, omega, 0.92, s, &p).unwrap();
            if o.cost_w < oracle_best {
                oracle_best = o.cost_w;
                oracle_engine_on = true;
            }
        }
        assert!(!oracle_engine_on);
        assert!(out.cost_w <= oracle_best + 1e-9);
    }

    #[test]
    fn ecms_saturated_regen_uses_friction() {
        let p = params();
        let omega = p.motor_speed(15.0);
        let regen_lim = p.regen_torque_limit(omega);
        let demand = -(regen_lim + 1000.0);
        let out = ecms_split(15.0, demand, 0.8, &p).unwrap();
        assert!((out.split.motor_torque_nm + regen_lim).abs() < 1e-9);
        assert!((out.split.brake_torque_nm - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn ecms_infeasible_demand() {
        let p = params();
        let (lo, hi) = p.wheel_torque_bounds(10.0);
        assert!(matches!(
            ecms_split(10.0, hi + 100.0, 0.8, &p),
            Err(PowertrainError::InfeasibleDemand { .. })
        ));
        assert!(ecms_split(10.0, lo - 100.0, 0.8, &p).is_err());
    }

    #[test]
    fn ecms_lower_envelope_against_refined_oracle() {
        let p = params();
        for &(v, t_w, soc) in
            &[(6.0, 900.0, 0.75), (14.0, 2200.0, 0.68), (17.0, 1500.0, 0.92), (9.0, -700.0, 0.85)]
        {
            let ours = ecms_split(v, t_w, soc, &p).unwrap();
            let r = p.gear_ratio(v);
            let omega = p.motor_speed(v);
            let s = p.equivalence_factor(soc);
            let motor_lim = p.motor_torque_limit(omega);
            let regen_lim = p.regen_torque_limit(omega);
            let engine_lim = p.engine_torque_limit(omega);
            let mut oracle = f64::INFINITY;
            let t_m_off = t_w / r;
            if (-regen_lim..=motor_lim).contains(&t_m_off) {
                let split = TorqueSplit {
                    motor_torque_nm: t_m_off,
                    engine_torque_nm: 0.0,
                    engine_on: false,
                    brake_torque_nm: 0.0,
                };
                oracle = oracle.min(evaluate_split(split, omega, soc, s, &p).unwrap().cost_w);
            }
            let refined = 2001;
            let mut neighbor_gap: f64 = 0.0;
            let mut prev: Option<f64> = None;
            for i in 0..refined {
                let t_m = -regen_lim + (motor_lim + regen_lim) * i as f64 / (refined - 1) as f64;
                let t_e = (t_w / r - t_m) / p.clutch_eff;
                if !(0.0..=engine_lim).contains(&t_e) {
                    prev = None;
                    continue;
                }
                let split = TorqueSplit {
                    motor_torque_nm: t_m,
                    engine_torque_nm: t_e,
                    engine_on: true,
                    brake_torque_nm: 0.0,
                };
                let c = evaluate_split(split, omega, soc, s, &p).unwrap().cost_w;
                if let Some(pc) = prev {
                    neighbor_gap = neighbor_gap.max((c - pc).abs());
                }
                prev = Some(c);
                oracle = oracle.min(c);
            }
            // One candidate-grid quantization step of cost: the refined grid
            // is 20x finer than the production candidate set.
            let quant = neighbor_gap * 20.0 + 1e-9;
            assert!(
                oracle >= ours.cost_w - quant,
                "v={v} t_w={t_w}: oracle {oracle} vs ours {} (quant {quant})",
                ours.cost_w
            );
        }
    }

    fn small_grids() -> CostMapGrids {
        CostMapGrids {
            soc: UniformGrid::from_range(0.90, 0.92, 3),
            speed: UniformGrid::from_range(0.0, 20.0, 21),
            torque: UniformGrid::from_range(-4600.0, 3400.0, 41),
        }
    }

    #[test]
    fn cost_map_cells_match_fresh_splits() {
        let p = params();
        let grids = small_grids();
        let map = build_cost_map(&p, &grids).unwrap();
        for (is, iv, it) in [(0, 5, 20), (2, 10, 30), (1, 20, 10)] {
            let soc = grids.soc.value(is);
            let v = grids.speed.value(iv);
            let t_w = grids.torque.value(it);
            let cell = map.cell(is, iv, it);
            match ecms_split(v, t_w, soc, &p) {
                Ok(o) => assert_eq!(cell, o.cost_w, "cell ({is},{iv},{it})"),
                Err(_) => assert!(cell.is_nan()),
            }
        }
    }

    #[test]
    fn cost_map_node_lookup_is_bit_exact() {
        let p = params();
        let grids = small_grids();
        let map = build_cost_map(&p, &grids).unwrap();
        let v = grids.speed.value(8);
        let t_w = grids.torque.value(25);
        let soc = grids.soc.value(2);
        let looked = map.lookup(v, t_w, soc).unwrap();
        assert_eq!(looked, map.cell(2, 8, 25));
    }

    #[test]
    fn cost_map_midpoint_is_arithmetic_mean_along_speed() {
        let p = params();
        let grids = small_grids();
        let map = build_cost_map(&p, &grids).unwrap();
        let it = 25;
        let t_w = grids.torque.value(it);
        let v_mid = (grids.speed.value(8) + grids.speed.value(9)) / 2.0;
        let looked = map.lookup(v_mid, t_w, grids.soc.value(1)).unwrap();
        let mean = (map.cell(1, 8, it) + map.cell(1, 9, it)) / 2.0;
        assert!((looked - mean).abs() < 1e-9);
    }

    #[test]
    fn cost_map_out_of_hull() {
        let p = params();
        let map = build_cost_map(&p, &small_grids()).unwrap();
        // Beyond the per-speed torque limit the cells are inadmissible.
        assert!(matches!(
            map.lookup(18.0, 3300.0, 0.92),
            Err(PowertrainError::OutOfHull { .. })
        ));
        assert!(map.lookup(25.0, 0.0, 0.92).is_err());
    }

    #[test]
    fn cost_map_monotone_in_torque_in_electric_region() {
        let p = params();
        let grids = small_grids();
        let map = build_cost_map(&p, &grids).unwrap();
        let soc = 0.92;
        let is = map.plane_index(soc);
        for iv in 1..grids.speed.n() {
            let v = grids.speed.value(iv);
            let omega = p.motor_speed(v);
            let elec_max = p.gear_ratio(v) * p.motor_torque_limit(omega);
            let mut prev = f64::NEG_INFINITY;
            for it in 0..grids.torque.n() {
                let t_w = grids.torque.value(it);
                if t_w > elec_max {
                    break;
                }
                let c = map.cell(is, iv, it);
                if c.is_nan() {
                    continue;
                }
                assert!(c >= prev - 1e-9, "v={v} t_w={t_w}: {c} < {prev}");
                prev = c;
            }
        }
    }

    #[test]
    fn cost_map_roundtrip() {
        let p = params();
        let map = build_cost_map(&p, &small_grids()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.bin");
        map.save(&path).unwrap();
        let loaded = CostMap::load(&path).unwrap();
        assert_eq!(loaded.meta.params_hash, map.meta.params_hash);
        assert_eq!(loaded.grids(), map.grids());
        for is in 0..3 {
            for iv in 0..21 {
                for it in 0..41 {
                    let a = map.cell(is, iv, it);
                    let b = loaded.cell(is, iv, it);
                    assert!(a == b || (a.is_nan() && b.is_nan()));
                }
            }
        }
    }

    #[test]
    fn equivalence_factor_interpolates() {
        let p = params();
        assert_eq!(p.equivalence_factor(0.0), 4.0);
        assert_eq!(p.equivalence_factor(1.0), 1.0);
        let s = p.equivalence_factor(0.45);
        assert!((s - (2.6 + (1.8 - 2.6) * 0.5)).abs() < 1e-12);
        assert_eq!(p.equivalence_factor(-0.2), 4.0);
        assert_eq!(p.equivalence_factor(1.3), 1.0);
    }

    #[test]
    fn gear_table() {
        let mut p = params();
        p.gear_upshift_speeds_mps = vec![5.0, 11.0];
        p.gear_ratios = vec![3.0, 2.0, 1.0];
        assert_eq!(p.gear_ratio(2.0), 3.0);
        assert_eq!(p.gear_ratio(5.0), 2.0);
        assert_eq!(p.gear_ratio(30.0), 1.0);
        assert!(p.validate().is_ok());
        p.gear_ratios = vec![3.0];
        assert!(p.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn split_reconstructs_demand(
            v in 0.5..19.0f64,
            frac in 0.02..0.98f64,
            soc in 0.62..0.94f64,
        ) {
            let p = params();
            let (lo, hi) = p.wheel_torque_bounds(v);
            let t_w = lo + frac * (hi - lo);
            let out = ecms_split(v, t_w, soc, &p).unwrap();
            let s = &out.split;
            let r = p.gear_ratio(v);
            let rebuilt = r * (s.motor_torque_nm
                + if s.engine_on { p.clutch_eff * s.engine_torque_nm } else { 0.0 })
                - s.brake_torque_nm;
            prop_assert!((rebuilt - t_w).abs() < 1e-6, "rebuilt {rebuilt} vs {t_w}");
            prop_assert!(s.brake_torque_nm >= 0.0);
            if s.brake_torque_nm > 0.0 {
                // Friction engages only past the regeneration limit.
                let omega = p.motor_speed(v);
                prop_assert!((s.motor_torque_nm + p.regen_torque_limit(omega)).abs() < 1e-9);
            }
        }
    }
}
