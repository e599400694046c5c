//! Receding-horizon velocity planner.
//!
//! Backward dynamic programming over a (speed, travel time) grid across a
//! spatial horizon. Stage cost is the powertrain power cost at the anchor
//! SOC plus a travel-time weight; arrival times that fall inside estimated
//! red windows are pruned through the signal predicates; the cost beyond the
//! horizon is a cached table averaging tail solves over sampled schedule
//! scenarios, with the soft arrival-deadline penalty folded into each tail's
//! terminal stage at the destination.

use crate::grid::UniformGrid;
use crate::powertrain::{CostMap, CostPlane, PowertrainParams};
use crate::signals::{
    downstream_infeasible_raw, first_infeasible_raw, sample_scenario, IntersectionTimingModel,
    LiveSpat, RealizedSignal, TrafficModel,
};
use crate::vehicle::{acceleration, AccelLimits, RouteSpec, State, VehicleParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("anchor state admits no feasible path through the horizon")]
    NoFeasiblePath,
    #[error("query at {pos_m:.1} m is beyond the policy horizon ending at {horizon_end_m:.1} m")]
    StalePolicyBeyondHorizon { pos_m: f64, horizon_end_m: f64 },
    #[error(transparent)]
    Powertrain(#[from] crate::powertrain::PowertrainError),
}

/// Grid resolution of the tail solves behind the terminal cost table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalGridConfig {
    pub step_m: f64,
    pub n_v: usize,
    pub n_t: usize,
    pub torque_candidates: usize,
    /// Tables are cached per anchor position rounded to this lattice, m.
    pub cache_lattice_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    /// Receding horizon length, m.
    pub horizon_m: f64,
    /// Spatial step of the planning grid, m.
    pub step_m: f64,
    pub n_v: usize,
    pub n_t: usize,
    pub torque_candidates: usize,
    /// Travel-time weight in the stage cost, W per (s/step).
    pub lambda_w: f64,
    /// Weight on the squared arrival-deadline slack.
    pub beta: f64,
    /// Desired total travel time over the route, s.
    pub desired_travel_time_s: f64,
    /// Empirical average speed over the remaining route, m/s.
    pub avg_speed_mps: f64,
    /// Scenario count behind each terminal table.
    pub terminal_scenarios: usize,
    /// Lowest speed on the planning grid, m/s.
    pub v_floor_mps: f64,
    /// Travel-time grid upper bounds are capped at desired time plus this, s.
    pub time_margin_s: f64,
    pub terminal: TerminalGridConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon_m: 400.0,
            step_m: 1.0,
            n_v: 30,
            n_t: 60,
            torque_candidates: 101,
            lambda_w: 3400.0,
            beta: 40.0,
            desired_travel_time_s: 290.0,
            avg_speed_mps: 10.0,
            terminal_scenarios: 4,
            v_floor_mps: crate::vehicle::V_FLOOR,
            time_margin_s: 90.0,
            terminal: TerminalGridConfig {
                step_m: 10.0,
                n_v: 12,
                n_t: 24,
                torque_candidates: 15,
                cache_lattice_m: 50.0,
            },
        }
    }
}

impl PlannerConfig {
    /// Coarse preset for large Monte-Carlo batches. The time weight scales
    /// with the inverse spatial step so the energy/time trade matches the
    /// fine default.
    pub fn fast() -> Self {
        Self {
            step_m: 5.0,
            n_v: 15,
            n_t: 25,
            torque_candidates: 25,
            lambda_w: 680.0,
            terminal: TerminalGridConfig {
                step_m: 25.0,
                n_v: 10,
                n_t: 18,
                torque_candidates: 11,
                cache_lattice_m: 50.0,
            },
            ..Self::default()
        }
    }

    fn time_cap(&self) -> f64 {
        self.desired_travel_time_s + self.time_margin_s
    }
}

/// Which energy term the stage cost uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostModelKind {
    /// Precomputed powertrain power cost map.
    PowerMap,
    /// Positive wheel work only, no regeneration credit.
    WheelEnergy,
}

/// Stage cost: energy term from the cost map plus the travel-time weight.
pub fn stage_cost(
    v: f64,
    wheel_torque_nm: f64,
    soc: f64,
    map: &CostMap,
    lambda_w: f64,
    ds_m: f64,
) -> Result<f64, crate::powertrain::PowertrainError> {
    Ok(map.lookup(v, wheel_torque_nm, soc)? + lambda_w * ds_m / v)
}

/// Positive wheel work over one step, J. Braking earns no credit.
pub fn wheel_energy_cost(wheel_torque_nm: f64, ds_m: f64, wheel_radius_m: f64) -> f64 {
    wheel_torque_nm.max(0.0) * ds_m / wheel_radius_m
}

/// Soft arrival-deadline penalty evaluated at a horizon-end cell.
///
/// The slack is the remaining distance minus what the empirical average
/// speed covers in the remaining desired time; only lateness (positive
/// slack) is penalized.
pub fn slack_cost(
    arrival_time_s: f64,
    horizon_end_m: f64,
    route_len_m: f64,
    desired_travel_time_s: f64,
    avg_speed_mps: f64,
    beta: f64,
) -> f64 {
    let gamma =
        (route_len_m - horizon_end_m) - (desired_travel_time_s - arrival_time_s) * avg_speed_mps;
    if gamma > 0.0 {
        beta * gamma * gamma
    } else {
        0.0
    }
}

fn hash64(bytes: &[u8]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Cache identity of a terminal table: lattice position, grid layout, and
/// the statistics the scenarios are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TerminalKey {
    pub lattice: i64,
    pub grid_hash: u64,
    pub stats_hash: u64,
}

/// Expected cost-to-go from horizon end to the destination, tabulated over
/// the (speed, arrival time) grid at the horizon-end position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminalCostTable {
    pub pos_m: f64,
    pub v_grid: UniformGrid,
    pub t_grid: UniformGrid,
    /// Row-major (v, t); infeasible cells hold +inf.
    pub values: Vec<f64>,
    pub key: TerminalKey,
}

impl TerminalCostTable {
    pub fn constant(pos_m: f64, v_grid: UniformGrid, t_grid: UniformGrid, value: f64) -> Self {
        let n = v_grid.n() * t_grid.n();
        Self {
            pos_m,
            v_grid,
            t_grid,
            values: vec![value; n],
            key: TerminalKey { lattice: 0, grid_hash: 0, stats_hash: 0 },
        }
    }

    /// Bilinear evaluation with queries clamped onto the hull. Infinity
    /// propagates from any touched corner.
    pub fn eval(&self, v: f64, t: f64) -> f64 {
        let vq = v.clamp(self.v_grid.lo(), self.v_grid.hi());
        let tq = t.clamp(self.t_grid.lo(), self.t_grid.hi());
        let (iv, wv) = self.v_grid.bracket(vq).expect("clamped v inside hull");
        let (it, wt) = self.t_grid.bracket(tq).expect("clamped t inside hull");
        let nt = self.t_grid.n();
        let get = |i: usize, j: usize| self.values[i * nt + j];
        let c00 = get(iv, it);
        let c10 = if self.v_grid.n() > 1 { get(iv + 1, it) } else { c00 };
        let (c01, c11) = if nt > 1 {
            (
                get(iv, it + 1),
                if self.v_grid.n() > 1 { get(iv + 1, it + 1) } else { get(iv, it + 1) },
            )
        } else {
            (c00, c10)
        };
        if !c00.is_finite() || !c01.is_finite() || !c10.is_finite() || !c11.is_finite() {
            return f64::INFINITY;
        }
        let a = c00 + (c01 - c00) * wt;
        let b = c10 + (c11 - c10) * wt;
        a + (b - a) * wv
    }
}

// ---------------------------------------------------------------------------
// Backward sweep machinery shared by horizon solves and terminal tail solves.
// ---------------------------------------------------------------------------

pub(crate) enum EnergyModel<'a> {
    PowerMap(CostPlane<'a>),
    WheelEnergy { wheel_radius_m: f64 },
}

impl EnergyModel<'_> {
    #[inline]
    fn stage(&self, v: f64, torque: f64, ds_m: f64) -> Option<f64> {
        match self {
            EnergyModel::PowerMap(plane) => plane.lookup(v, torque),
            EnergyModel::WheelEnergy { wheel_radius_m } => {
                Some(wheel_energy_cost(torque, ds_m, *wheel_radius_m))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum GatePredicate {
    First { phase: crate::signals::Phase, remaining_s: f64, cycle_s: f64, red_est_s: f64 },
    Downstream { cycle_s: f64, offset_s: f64, red_est_s: f64 },
}

impl GatePredicate {
    #[inline]
    fn infeasible(&self, f_t: f64) -> bool {
        match *self {
            GatePredicate::First { phase, remaining_s, cycle_s, red_est_s } => {
                first_infeasible_raw(f_t, phase, remaining_s, cycle_s, red_est_s)
            }
            GatePredicate::Downstream { cycle_s, offset_s, red_est_s } => {
                downstream_infeasible_raw(f_t, offset_s, cycle_s, red_est_s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SignalGate {
    /// The transition index k whose arrival (at step k+1) crosses the light.
    pub transition_k: usize,
    pub predicate: GatePredicate,
}

pub(crate) enum Terminal<'a> {
    Table(&'a TerminalCostTable),
    Slack { end_pos_m: f64, route_len_m: f64, desired_s: f64, avg_speed: f64, beta: f64 },
}

impl Terminal<'_> {
    fn eval(&self, v: f64, t: f64) -> f64 {
        match *self {
            Terminal::Table(table) => table.eval(v, t),
            Terminal::Slack { end_pos_m, route_len_m, desired_s, avg_speed, beta } => {
                slack_cost(t, end_pos_m, route_len_m, desired_s, avg_speed, beta)
            }
        }
    }
}

pub(crate) struct SweepSpec<'a> {
    pub n_steps: usize,
    pub ds_m: f64,
    pub v_grid: UniformGrid,
    /// One grid per step, length n_steps + 1.
    pub t_grids: Vec<UniformGrid>,
    pub gates: Vec<SignalGate>,
    /// Per step 0..=n_steps.
    pub speed_limits: Vec<f64>,
    /// Per transition 0..n_steps.
    pub grades: Vec<f64>,
    pub energy: EnergyModel<'a>,
    pub lambda_w: f64,
    pub accel: AccelLimits,
    pub veh: &'a VehicleParams,
    pub pt: &'a PowertrainParams,
    pub torque_candidates: usize,
    pub terminal: Terminal<'a>,
}

pub(crate) struct SweepResult {
    /// values[k] is row-major (v, t) over t_grids[k]; length n_steps + 1.
    pub values: Vec<Vec<f64>>,
    /// torques[k] matches values[k]; length n_steps.
    pub torques: Vec<Vec<f64>>,
}

/// Penalty substituted for an infeasible corner during value interpolation.
/// It dominates any real cost sum, so optimal paths steer away from dead
/// regions in proportion to how much interpolation weight touches them.
/// Hard rejection instead of a penalty would erode feasibility by one time
/// node per backward step from any boundary, wiping practical grids; a cell
/// is infeasible only when no candidate survives the exact gate, hull, and
/// physics checks.
const INFEASIBLE_CORNER_PENALTY: f64 = 1e10;

struct Cand {
    torque: f64,
    stage: f64,
    dt: f64,
    f_v: f64,
    iv: usize,
    wv: f64,
}

pub(crate) fn backward_sweep(spec: &SweepSpec<'_>) -> SweepResult {
    let k_end = spec.n_steps;
    let nv = spec.v_grid.n();
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(k_end + 1);
    let mut torques: Vec<Vec<f64>> = vec![Vec::new(); k_end];

    // Terminal layer.
    let t_last = &spec.t_grids[k_end];
    let mut last = vec![f64::INFINITY; nv * t_last.n()];
    for i in 0..nv {
        let v = spec.v_grid.value(i);
        if v > spec.speed_limits[k_end] + 1e-9 {
            continue;
        }
        for j in 0..t_last.n() {
            last[i * t_last.n() + j] = spec.terminal.eval(v, t_last.value(j));
        }
    }
    values.push(last);

    let mut cands: Vec<Cand> = Vec::with_capacity(spec.torque_candidates);

    for k in (0..k_end).rev() {
        let t_grid = &spec.t_grids[k];
        let t_next = &spec.t_grids[k + 1];
        let nt = t_grid.n();
        let nt_next = t_next.n();
        let next_values = &values[values.len() - 1];
        let limit_next = spec.speed_limits[k + 1];
        let grade = spec.grades[k];
        let gates: Vec<&SignalGate> = spec.gates.iter().filter(|g| g.transition_k == k).collect();

        let mut layer = vec![f64::INFINITY; nv * nt];
        let mut layer_t = vec![0.0f64; nv * nt];

        for i in 0..nv {
            let v = spec.v_grid.value(i);
            let (pt_lo, pt_hi) = spec.pt.wheel_torque_bounds(v);
            for j in 0..nt {
                layer_t[i * nt + j] = pt_lo;
            }
            if v > spec.speed_limits[k] + 1e-9 {
                continue;
            }
            let res = spec.veh.resistance_accel(v, grade);
            let mr = spec.veh.mass_kg * spec.veh.wheel_radius_m;
            let lo = pt_lo.max(mr * (spec.accel.min_mps2 + res));
            let hi = pt_hi.min(mr * (spec.accel.max_mps2 + res));
            if lo > hi {
                continue;
            }

            // Everything except the arrival time is shared across the t row.
            cands.clear();
            let n_cand = spec.torque_candidates;
            for c in 0..n_cand {
                let torque = if n_cand > 1 {
                    lo + (hi - lo) * c as f64 / (n_cand - 1) as f64
                } else {
                    lo
                };
                let a = acceleration(v, torque, grade, spec.veh);
                let f_v = v + a * spec.ds_m / v;
                if f_v <= 0.0 || f_v > limit_next + 1e-9 {
                    continue;
                }
                let Some((iv, wv)) = spec.v_grid.bracket(f_v) else { continue };
                let Some(energy) = spec.energy.stage(v, torque, spec.ds_m) else { continue };
                let stage = energy + spec.lambda_w * spec.ds_m / v;
                cands.push(Cand { torque, stage, dt: spec.ds_m / f_v, f_v, iv, wv });
            }
            if cands.is_empty() {
                continue;
            }

            for j in 0..nt {
                let t = t_grid.value(j);
                let mut best = f64::INFINITY;
                let mut best_torque = pt_lo;
                'cand: for cand in &cands {
                    let f_t = t + cand.dt;
                    for gate in &gates {
                        if gate.predicate.infeasible(f_t) {
                            continue 'cand;
                        }
                    }
                    let cont = if k + 1 == k_end {
                        // Evaluate the terminal directly at the continuous
                        // successor instead of re-interpolating its
                        // tabulation onto the last layer.
                        spec.terminal.eval(cand.f_v, f_t).min(INFEASIBLE_CORNER_PENALTY)
                    } else {
                        let Some((it, wt)) = t_next.bracket(f_t) else { continue };
                        let capped = |x: f64| x.min(INFEASIBLE_CORNER_PENALTY);
                        let base = cand.iv * nt_next + it;
                        let c00 = capped(next_values[base]);
                        let c10 = capped(next_values[base + nt_next]);
                        let (c01, c11) = if nt_next > 1 {
                            (capped(next_values[base + 1]), capped(next_values[base + nt_next + 1]))
                        } else {
                            (c00, c10)
                        };
                        let a = c00 + (c01 - c00) * wt;
                        let b = c10 + (c11 - c10) * wt;
                        a + (b - a) * cand.wv
                    };
                    let total = cand.stage + cont;
                    if total < best || (total == best && cand.torque.abs() < best_torque.abs()) {
                        best = total;
                        best_torque = cand.torque;
                    }
                }
                layer[i * nt + j] = best;
                if best.is_finite() {
                    layer_t[i * nt + j] = best_torque;
                }
            }
        }
        values.push(layer);
        torques[k] = layer_t;
    }

    values.reverse();
    SweepResult { values, torques }
}

/// Per-step travel-time grid anchored at the solve's start state.
///
/// Bounds are the fastest and slowest physically consistent arrivals, with
/// the upper bound capped at the desired travel time plus margin. The cap is
/// softened so a late vehicle still plans: at least five percent of the raw
/// span always remains.
fn anchored_t_grids(
    anchor_t: f64,
    n_steps: usize,
    ds: f64,
    v_floor: f64,
    v_max: f64,
    cap: f64,
    n_t: usize,
) -> Vec<UniformGrid> {
    (0..=n_steps)
        .map(|k| {
            if k == 0 {
                return UniformGrid::from_range(anchor_t, anchor_t, 1);
            }
            let dist = k as f64 * ds;
            let lo = anchor_t + dist / v_max;
            let raw_hi = anchor_t + dist / v_floor;
            let min_window = 0.05 * (raw_hi - lo);
            let hi = raw_hi.min(cap).max(lo + min_window);
            UniformGrid::from_range(lo, hi, n_t)
        })
        .collect()
}

/// Absolute travel-time grid at route position `pos`, for tail solves.
fn absolute_t_grid(pos: f64, v_floor: f64, v_max: f64, cap: f64, n_t: usize) -> UniformGrid {
    let lo = pos / v_max;
    let raw_hi = pos / v_floor;
    let min_window = 0.05 * (raw_hi - lo);
    let hi = raw_hi.min(cap).max(lo + min_window);
    UniformGrid::from_range(lo, hi, n_t)
}

// ---------------------------------------------------------------------------
// Terminal cost tables.
// ---------------------------------------------------------------------------

pub struct TerminalRequest<'a> {
    pub anchor_pos_m: f64,
    pub route: &'a RouteSpec,
    pub models: &'a [IntersectionTimingModel],
    pub cfg: &'a PlannerConfig,
    pub veh: &'a VehicleParams,
    pub pt: &'a PowertrainParams,
    pub cost_map: &'a CostMap,
    pub soc: f64,
    pub energy: CostModelKind,
}

pub fn terminal_key(req: &TerminalRequest<'_>) -> TerminalKey {
    let lattice = (req.anchor_pos_m / req.cfg.terminal.cache_lattice_m).round() as i64;
    let grid_sig = serde_json::to_vec(&(
        &req.cfg.terminal,
        req.cfg.horizon_m,
        req.cfg.v_floor_mps,
        req.cfg.lambda_w,
        req.cfg.beta,
        req.cfg.desired_travel_time_s,
        req.cfg.avg_speed_mps,
        req.cfg.time_margin_s,
        req.cfg.terminal_scenarios,
        req.route.length_m(),
        req.route.max_speed_limit(),
        req.energy,
    ))
    .expect("grid signature");
    let stats_sig = serde_json::to_vec(req.models).expect("stats signature");
    TerminalKey { lattice, grid_hash: hash64(&grid_sig), stats_hash: hash64(&stats_sig) }
}

/// Builds the terminal table for the horizon anchored near `anchor_pos_m`.
///
/// Each scenario realizes every downstream schedule, a tail solve runs from
/// the horizon end to the destination with the arrival-deadline slack as its
/// terminal stage, and cells average over the scenarios where they are
/// feasible. Deterministic in the cache key.
pub fn terminal_cost(req: &TerminalRequest<'_>) -> TerminalCostTable {
    let key = terminal_key(req);
    let cfg = req.cfg;
    let route = req.route;
    let v_max = route.max_speed_limit();
    let cap = cfg.time_cap();
    let lattice_pos = key.lattice as f64 * cfg.terminal.cache_lattice_m;
    let end_pos = (lattice_pos + cfg.horizon_m).min(route.length_m());

    let v_grid = UniformGrid::from_range(cfg.v_floor_mps, v_max, cfg.terminal.n_v);
    let t_grid = absolute_t_grid(end_pos.max(1.0), cfg.v_floor_mps, v_max, cap, cfg.terminal.n_t);
    let n_cells = v_grid.n() * t_grid.n();

    let tail_len = route.length_m() - end_pos;
    if tail_len < cfg.terminal.step_m * 0.5 {
        // Horizon reaches the destination: the table is the pure deadline
        // slack over arrival times.
        let mut values = vec![0.0; n_cells];
        for (j, t) in t_grid.values().enumerate() {
            let s = slack_cost(
                t,
                end_pos,
                route.length_m(),
                cfg.desired_travel_time_s,
                cfg.avg_speed_mps,
                cfg.beta,
            );
            for i in 0..v_grid.n() {
                values[i * t_grid.n() + j] = s;
            }
        }
        return TerminalCostTable { pos_m: end_pos, v_grid, t_grid, values, key };
    }

    let n_steps = (tail_len / cfg.terminal.step_m).round().max(1.0) as usize;
    let ds = tail_len / n_steps as f64;
    let no_traffic = TrafficModel { max_leads: 0, ..TrafficModel::default() };

    let mut sums = vec![0.0f64; n_cells];
    let mut counts = vec![0u32; n_cells];
    for scenario_idx in 0..cfg.terminal_scenarios {
        let seed = key
            .stats_hash
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(key.lattice as u64)
            .wrapping_add(scenario_idx as u64);
        let scenario = sample_scenario(req.models, &no_traffic, seed);
        let sweep = tail_sweep(req, &scenario.signals, end_pos, n_steps, ds, &v_grid, &t_grid);
        for (cell, &value) in sweep.values[0].iter().enumerate() {
            if value.is_finite() {
                sums[cell] += value;
                counts[cell] += 1;
            }
        }
    }

    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::INFINITY })
        .collect();
    TerminalCostTable { pos_m: end_pos, v_grid, t_grid, values, key }
}

fn tail_sweep(
    req: &TerminalRequest<'_>,
    realized: &[RealizedSignal],
    start_pos: f64,
    n_steps: usize,
    ds: f64,
    v_grid: &UniformGrid,
    t_grid_start: &UniformGrid,
) -> SweepResult {
    let cfg = req.cfg;
    let route = req.route;
    let v_max = route.max_speed_limit();
    let cap = cfg.time_cap();

    let mut t_grids = Vec::with_capacity(n_steps + 1);
    t_grids.push(t_grid_start.clone());
    for k in 1..=n_steps {
        t_grids.push(absolute_t_grid(
            start_pos + k as f64 * ds,
            cfg.v_floor_mps,
            v_max,
            cap,
            cfg.terminal.n_t,
        ));
    }

    // Realized schedules with the yellow tail folded into the no-pass window.
    let gates = route
        .intersections_m()
        .iter()
        .enumerate()
        .filter(|(_, &pos)| pos > start_pos + 1e-9 && pos <= route.length_m())
        .filter_map(|(idx, &pos)| {
            let k = ((pos - start_pos) / ds).ceil() as usize - 1;
            if k >= n_steps {
                return None;
            }
            let sig = realized[idx];
            Some(SignalGate {
                transition_k: k,
                predicate: GatePredicate::Downstream {
                    cycle_s: sig.cycle_s,
                    offset_s: sig.offset_s + sig.yellow_s,
                    red_est_s: sig.red_s + sig.yellow_s,
                },
            })
        })
        .collect();

    let speed_limits: Vec<f64> =
        (0..=n_steps).map(|k| route.speed_limit_at(start_pos + k as f64 * ds)).collect();
    let grades: Vec<f64> =
        (0..n_steps).map(|k| route.grade_at(start_pos + k as f64 * ds)).collect();

    let energy = match req.energy {
        CostModelKind::PowerMap => EnergyModel::PowerMap(req.cost_map.plane(req.soc)),
        CostModelKind::WheelEnergy => {
            EnergyModel::WheelEnergy { wheel_radius_m: req.veh.wheel_radius_m }
        }
    };

    let spec = SweepSpec {
        n_steps,
        ds_m: ds,
        v_grid: v_grid.clone(),
        t_grids,
        gates,
        speed_limits,
        grades,
        energy,
        lambda_w: cfg.lambda_w,
        accel: AccelLimits::default(),
        veh: req.veh,
        pt: req.pt,
        torque_candidates: cfg.terminal.torque_candidates,
        terminal: Terminal::Slack {
            end_pos_m: route.length_m(),
            route_len_m: route.length_m(),
            desired_s: cfg.desired_travel_time_s,
            avg_speed: cfg.avg_speed_mps,
            beta: cfg.beta,
        },
    };
    backward_sweep(&spec)
}

/// Shared cache of terminal tables, safe to use across worker threads.
#[derive(Default)]
pub struct TerminalTableCache {
    inner: Mutex<HashMap<TerminalKey, Arc<TerminalCostTable>>>,
}

impl TerminalTableCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&self, req: &TerminalRequest<'_>) -> Arc<TerminalCostTable> {
        let key = terminal_key(req);
        if let Some(hit) = self.inner.lock().unwrap().get(&key) {
            return Arc::clone(hit);
        }
        let table = Arc::new(terminal_cost(req));
        let mut guard = self.inner.lock().unwrap();
        Arc::clone(guard.entry(key).or_insert(table))
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Horizon solve and the policy map.
// ---------------------------------------------------------------------------

/// Everything one horizon solve needs.
pub struct SolveRequest<'a> {
    pub anchor: State,
    pub anchor_pos_m: f64,
    pub soc: f64,
    /// Live phase of the first upcoming intersection, if connected.
    pub live: Option<LiveSpat>,
    /// Percentile red estimates per intersection index.
    pub red_estimates: &'a [f64],
    /// When present (full-information mode), every light in the horizon uses
    /// its true realized schedule instead of live + statistics.
    pub true_signals: Option<&'a [RealizedSignal]>,
    pub nominal_specs: &'a [crate::signals::SignalTimingSpec],
    pub terminal: &'a TerminalCostTable,
    pub cfg: &'a PlannerConfig,
    pub accel: AccelLimits,
    pub route: &'a RouteSpec,
    pub veh: &'a VehicleParams,
    pub pt: &'a PowertrainParams,
    pub cost_map: &'a CostMap,
    pub energy: CostModelKind,
}

/// Per-step optimal wheel torque over the (speed, arrival-time) grid, plus
/// the value tensor and solve metadata.
#[derive(Debug, Clone)]
pub struct PolicyMap {
    pub anchor: State,
    pub anchor_pos_m: f64,
    pub anchor_soc: f64,
    pub spat_snapshot: Option<LiveSpat>,
    pub step_m: f64,
    pub n_steps: usize,
    pub v_grid: UniformGrid,
    pub t_grids: Vec<UniformGrid>,
    pub values: Vec<Vec<f64>>,
    pub torques: Vec<Vec<f64>>,
}

pub fn solve_dp(req: &SolveRequest<'_>) -> Result<PolicyMap, PlannerError> {
    let cfg = req.cfg;
    let route = req.route;
    let ds = cfg.step_m;
    let span = (route.length_m() - req.anchor_pos_m).min(cfg.horizon_m);
    let n_steps = ((span / ds).floor() as usize).max(1);
    let v_max = route.max_speed_limit();
    let v_grid = UniformGrid::from_range(cfg.v_floor_mps, v_max, cfg.n_v);

    let anchor_t = req.anchor.t;
    let t_grids = anchored_t_grids(
        anchor_t,
        n_steps,
        ds,
        cfg.v_floor_mps,
        v_max,
        cfg.time_cap().max(anchor_t),
        cfg.n_t,
    );

    let end_pos = req.anchor_pos_m + n_steps as f64 * ds;
    let first_upcoming = route.next_intersection(req.anchor_pos_m).map(|(idx, _)| idx);
    let gates: Vec<SignalGate> = route
        .intersections_m()
        .iter()
        .enumerate()
        .filter(|(_, &pos)| pos > req.anchor_pos_m + 1e-9 && pos <= end_pos + 1e-9)
        .filter_map(|(idx, &pos)| {
            let k = ((pos - req.anchor_pos_m) / ds).ceil() as usize - 1;
            if k >= n_steps {
                return None;
            }
            let predicate = if let Some(truth) = req.true_signals {
                let sig = truth[idx];
                GatePredicate::Downstream {
                    cycle_s: sig.cycle_s,
                    offset_s: sig.offset_s + sig.yellow_s,
                    red_est_s: sig.red_s + sig.yellow_s,
                }
            } else if first_upcoming == Some(idx) && req.live.is_some() {
                let live = req.live.unwrap();
                GatePredicate::First {
                    phase: live.phase,
                    remaining_s: live.remaining_s,
                    cycle_s: req.nominal_specs[idx].cycle_s,
                    red_est_s: req.red_estimates[idx],
                }
            } else {
                GatePredicate::Downstream {
                    cycle_s: req.nominal_specs[idx].cycle_s,
                    offset_s: req.nominal_specs[idx].offset_s,
                    red_est_s: req.red_estimates[idx],
                }
            };
            Some(SignalGate { transition_k: k, predicate })
        })
        .collect();

    let speed_limits: Vec<f64> =
        (0..=n_steps).map(|k| route.speed_limit_at(req.anchor_pos_m + k as f64 * ds)).collect();
    let grades: Vec<f64> =
        (0..n_steps).map(|k| route.grade_at(req.anchor_pos_m + k as f64 * ds)).collect();

    let energy = match req.energy {
        CostModelKind::PowerMap => EnergyModel::PowerMap(req.cost_map.plane(req.soc)),
        CostModelKind::WheelEnergy => {
            EnergyModel::WheelEnergy { wheel_radius_m: req.veh.wheel_radius_m }
        }
    };

    let spec = SweepSpec {
        n_steps,
        ds_m: ds,
        v_grid: v_grid.clone(),
        t_grids: t_grids.clone(),
        gates,
        speed_limits,
        grades,
        energy,
        lambda_w: cfg.lambda_w,
        accel: req.accel,
        veh: req.veh,
        pt: req.pt,
        torque_candidates: cfg.torque_candidates,
        terminal: Terminal::Table(req.terminal),
    };
    let sweep = backward_sweep(&spec);

    let policy = PolicyMap {
        anchor: req.anchor,
        anchor_pos_m: req.anchor_pos_m,
        anchor_soc: req.soc,
        spat_snapshot: req.live,
        step_m: ds,
        n_steps,
        v_grid,
        t_grids,
        values: sweep.values,
        torques: sweep.torques,
    };

    let anchor_iv = policy.v_grid.nearest(req.anchor.v.max(cfg.v_floor_mps));
    if !policy.values[0][anchor_iv].is_finite() {
        return Err(PlannerError::NoFeasiblePath);
    }
    Ok(policy)
}

impl PolicyMap {
    pub fn horizon_end_m(&self) -> f64 {
        self.anchor_pos_m + self.n_steps as f64 * self.step_m
    }

    fn nearest_feasible_cell(&self, k: usize, v: f64, t: f64) -> (usize, usize) {
        let t_grid = &self.t_grids[k];
        let nt = t_grid.n();
        let iv0 = self.v_grid.nearest(v);
        let it0 = t_grid.nearest(t);
        if self.values[k][iv0 * nt + it0].is_finite() {
            return (iv0, it0);
        }
        // Scan the step for the nearest feasible cell in index space,
        // breaking ties toward lower speed.
        let mut best: Option<(usize, usize, usize)> = None;
        for iv in 0..self.v_grid.n() {
            for it in 0..nt {
                if !self.values[k][iv * nt + it].is_finite() {
                    continue;
                }
                let d = iv.abs_diff(iv0) + it.abs_diff(it0);
                let better = match best {
                    None => true,
                    Some((bd, biv, _)) => d < bd || (d == bd && iv < biv),
                };
                if better {
                    best = Some((d, iv, it));
                }
            }
        }
        match best {
            Some((_, iv, it)) => (iv, it),
            None => (iv0, it0),
        }
    }

    /// Optimal torque at the cell nearest to the query, plus the one-step
    /// velocity reference that torque produces from the queried speed.
    pub fn query(
        &self,
        d_now_m: f64,
        v: f64,
        t: f64,
        route: &RouteSpec,
        veh: &VehicleParams,
    ) -> Result<(f64, f64), PlannerError> {
        let end = self.horizon_end_m();
        if d_now_m > end + self.step_m * 0.5 {
            return Err(PlannerError::StalePolicyBeyondHorizon {
                pos_m: d_now_m,
                horizon_end_m: end,
            });
        }
        let k_raw = ((d_now_m - self.anchor_pos_m) / self.step_m).round();
        let k = (k_raw.max(0.0) as usize).min(self.n_steps.saturating_sub(1));
        let (iv, it) = self.nearest_feasible_cell(k, v, t);
        let torque = self.torques[k][iv * self.t_grids[k].n() + it];
        let v_eff = v.max(crate::vehicle::V_FLOOR);
        let a = acceleration(v_eff, torque, route.grade_at(d_now_m), veh);
        let v_ref = (v_eff + a * self.step_m / v_eff).max(0.0);
        Ok((torque, v_ref))
    }
}

/// One row of a greedy policy rollout.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RolloutStep {
    pub k: usize,
    pub pos_m: f64,
    pub v_mps: f64,
    pub t_s: f64,
    pub torque_nm: f64,
    pub stage_cost_w: f64,
}

/// Follows the stored policy through the continuous dynamics from the anchor.
pub fn rollout(
    policy: &PolicyMap,
    route: &RouteSpec,
    veh: &VehicleParams,
    cost_map: &CostMap,
    soc: f64,
    lambda_w: f64,
) -> Vec<RolloutStep> {
    let mut out = Vec::with_capacity(policy.n_steps);
    let mut state = State { v: policy.anchor.v.max(crate::vehicle::V_FLOOR), t: policy.anchor.t };
    for k in 0..policy.n_steps {
        let pos = policy.anchor_pos_m + k as f64 * policy.step_m;
        let Ok((torque, _)) = policy.query(pos, state.v, state.t, route, veh) else { break };
        let stage = cost_map
            .lookup(state.v, torque, soc)
            .map(|g| g + lambda_w * policy.step_m / state.v)
            .unwrap_or(f64::NAN);
        out.push(RolloutStep {
            k,
            pos_m: pos,
            v_mps: state.v,
            t_s: state.t,
            torque_nm: torque,
            stage_cost_w: stage,
        });
        match crate::vehicle::step_ds(&state, torque, route.grade_at(pos), policy.step_m, veh) {
            Ok(next) => state = next,
            Err(_) => break,
        }
    }
    out
}
