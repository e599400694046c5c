//! Deterministic two-rate closed-loop executor.
//!
//! The control loop ticks at a fixed period: it queries the currently active
//! policy for a velocity reference (possibly a stale one while a new solve
//! "computes" behind a modeled latency), runs the cruise layer, realizes the
//! commanded torque through the powertrain split, integrates the plant in
//! the time domain, and advances scripted lead vehicles that obey the
//! realized signal schedules. Everything is a pure function of the config,
//! the scenario, and the seed.

use crate::acc::{safety_monitor, AccConfig, AccController, LeadView, LightView, MonitorInput, ViolationKind};
use crate::planner::{
    solve_dp, CostModelKind, PlannerConfig, PolicyMap, SolveRequest, TerminalRequest,
    TerminalTableCache,
};
use crate::powertrain::{battery_step, ecms_split, CostMap, PowertrainParams, SplitOutcome, TorqueSplit};
use crate::signals::{
    estimate_red, live_at, phase_at, HistoricalSpat, IntersectionTimingModel, Phase, Scenario,
    SignalTimingSpec,
};
use crate::vehicle::{acceleration, AccelLimits, RouteSpec, State, VehicleParams};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("episode exceeded the {0:.0} s simulated-time limit")]
    Timeout(f64),
    #[error("scenario provides {got} signal schedules, route has {want} intersections")]
    ScenarioMismatch { got: usize, want: usize },
    #[error(transparent)]
    Signals(#[from] crate::signals::SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    /// Receding-horizon planner with live next-light phase and statistical
    /// downstream estimates.
    EcoAccReceding,
    /// One full-route solve at departure with true schedules everywhere.
    EcoAccGlobal,
    /// Constant speed-limit reference through the same cruise layer.
    AccOnly,
}

impl std::fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ControllerMode::EcoAccReceding => "eco-acc-receding",
            ControllerMode::EcoAccGlobal => "eco-acc-global",
            ControllerMode::AccOnly => "acc-only",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for ControllerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eco-acc-receding" => Ok(Self::EcoAccReceding),
            "eco-acc-global" => Ok(Self::EcoAccGlobal),
            "acc-only" => Ok(Self::AccOnly),
            other => Err(format!(
                "unknown mode '{other}', expected eco-acc-receding | eco-acc-global | acc-only"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub control_period_s: f64,
    pub replan_period_s: f64,
    /// Modeled planner compute latency; a fresh policy activates this long
    /// after its snapshot.
    pub planner_latency_s: f64,
    pub mode: ControllerMode,
    pub initial_soc: f64,
    pub initial_speed_mps: f64,
    pub max_time_s: f64,
    pub car_length_m: f64,
    /// Conflict-zone length past each stop line for the red-occupancy check.
    pub intersection_box_m: f64,
    /// Physical acceleration bound the monitor enforces.
    pub accel_bound_mps2: f64,
    /// Slew-rate limit on the velocity reference handed to the cruise
    /// layer, m/s^2. Smooths plan-to-plan churn across replans.
    pub ref_slew_mps2: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_period_s: 0.2,
            replan_period_s: 4.0,
            planner_latency_s: 2.0,
            mode: ControllerMode::EcoAccReceding,
            initial_soc: 0.90,
            initial_speed_mps: 10.0,
            max_time_s: 900.0,
            car_length_m: 4.5,
            intersection_box_m: 2.0,
            accel_bound_mps2: 9.0,
            ref_slew_mps2: 2.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.control_period_s > 0.0) || self.control_period_s > self.replan_period_s {
            return Err("control period must be positive and at most the replan period".into());
        }
        if self.planner_latency_s > self.replan_period_s {
            return Err("planner latency must not exceed the replan period".into());
        }
        if !(0.0..=1.0).contains(&self.initial_soc) {
            return Err("initial SOC must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// Car-following parameters for scripted leads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    pub accel_max_mps2: f64,
    pub brake_comfort_mps2: f64,
    pub min_gap_m: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self { accel_max_mps2: 1.4, brake_comfort_mps2: 2.0, min_gap_m: 2.5, exponent: 4.0 }
    }
}

/// One scripted lead vehicle. Position is the front bumper.
#[derive(Debug, Clone, Copy)]
pub struct Lead {
    pub pos_m: f64,
    pub speed_mps: f64,
    pub desired_speed_mps: f64,
    pub headway_s: f64,
}

/// Free-road/interaction acceleration of the car-following model.
pub fn idm_accel(
    v: f64,
    desired_speed: f64,
    headway_s: f64,
    interaction: Option<(f64, f64)>,
    p: &IdmParams,
) -> f64 {
    let free = p.accel_max_mps2 * (1.0 - (v / desired_speed).powf(p.exponent));
    match interaction {
        None => free,
        Some((gap, dv)) => {
            let gap = gap.max(0.01);
            let desired_gap = p.min_gap_m
                + v * headway_s
                + v * dv / (2.0 * (p.accel_max_mps2 * p.brake_comfort_mps2).sqrt());
            free - p.accel_max_mps2 * (desired_gap.max(0.0) / gap).powi(2)
        }
    }
}

/// Advances one lead by `dt`, following its predecessor and obeying signals.
pub fn lead_vehicle_update(
    lead: &Lead,
    predecessor: Option<(f64, f64)>,
    next_light: Option<(f64, Phase)>,
    dt: f64,
    p: &IdmParams,
) -> Lead {
    let mut a = idm_accel(
        lead.speed_mps,
        lead.desired_speed_mps,
        lead.headway_s,
        predecessor.map(|(rear, v)| (rear - lead.pos_m, lead.speed_mps - v)),
        p,
    );
    if let Some((stop_pos, phase)) = next_light {
        let gap = stop_pos - 1.0 - lead.pos_m;
        let must_stop = match phase {
            Phase::Red => true,
            Phase::Yellow => {
                lead.speed_mps * lead.speed_mps / (2.0 * gap.max(0.05))
                    <= p.brake_comfort_mps2 * 1.75
            }
            Phase::Green => false,
        };
        if must_stop {
            let a_light = idm_accel(
                lead.speed_mps,
                lead.desired_speed_mps,
                lead.headway_s,
                Some((gap, lead.speed_mps)),
                p,
            );
            a = a.min(a_light);
        }
    }
    let v_next = (lead.speed_mps + a * dt).max(0.0);
    Lead { pos_m: lead.pos_m + (lead.speed_mps + v_next) / 2.0 * dt, speed_mps: v_next, ..*lead }
}

/// Constant-acceleration plant update over `dt`, clipped at standstill.
pub fn plant_step(pos_m: f64, v: f64, a: f64, dt: f64) -> (f64, f64) {
    let v_next = v + a * dt;
    if v_next < 0.0 {
        // Stops partway through the tick.
        let stop_dist = if a < 0.0 { v * v / (-2.0 * a) } else { 0.0 };
        (pos_m + stop_dist, 0.0)
    } else {
        (pos_m + v * dt + 0.5 * a * dt * dt, v_next)
    }
}

/// One control-tick record.
#[derive(Debug, Clone)]
pub struct TickRow {
    pub time_s: f64,
    pub pos_m: f64,
    pub speed_mps: f64,
    pub accel_mps2: f64,
    pub torque_cmd_nm: f64,
    pub split: TorqueSplit,
    pub soc: f64,
    pub fuel_power_w: f64,
    pub elec_power_w: f64,
    pub current_a: f64,
    pub v_ref_mps: f64,
    /// Index of the policy that produced the reference; -1 before the first
    /// activation and in acc-only mode.
    pub policy_seq: i64,
    pub next_light_dist_m: f64,
    pub next_light_phase: Option<Phase>,
    pub lead_gap_m: Option<f64>,
    pub lead_speed_mps: Option<f64>,
    /// Current phase of every intersection, one letter each.
    pub signal_phases: String,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpisodeTotals {
    pub distance_m: f64,
    pub travel_time_s: f64,
    pub fuel_energy_j: f64,
    /// Integrated electrochemical power; negative only with net recuperation.
    pub battery_energy_j: f64,
    /// Integrated battery current, A*s.
    pub charge_drawn_as: f64,
    pub initial_soc: f64,
    pub final_soc: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ViolationEvent {
    pub time_s: f64,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    pub rows: Vec<TickRow>,
    pub totals: EpisodeTotals,
    pub violations: Vec<ViolationEvent>,
    /// (activation time, policy sequence number).
    pub activations: Vec<(f64, i64)>,
}

pub const TRACE_HEADER: &str = "time_s,pos_m,speed_mps,accel_mps2,torque_cmd_nm,motor_torque_nm,engine_torque_nm,engine_on,brake_torque_nm,soc,fuel_power_w,elec_power_w,battery_current_a,v_ref_mps,policy_seq,next_light_dist_m,next_light_phase,lead_gap_m,lead_speed_mps,signal_phases";

impl SimTrace {
    /// Stable tick-level CSV; the column order is part of the contract.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.rows {
            let phase = r.next_light_phase.map(|p| p.to_string()).unwrap_or_default();
            let gap = r.lead_gap_m.map(|g| format!("{g:.6}")).unwrap_or_default();
            let lv = r.lead_speed_mps.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(
                out,
                "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.9},{:.6},{:.6},{:.6},{:.6},{},{:.6},{},{},{},{}",
                r.time_s,
                r.pos_m,
                r.speed_mps,
                r.accel_mps2,
                r.torque_cmd_nm,
                r.split.motor_torque_nm,
                r.split.engine_torque_nm,
                r.split.engine_on as u8,
                r.split.brake_torque_nm,
                r.soc,
                r.fuel_power_w,
                r.elec_power_w,
                r.current_a,
                r.v_ref_mps,
                r.policy_seq,
                r.next_light_dist_m,
                phase,
                gap,
                lv,
                r.signal_phases,
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to vec");
        String::from_utf8(buf).expect("csv is utf8")
    }
}

/// Everything an episode needs, borrowed from the caller.
pub struct EpisodeContext<'a> {
    pub route: &'a RouteSpec,
    pub veh: &'a VehicleParams,
    pub pt: &'a PowertrainParams,
    pub accel: AccelLimits,
    pub acc_cfg: &'a AccConfig,
    pub planner_cfg: &'a PlannerConfig,
    pub sim_cfg: &'a SimConfig,
    pub idm: &'a IdmParams,
    pub models: &'a [IntersectionTimingModel],
    pub hist: &'a HistoricalSpat,
    pub scenario: &'a Scenario,
    pub cost_map: &'a CostMap,
    pub energy: CostModelKind,
    pub tables: &'a TerminalTableCache,
}

enum ActivePolicy {
    Map(Arc<PolicyMap>),
    /// Fallback when the horizon solve found no feasible path.
    Brake,
}

fn safe_split(v: f64, torque: f64, soc: f64, pt: &PowertrainParams) -> SplitOutcome {
    match ecms_split(v, torque, soc, pt) {
        Ok(o) => o,
        Err(_) => {
            // Clamp just inside the envelope; bounds rounding can leave the
            // command a hair outside.
            let (lo, hi) = pt.wheel_torque_bounds(v);
            let t = torque.clamp(lo + 1e-6, hi - 1e-6);
            ecms_split(v, t, soc, pt).expect("clamped torque splits")
        }
    }
}

/// Runs one closed-loop episode. Deterministic given the context.
pub fn run_episode(ctx: &EpisodeContext<'_>) -> Result<SimTrace, SimError> {
    let route = ctx.route;
    let n_lights = route.intersections_m().len();
    if ctx.scenario.signals.len() != n_lights {
        return Err(SimError::ScenarioMismatch { got: ctx.scenario.signals.len(), want: n_lights });
    }
    let dt = ctx.sim_cfg.control_period_s;
    let eta = ctx.hist.eta_percent;
    let red_estimates: Vec<f64> =
        (0..n_lights).map(|i| estimate_red(ctx.hist, i, eta)).collect::<Result<_, _>>()?;
    let nominal_specs: Vec<SignalTimingSpec> =
        ctx.models.iter().map(|m| m.nominal_spec()).collect();

    // Leads start with their scenario head start already driven: entry time
    // seconds of travel at entry speed, ahead of the ego.
    let mut leads: Vec<Lead> = ctx
        .scenario
        .leads
        .iter()
        .map(|s| Lead {
            pos_m: 20.0 + s.entry_time_s * s.entry_speed_mps,
            speed_mps: s.entry_speed_mps,
            desired_speed_mps: s.desired_speed_mps.min(route.max_speed_limit()),
            headway_s: s.headway_s,
        })
        .collect();
    leads.sort_by(|a, b| a.pos_m.partial_cmp(&b.pos_m).unwrap());

    let mut acc = AccController::new();
    let mut pos = 0.0f64;
    let mut v = ctx.sim_cfg.initial_speed_mps;
    let mut soc = ctx.sim_cfg.initial_soc;
    let mut policy: Option<ActivePolicy> = None;
    let mut pending: Option<(f64, ActivePolicy)> = None;
    let mut seq: i64 = -1;
    let mut next_replan = 0.0f64;
    let mut activations = Vec::new();
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    let mut fuel_energy = 0.0f64;
    let mut battery_energy = 0.0f64;
    let mut charge_drawn = 0.0f64;
    let mut prev_ref: Option<f64> = None;

    let mut tick: u64 = 0;
    let final_time = loop {
        let t = tick as f64 * dt;
        if t > ctx.sim_cfg.max_time_s {
            return Err(SimError::Timeout(ctx.sim_cfg.max_time_s));
        }

        // Activate a finished solve once its modeled latency has elapsed.
        if let Some((at, _)) = pending {
            if t + 1e-9 >= at {
                let (_, p) = pending.take().unwrap();
                policy = Some(p);
                seq += 1;
                activations.push((t, seq));
            }
        }

        // Kick off a new solve at each replan epoch.
        if ctx.sim_cfg.mode != ControllerMode::AccOnly
            && t + 1e-9 >= next_replan
            && pos < route.length_m()
        {
            let global = ctx.sim_cfg.mode == ControllerMode::EcoAccGlobal;
            let cfg_global;
            let planner_cfg = if global {
                let mut c = ctx.planner_cfg.clone();
                c.horizon_m = route.length_m();
                cfg_global = c;
                &cfg_global
            } else {
                ctx.planner_cfg
            };
            let terminal = ctx.tables.get_or_build(&TerminalRequest {
                anchor_pos_m: pos,
                route,
                models: ctx.models,
                cfg: planner_cfg,
                veh: ctx.veh,
                pt: ctx.pt,
                cost_map: ctx.cost_map,
                soc,
                energy: ctx.energy,
            });
            let live = route
                .next_intersection(pos)
                .map(|(idx, _)| live_at(&ctx.scenario.signals[idx], t, idx));
            let anchor = State { v: v.max(planner_cfg.v_floor_mps), t };
            let req = SolveRequest {
                anchor,
                anchor_pos_m: pos,
                soc,
                live,
                red_estimates: &red_estimates,
                true_signals: global.then_some(ctx.scenario.signals.as_slice()),
                nominal_specs: &nominal_specs,
                terminal: &terminal,
                cfg: planner_cfg,
                accel: ctx.accel,
                route,
                veh: ctx.veh,
                pt: ctx.pt,
                cost_map: ctx.cost_map,
                energy: ctx.energy,
            };
            let fresh = match solve_dp(&req) {
                Ok(p) => ActivePolicy::Map(Arc::new(p)),
                Err(_) => ActivePolicy::Brake,
            };
            let latency = if global { 0.0 } else { ctx.sim_cfg.planner_latency_s };
            if latency <= 0.0 {
                policy = Some(fresh);
                seq += 1;
                activations.push((t, seq));
            } else {
                pending = Some((t + latency, fresh));
            }
            next_replan =
                if global { f64::INFINITY } else { next_replan + ctx.sim_cfg.replan_period_s };
        }

        // Reference for this tick, slew-limited against the previous one.
        let limit_ref = route.speed_limit_at(pos);
        let raw_ref = match (&policy, ctx.sim_cfg.mode) {
            (_, ControllerMode::AccOnly) => limit_ref,
            (None, _) => limit_ref,
            (Some(ActivePolicy::Brake), _) => 0.0,
            (Some(ActivePolicy::Map(p)), _) => match p.query(pos, v, t, route, ctx.veh) {
                Ok((_, v_ref)) => v_ref.min(limit_ref),
                Err(_) => limit_ref,
            },
        };
        let slew = ctx.sim_cfg.ref_slew_mps2 * dt;
        let v_ref = match prev_ref {
            Some(prev) => raw_ref.clamp(prev - slew, prev + slew),
            None => raw_ref,
        };
        prev_ref = Some(v_ref);

        // Views of the world.
        let lead_view = leads
            .iter()
            .filter(|l| l.pos_m - ctx.sim_cfg.car_length_m > pos)
            .min_by(|a, b| a.pos_m.partial_cmp(&b.pos_m).unwrap())
            .map(|l| LeadView {
                gap_m: l.pos_m - ctx.sim_cfg.car_length_m - pos,
                speed_mps: l.speed_mps,
            });
        // While clearing a conflict zone the just-crossed light governs;
        // otherwise the next one ahead does.
        let clear_span = ctx.sim_cfg.intersection_box_m + ctx.sim_cfg.car_length_m + 1.0;
        let behind = route
            .intersections_m()
            .iter()
            .enumerate()
            .filter(|(_, &d)| d <= pos && pos - d <= clear_span)
            .next_back();
        let light_view = if let Some((idx, &d)) = behind {
            let live = live_at(&ctx.scenario.signals[idx], t, idx);
            Some(LightView {
                distance_m: d - pos,
                phase: live.phase,
                remaining_s: live.remaining_s,
                yellow_s: ctx.scenario.signals[idx].yellow_s,
            })
        } else {
            route.next_intersection(pos).map(|(idx, d)| {
                let live = live_at(&ctx.scenario.signals[idx], t, idx);
                LightView {
                    distance_m: d - pos,
                    phase: live.phase,
                    remaining_s: live.remaining_s,
                    yellow_s: ctx.scenario.signals[idx].yellow_s,
                }
            })
        };

        let grade = route.grade_at(pos);
        let torque_cmd =
            acc.command(v_ref, v, lead_view, light_view, grade, dt, ctx.acc_cfg, ctx.veh, ctx.pt);

        let outcome = safe_split(v, torque_cmd, soc, ctx.pt);
        let battery = battery_step(outcome.battery_power_w, soc, ctx.pt, dt)
            .expect("split power stays inside the battery envelope");
        let a = acceleration(v, torque_cmd, grade, ctx.veh);

        // Monitor against ground truth before integrating.
        let signal_phases: Vec<(f64, Phase)> = route
            .intersections_m()
            .iter()
            .zip(&ctx.scenario.signals)
            .map(|(&p, sig)| (p, phase_at(sig, t)))
            .collect();
        for kind in safety_monitor(&MonitorInput {
            ego_pos_m: pos,
            ego_speed_mps: v,
            ego_accel_mps2: a,
            car_length_m: ctx.sim_cfg.car_length_m,
            lead: lead_view,
            signals: &signal_phases,
            box_len_m: ctx.sim_cfg.intersection_box_m,
            min_gap_m: ctx.acc_cfg.min_gap_m,
            accel_bound_mps2: ctx.sim_cfg.accel_bound_mps2,
        }) {
            violations.push(ViolationEvent { time_s: t, kind });
        }

        rows.push(TickRow {
            time_s: t,
            pos_m: pos,
            speed_mps: v,
            accel_mps2: a,
            torque_cmd_nm: torque_cmd,
            split: outcome.split,
            soc,
            fuel_power_w: outcome.fuel_power_w,
            elec_power_w: outcome.elec_power_w,
            current_a: outcome.current_a,
            v_ref_mps: v_ref,
            policy_seq: seq,
            next_light_dist_m: light_view.map(|l| l.distance_m).unwrap_or(f64::INFINITY),
            next_light_phase: light_view.map(|l| l.phase),
            lead_gap_m: lead_view.map(|l| l.gap_m),
            lead_speed_mps: lead_view.map(|l| l.speed_mps),
            signal_phases: signal_phases.iter().map(|(_, p)| p.to_string()).collect(),
        });

        // Integrate the ego and the books.
        let (pos_next, v_next) = plant_step(pos, v, a, dt);
        fuel_energy += outcome.fuel_power_w * dt;
        battery_energy += outcome.elec_power_w * dt;
        charge_drawn += battery.current_a * dt;
        pos = pos_next;
        v = v_next;
        soc = battery.soc_next;

        // Advance the leads; each follows the one ahead and its next light.
        let snapshot = leads.clone();
        for (i, lead) in leads.iter_mut().enumerate() {
            let predecessor =
                snapshot.get(i + 1).map(|p| (p.pos_m - ctx.sim_cfg.car_length_m, p.speed_mps));
            let light = route
                .next_intersection(lead.pos_m)
                .map(|(idx, d)| (d, phase_at(&ctx.scenario.signals[idx], t)));
            *lead = lead_vehicle_update(lead, predecessor, light, dt, ctx.idm);
        }
        leads.retain(|l| l.pos_m < route.length_m() + 60.0);

        tick += 1;
        if pos >= route.length_m() {
            break tick as f64 * dt;
        }
    };

    Ok(SimTrace {
        totals: EpisodeTotals {
            distance_m: pos,
            travel_time_s: final_time,
            fuel_energy_j: fuel_energy,
            battery_energy_j: battery_energy,
            charge_drawn_as: charge_drawn,
            initial_soc: ctx.sim_cfg.initial_soc,
            final_soc: soc,
        },
        rows,
        violations,
        activations,
    })
}
