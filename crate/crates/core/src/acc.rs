//! High-rate cruise layer: track the planner's velocity reference while
//! enforcing collision avoidance and signal compliance against live traffic.
//!
//! The command is the minimum of three torques: PI tracking toward the
//! reference, gap keeping against the lead vehicle, and stopping at the next
//! stop line when the light requires it. The stop decision uses the ground
//! truth phase of the next light, so signal compliance does not depend on the
//! planner's estimates.

use crate::powertrain::PowertrainParams;
use crate::signals::Phase;
use crate::vehicle::VehicleParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccConfig {
    /// Proportional gain on velocity error, 1/s.
    pub kp: f64,
    /// Integral gain on velocity error, 1/s^2.
    pub ki: f64,
    /// Hard minimum bumper-to-bumper gap, m.
    pub min_gap_m: f64,
    /// Desired time headway, s.
    pub headway_s: f64,
    /// Comfort braking limit used for stop decisions, m/s^2.
    pub comfort_brake_mps2: f64,
    /// Stop this far short of the stop line, m.
    pub stop_line_tol_m: f64,
    /// Clearance beyond the stop line that must be free before entering on a
    /// green, m (covers the conflict zone plus one car length).
    pub box_clear_m: f64,
    /// Deceleration at which the stop branch starts acting, m/s^2.
    pub activation_brake_mps2: f64,
    /// Anti-windup clamp on the integral term, m/s * s.
    pub integral_limit: f64,
    /// Acceleration bounds on the tracking branch alone; safety branches are
    /// unrestricted.
    pub track_accel_max_mps2: f64,
    pub track_brake_max_mps2: f64,
}

impl Default for AccConfig {
    fn default() -> Self {
        Self {
            kp: 0.8,
            ki: 0.15,
            min_gap_m: 3.0,
            headway_s: 1.5,
            comfort_brake_mps2: 3.0,
            stop_line_tol_m: 1.0,
            box_clear_m: 8.0,
            activation_brake_mps2: 1.2,
            integral_limit: 2.0,
            track_accel_max_mps2: 2.0,
            track_brake_max_mps2: 3.5,
        }
    }
}

/// Lead vehicle as seen by the controller: bumper-to-bumper gap and speed.
#[derive(Debug, Clone, Copy)]
pub struct LeadView {
    pub gap_m: f64,
    pub speed_mps: f64,
}

/// Next signal as seen by the controller (ground truth). While the ego is
/// clearing a conflict zone the simulator reports the just-crossed light
/// with a nonpositive distance.
#[derive(Debug, Clone, Copy)]
pub struct LightView {
    /// Distance from the ego front to the stop line, m.
    pub distance_m: f64,
    pub phase: Phase,
    /// Remaining time of the current phase, s.
    pub remaining_s: f64,
    /// Yellow duration of this signal, s.
    pub yellow_s: f64,
}

const HARD_BRAKE_ACCEL: f64 = -50.0;

/// Velocity-tracking controller with safety overrides. Owns only the
/// integral state of the PI loop.
#[derive(Debug, Clone, Default)]
pub struct AccController {
    integral: f64,
}

impl AccController {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
    }

    /// Wheel-torque command for one control tick.
    ///
    /// Branch priority: velocity tracking, then signal handling (stop at the
    /// line while stopping is feasible, otherwise commit and clear the
    /// conflict zone before red), and gap keeping last so collision
    /// avoidance always wins.
    pub fn command(
        &mut self,
        v_ref: f64,
        v: f64,
        lead: Option<LeadView>,
        light: Option<LightView>,
        grade_rad: f64,
        dt: f64,
        cfg: &AccConfig,
        veh: &VehicleParams,
        pt: &PowertrainParams,
    ) -> f64 {
        let err = v_ref - v;
        self.integral = (self.integral + err * dt).clamp(-cfg.integral_limit, cfg.integral_limit);
        let a_track = (cfg.kp * err + cfg.ki * self.integral)
            .clamp(-cfg.track_brake_max_mps2, cfg.track_accel_max_mps2);
        let mut a_cmd = a_track;

        if let Some(light) = light {
            a_cmd = self.apply_light(a_cmd, &light, lead.as_ref(), v, cfg);
        }

        if let Some(l) = lead {
            a_cmd = a_cmd.min(self.gap_accel(&l, v, cfg));
        }

        let torque = veh.torque_for_accel(a_cmd, v, grade_rad);
        let (t_lo, t_hi) = pt.wheel_torque_bounds(v);
        torque.clamp(t_lo, t_hi)
    }

    fn apply_light(
        &self,
        a_cmd: f64,
        light: &LightView,
        lead: Option<&LeadView>,
        v: f64,
        cfg: &AccConfig,
    ) -> f64 {
        // Already at or past the line: if the phase is not green, push
        // through the remaining conflict zone instead of lingering.
        if light.distance_m <= 0.05 {
            if light.phase != Phase::Green {
                let clear_dist = (light.distance_m + cfg.box_clear_m).max(0.0);
                return a_cmd.max(Self::clear_floor(v, clear_dist, 1.0));
            }
            return a_cmd;
        }

        let d_go = light.distance_m - cfg.stop_line_tol_m;
        // Stopping from a crawl is always possible within the line
        // tolerance, whatever the pointwise deceleration formula says.
        let stop_feasible =
            v * v / (2.0 * d_go.max(0.05)) <= cfg.comfort_brake_mps2 || v <= 2.5;
        let clear_dist = d_go + cfg.box_clear_m;
        let v_eff = v.max(0.5);
        // A slow queue whose tail would strand the ego inside the conflict
        // zone means: wait at the line.
        let queue_block = lead.map_or(false, |l| {
            let queue_front = l.gap_m - cfg.min_gap_m;
            queue_front >= d_go && queue_front <= light.distance_m + cfg.box_clear_m
        });

        let stop = |a_cmd: f64| a_cmd.min(Self::stop_accel(light.distance_m, v, cfg));
        match light.phase {
            Phase::Red => {
                if stop_feasible {
                    stop(a_cmd)
                } else {
                    a_cmd.max(Self::clear_floor(v, clear_dist, 1.5))
                }
            }
            Phase::Yellow => {
                if stop_feasible {
                    stop(a_cmd)
                } else {
                    a_cmd.max(Self::clear_floor(v, clear_dist, light.remaining_s))
                }
            }
            Phase::Green => {
                let arrives_this_phase = d_go / v_eff <= light.remaining_s;
                let cannot_clear =
                    arrives_this_phase && clear_dist / v_eff > light.remaining_s;
                if (queue_block || cannot_clear) && stop_feasible {
                    stop(a_cmd)
                } else if cannot_clear {
                    a_cmd.max(Self::clear_floor(v, clear_dist, light.remaining_s + light.yellow_s))
                } else {
                    a_cmd
                }
            }
        }
    }

    /// Acceleration floor that tracks the speed needed to clear
    /// `clear_dist` within `remaining` seconds.
    fn clear_floor(v: f64, clear_dist: f64, remaining: f64) -> f64 {
        let v_need = clear_dist / remaining.max(0.3);
        v_need - v
    }

    fn gap_accel(&self, lead: &LeadView, v: f64, cfg: &AccConfig) -> f64 {
        let margin = lead.gap_m - cfg.min_gap_m;
        if margin <= 0.0 {
            return HARD_BRAKE_ACCEL;
        }
        // Constant-time-gap regulation toward gap = min_gap + headway * v.
        let a_ctg = cfg.kp * (margin - cfg.headway_s * v) / cfg.headway_s
            + cfg.kp * (lead.speed_mps - v);
        // Safe-approach envelope: the highest speed from which the ego can
        // still match the lead's speed above the hard minimum gap at 90% of
        // the comfort braking rate, with a reaction-time allowance. Far away
        // the envelope is generous; deep inside it scales toward an
        // emergency stop.
        let brake = 0.9 * cfg.comfort_brake_mps2;
        let reach = (margin - 0.3 * v).max(0.0);
        let v_allow =
            (lead.speed_mps * lead.speed_mps + 2.0 * brake * reach).sqrt();
        let a_env = 2.0 * (v_allow - v);
        a_ctg.min(a_env)
    }

    fn stop_accel(distance_m: f64, v: f64, cfg: &AccConfig) -> f64 {
        let d_go = distance_m - cfg.stop_line_tol_m;
        if d_go <= 0.3 {
            return HARD_BRAKE_ACCEL;
        }
        let a = -v * v / (2.0 * d_go);
        if a <= -cfg.activation_brake_mps2 {
            a
        } else {
            // Too far for the stop to bind yet.
            f64::INFINITY
        }
    }
}

/// Safety flags raised while scanning a closed-loop trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    /// Gap below the hard minimum while both vehicles are moving.
    Gap { gap_m: f64 },
    /// Ego body overlaps an intersection conflict zone while that light is red.
    RedOccupancy { intersection: usize },
    /// Realized acceleration beyond the physical bound.
    AccelBound { accel_mps2: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct MonitorInput<'a> {
    pub ego_pos_m: f64,
    pub ego_speed_mps: f64,
    pub ego_accel_mps2: f64,
    pub car_length_m: f64,
    pub lead: Option<LeadView>,
    /// Stop-line position and current phase of every intersection.
    pub signals: &'a [(f64, Phase)],
    pub box_len_m: f64,
    pub min_gap_m: f64,
    pub accel_bound_mps2: f64,
}

/// Checks one trace step against the safety contract.
pub fn safety_monitor(inp: &MonitorInput<'_>) -> Vec<ViolationKind> {
    let mut out = Vec::new();
    if let Some(l) = inp.lead {
        if l.gap_m < inp.min_gap_m && inp.ego_speed_mps > 0.05 && l.speed_mps > 0.05 {
            out.push(ViolationKind::Gap { gap_m: l.gap_m });
        }
    }
    for (i, &(pos, phase)) in inp.signals.iter().enumerate() {
        if phase == Phase::Red {
            let front = inp.ego_pos_m;
            let rear = inp.ego_pos_m - inp.car_length_m;
            if front > pos && rear < pos + inp.box_len_m {
                out.push(ViolationKind::RedOccupancy { intersection: i });
            }
        }
    }
    if inp.ego_accel_mps2.abs() > inp.accel_bound_mps2 {
        out.push(ViolationKind::AccelBound { accel_mps2: inp.ego_accel_mps2 });
    }
    out
}
