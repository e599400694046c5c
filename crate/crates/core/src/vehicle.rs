//! Longitudinal vehicle dynamics in the spatial domain and the static route.
//!
//! The planner state is (speed, cumulative travel time) sampled every `step_m`
//! meters along the route. Acceleration comes from wheel torque against
//! rolling, grade, and aerodynamic resistance; the spatial update divides by
//! speed, so the planner never represents speeds below [`V_FLOOR`]. Standstill
//! exists only in the time-domain plant inside the simulator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest speed representable on the planner grid, in m/s.
pub const V_FLOOR: f64 = 0.5;

#[derive(Debug, Error)]
pub enum VehicleError {
    #[error("vehicle parameter {name} must be strictly positive, got {value}")]
    NonPositiveParam { name: &'static str, value: f64 },
    #[error("route: {0}")]
    BadRoute(String),
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("next speed {v_next:.3} m/s is at or below the {floor:.2} m/s floor")]
    NonPositiveNextSpeed { v_next: f64, floor: f64 },
}

/// Chassis-level parameters for the longitudinal model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub mass_kg: f64,
    pub wheel_radius_m: f64,
    pub gravity_mps2: f64,
    pub air_density_kgpm3: f64,
    pub frontal_area_m2: f64,
    pub rolling_coeff: f64,
    pub drag_coeff: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass_kg: 1800.0,
            wheel_radius_m: 0.32,
            gravity_mps2: 9.81,
            air_density_kgpm3: 1.2,
            frontal_area_m2: 2.25,
            rolling_coeff: 0.009,
            drag_coeff: 0.31,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let fields = [
            ("mass_kg", self.mass_kg),
            ("wheel_radius_m", self.wheel_radius_m),
            ("gravity_mps2", self.gravity_mps2),
            ("air_density_kgpm3", self.air_density_kgpm3),
            ("frontal_area_m2", self.frontal_area_m2),
            ("rolling_coeff", self.rolling_coeff),
            ("drag_coeff", self.drag_coeff),
        ];
        for (name, value) in fields {
            if !(value > 0.0) {
                return Err(VehicleError::NonPositiveParam { name, value });
            }
        }
        Ok(())
    }

    /// Resistance terms expressed as a deceleration, m/s^2.
    ///
    /// Sign convention follows the dynamics equation: a positive grade angle
    /// enters with a positive sign (it reduces resistance), so climbing is a
    /// negative angle here.
    pub fn resistance_accel(&self, v: f64, grade_rad: f64) -> f64 {
        self.gravity_mps2 * (grade_rad.cos() * self.rolling_coeff - grade_rad.sin())
            + self.air_density_kgpm3 * self.frontal_area_m2 * self.drag_coeff * v * v
                / (2.0 * self.mass_kg)
    }

    /// Wheel torque that produces acceleration `a` at speed `v` on `grade_rad`.
    pub fn torque_for_accel(&self, a: f64, v: f64, grade_rad: f64) -> f64 {
        self.mass_kg * self.wheel_radius_m * (a + self.resistance_accel(v, grade_rad))
    }
}

/// Planner acceleration bounds, m/s^2.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccelLimits {
    pub min_mps2: f64,
    pub max_mps2: f64,
}

impl Default for AccelLimits {
    fn default() -> Self {
        Self { min_mps2: -2.0, max_mps2: 2.5 }
    }
}

impl AccelLimits {
    /// Bounds check, inclusive on both ends.
    pub fn contains(&self, a: f64) -> bool {
        a >= self.min_mps2 && a <= self.max_mps2
    }
}

/// Static description of the corridor: length, grid step, grade and speed
/// limit per step, and intersection stop-line positions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteSpec {
    length_m: f64,
    step_m: f64,
    grade_rad: Vec<f64>,
    speed_limit_mps: Vec<f64>,
    intersections_m: Vec<f64>,
}

impl RouteSpec {
    pub fn new(
        length_m: f64,
        step_m: f64,
        grade_rad: Vec<f64>,
        speed_limit_mps: Vec<f64>,
        intersections_m: Vec<f64>,
    ) -> Result<Self, VehicleError> {
        if !(step_m > 0.0) {
            return Err(VehicleError::BadRoute(format!("step_m must be > 0, got {step_m}")));
        }
        if !(length_m > 0.0) {
            return Err(VehicleError::BadRoute(format!("length_m must be > 0, got {length_m}")));
        }
        let n = (length_m / step_m).round() as usize;
        if (n as f64 * step_m - length_m).abs() > 1e-6 {
            return Err(VehicleError::BadRoute(format!(
                "length_m {length_m} is not a multiple of step_m {step_m}"
            )));
        }
        if grade_rad.len() != n {
            return Err(VehicleError::BadRoute(format!(
                "grade profile has {} entries, expected {n}",
                grade_rad.len()
            )));
        }
        if speed_limit_mps.len() != n {
            return Err(VehicleError::BadRoute(format!(
                "speed limit profile has {} entries, expected {n}",
                speed_limit_mps.len()
            )));
        }
        if speed_limit_mps.iter().any(|&v| !(v > V_FLOOR)) {
            return Err(VehicleError::BadRoute("speed limits must exceed the speed floor".into()));
        }
        for w in intersections_m.windows(2) {
            if w[1] <= w[0] {
                return Err(VehicleError::BadRoute(
                    "intersection positions must be strictly increasing".into(),
                ));
            }
        }
        if intersections_m.iter().any(|&d| d < 0.0 || d > length_m) {
            return Err(VehicleError::BadRoute(
                "intersection positions must lie within the route".into(),
            ));
        }
        Ok(Self { length_m, step_m, grade_rad, speed_limit_mps, intersections_m })
    }

    /// Flat route at a constant speed limit.
    pub fn flat(length_m: f64, step_m: f64, speed_limit: f64, intersections_m: Vec<f64>) -> Self {
        let n = (length_m / step_m).round() as usize;
        Self::new(length_m, step_m, vec![0.0; n], vec![speed_limit; n], intersections_m)
            .expect("flat route construction")
    }

    pub fn length_m(&self) -> f64 {
        self.length_m
    }

    pub fn step_m(&self) -> f64 {
        self.step_m
    }

    pub fn n_steps(&self) -> usize {
        self.grade_rad.len()
    }

    pub fn intersections_m(&self) -> &[f64] {
        &self.intersections_m
    }

    fn index_at(&self, pos_m: f64) -> usize {
        if pos_m <= 0.0 {
            return 0;
        }
        ((pos_m / self.step_m) as usize).min(self.grade_rad.len().saturating_sub(1))
    }

    pub fn grade_at(&self, pos_m: f64) -> f64 {
        self.grade_rad[self.index_at(pos_m)]
    }

    pub fn speed_limit_at(&self, pos_m: f64) -> f64 {
        self.speed_limit_mps[self.index_at(pos_m)]
    }

    pub fn max_speed_limit(&self) -> f64 {
        self.speed_limit_mps.iter().cloned().fold(f64::MIN, f64::max)
    }

    /// First intersection strictly ahead of `pos_m`, as (index, position).
    pub fn next_intersection(&self, pos_m: f64) -> Option<(usize, f64)> {
        self.intersections_m
            .iter()
            .enumerate()
            .find(|(_, &d)| d > pos_m)
            .map(|(i, &d)| (i, d))
    }
}

/// Planner state pair on the spatial grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Speed, m/s.
    pub v: f64,
    /// Cumulative travel time since route start, s.
    pub t: f64,
}

impl State {
    pub fn new(v: f64, t: f64) -> Self {
        debug_assert!(v >= 0.0 && t >= 0.0);
        Self { v, t }
    }
}

/// Longitudinal acceleration from wheel torque at speed `v` on `grade_rad`.
pub fn acceleration(v: f64, wheel_torque_nm: f64, grade_rad: f64, params: &VehicleParams) -> f64 {
    wheel_torque_nm / (params.mass_kg * params.wheel_radius_m) - params.resistance_accel(v, grade_rad)
}

/// One spatial-domain transition of length `ds_m`, returning the next state.
///
/// Fails when the next speed falls to the grid floor or below; the caller
/// must treat that torque as inadmissible.
pub fn step_ds(
    state: &State,
    wheel_torque_nm: f64,
    grade_rad: f64,
    ds_m: f64,
    params: &VehicleParams,
) -> Result<State, StepError> {
    debug_assert!(state.v > 0.0, "spatial update is singular at v = 0");
    let a = acceleration(state.v, wheel_torque_nm, grade_rad, params);
    let v_next = state.v + a * ds_m / state.v;
    if v_next <= V_FLOOR {
        return Err(StepError::NonPositiveNextSpeed { v_next, floor: V_FLOOR });
    }
    Ok(State { v: v_next, t: state.t + ds_m / v_next })
}

/// Transition along the route grid at step index `k`.
pub fn step(
    state: &State,
    wheel_torque_nm: f64,
    k: usize,
    route: &RouteSpec,
    params: &VehicleParams,
) -> Result<State, StepError> {
    let grade = route.grade_rad[k.min(route.grade_rad.len() - 1)];
    step_ds(state, wheel_torque_nm, grade, route.step_m, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn torque_balancing_rolling_resistance_gives_zero_accel() {
        let p = params();
        let torque = p.mass_kg * p.wheel_radius_m * p.gravity_mps2 * p.rolling_coeff;
        let a = acceleration(0.0, torque, 0.0, &p);
        assert!(a.abs() < 1e-12, "a = {a}");
    }

    #[test]
    fn acceleration_matches_direct_substitution() {
        let p = params();
        // Independent evaluation of the force balance, written out term by term.
        let expected = 500.0 / (1800.0 * 0.32)
            - 9.81 * (1.0_f64 * 0.009 - 0.0)
            - (1.2 * 2.25 * 0.31) / (2.0 * 1800.0) * 20.0 * 20.0;
        let a = acceleration(20.0, 500.0, 0.0, &p);
        assert!((a - expected).abs() < 1e-12, "a = {a}, expected {expected}");
    }

    #[test]
    fn grade_sign_ordering() {
        // Positive angle acts downhill in this sign convention, so the
        // negative angle is the climb and must accelerate less.
        let p = params();
        let a_climb = acceleration(15.0, 400.0, -0.02, &p);
        let a_descend = acceleration(15.0, 400.0, 0.02, &p);
        assert!(a_climb < a_descend);
    }

    #[test]
    fn zero_accel_step_is_identity_in_speed() {
        let p = params();
        let route = RouteSpec::flat(10.0, 1.0, 20.0, vec![]);
        let torque = p.torque_for_accel(0.0, 10.0, 0.0);
        let s = step(&State::new(10.0, 5.0), torque, 0, &route, &p).unwrap();
        assert!((s.v - 10.0).abs() < 1e-12);
        assert!((s.t - 5.1).abs() < 1e-12);
    }

    #[test]
    fn step_matches_hand_substitution() {
        let p = params();
        let torque = p.torque_for_accel(2.0, 10.0, 0.0);
        let s = step_ds(&State::new(10.0, 5.0), torque, 0.0, 1.0, &p).unwrap();
        assert!((s.v - 10.2).abs() < 1e-12);
        assert!((s.t - (5.0 + 1.0 / 10.2)).abs() < 1e-12);
    }

    #[test]
    fn braking_below_floor_is_rejected() {
        let p = params();
        let r = step_ds(&State::new(1.0, 0.0), -3000.0, 0.0, 1.0, &p);
        assert!(matches!(r, Err(StepError::NonPositiveNextSpeed { .. })));
    }

    #[test]
    fn accel_bounds_inclusive() {
        let lim = AccelLimits::default();
        assert!(lim.contains(lim.max_mps2));
        assert!(!lim.contains(lim.max_mps2 + 0.01));
        assert!(lim.contains(0.0));
        assert!(lim.contains(lim.min_mps2));
        assert!(!lim.contains(lim.min_mps2 - 0.01));
    }

    #[test]
    fn constant_speed_composition_is_exact() {
        let p = params();
        let route = RouteSpec::flat(50.0, 1.0, 20.0, vec![]);
        let torque = p.torque_for_accel(0.0, 8.0, 0.0);
        let mut s = State::new(8.0, 0.0);
        for k in 0..50 {
            s = step(&s, torque, k, &route, &p).unwrap();
        }
        assert!((s.v - 8.0).abs() < 1e-9);
        assert!((s.t - 50.0 / 8.0).abs() < 1e-9);
    }

    #[test]
    fn torque_monotonicity_and_speed_monotonicity() {
        let p = params();
        let a1 = acceleration(12.0, 300.0, 0.0, &p);
        let a2 = acceleration(12.0, 400.0, 0.0, &p);
        assert!(a2 > a1);
        let a3 = acceleration(15.0, 300.0, 0.0, &p);
        assert!(a3 < a1);
    }

    #[test]
    fn steady_state_power_balance() {
        let p = params();
        for &v in &[3.0, 8.0, 15.0, 19.0] {
            let torque = p.torque_for_accel(0.0, v, 0.0);
            let wheel_power = torque * v / p.wheel_radius_m;
            let resist_power = (p.rolling_coeff * p.mass_kg * p.gravity_mps2
                + p.air_density_kgpm3 * p.frontal_area_m2 * p.drag_coeff * v * v / 2.0)
                * v;
            let rel = (wheel_power - resist_power).abs() / resist_power;
            assert!(rel < 1e-9, "v={v}: rel={rel}");
        }
    }

    #[test]
    fn route_validation_rejects_bad_inputs() {
        assert!(RouteSpec::new(100.0, 1.0, vec![0.0; 100], vec![20.0; 100], vec![50.0, 40.0])
            .is_err());
        assert!(RouteSpec::new(100.0, 1.0, vec![0.0; 99], vec![20.0; 100], vec![]).is_err());
        assert!(RouteSpec::new(100.0, 1.0, vec![0.0; 100], vec![20.0; 100], vec![150.0]).is_err());
        assert!(RouteSpec::new(100.0, 3.0, vec![0.0; 33], vec![20.0; 33], vec![]).is_err());
    }

    #[test]
    fn route_lookups() {
        let route = RouteSpec::flat(100.0, 1.0, 20.0, vec![30.0, 60.0]);
        assert_eq!(route.next_intersection(0.0), Some((0, 30.0)));
        assert_eq!(route.next_intersection(30.0), Some((1, 60.0)));
        assert_eq!(route.next_intersection(60.0), None);
        assert_eq!(route.grade_at(99.9), 0.0);
        assert_eq!(route.speed_limit_at(1000.0), 20.0);
    }

    #[test]
    fn params_validation() {
        let mut p = params();
        assert!(p.validate().is_ok());
        p.mass_kg = 0.0;
        assert!(p.validate().is_err());
    }
}
