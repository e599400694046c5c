use eco_core::config::Config;
use eco_core::eval::Harness;
use eco_core::planner::{CostModelKind, TerminalTableCache};
use eco_core::powertrain::build_cost_map;
use eco_core::sim::ControllerMode;

#[test]
fn dump_trace() {
    let cfg = Config::default().with_fast_planner();
    let asm = cfg.assemble(None).unwrap();
    let map = build_cost_map(&cfg.powertrain, &cfg.costmap.grids()).unwrap();
    let tables = TerminalTableCache::new();
    let h = Harness { cfg: &cfg, asm: &asm, cost_map: &map, tables: &tables };
    let (_, trace) = h.run_seed(ControllerMode::EcoAccReceding, CostModelKind::PowerMap, 42).unwrap();
    // Torque-cycling diagnostics.
    let mut pos_work = 0.0;
    let mut neg_work = 0.0;
    let mut flips = 0;
    let mut prev_sign = 0i32;
    for r in &trace.rows {
        let mech = r.torque_cmd_nm / 0.32 * r.speed_mps * 0.2;
        if mech > 0.0 { pos_work += mech } else { neg_work += mech }
        let sign = if r.torque_cmd_nm > 50.0 { 1 } else if r.torque_cmd_nm < -50.0 { -1 } else { 0 };
        if sign != 0 && prev_sign != 0 && sign != prev_sign { flips += 1; }
        if sign != 0 { prev_sign = sign; }
    }
    println!("pos work {:.0} kJ, neg work {:.0} kJ, sign flips {}, battery {:.0} kJ, time {:.1}",
        pos_work/1e3, neg_work/1e3, flips, trace.totals.battery_energy_j/1e3, trace.totals.travel_time_s);
    // Sample every 10 s.
    for r in trace.rows.iter().step_by(50) {
        println!(
            "t={:6.1} pos={:7.1} v={:5.2} vref={:5.2} T={:7.1} light={:6.1}{} gap={:+.1} seq={}",
            r.time_s, r.pos_m, r.speed_mps, r.v_ref_mps, r.torque_cmd_nm,
            r.next_light_dist_m.min(9999.0),
            r.next_light_phase.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
            r.lead_gap_m.unwrap_or(-1.0),
            r.policy_seq,
        );
    }
}
