use eco_core::config::Config;
use eco_core::eval::Harness;
use eco_core::planner::{CostModelKind, TerminalTableCache};
use eco_core::powertrain::build_cost_map;
use eco_core::sim::ControllerMode;

#[test]
fn find_violations() {
    let cfg = Config::default().with_fast_planner();
    let asm = cfg.assemble(None).unwrap();
    let map = build_cost_map(&cfg.powertrain, &cfg.costmap.grids()).unwrap();
    let tables = TerminalTableCache::new();
    let h = Harness { cfg: &cfg, asm: &asm, cost_map: &map, tables: &tables };
    for seed in 1000..1030u64 {
        for mode in [ControllerMode::EcoAccReceding, ControllerMode::AccOnly] {
            if let Ok((m, trace)) = h.run_seed(mode, CostModelKind::PowerMap, seed) {
                if m.total_violations() > 0 {
                    println!("seed {seed} {mode}: gap {} red {} accel {}", m.gap_violations, m.red_violations, m.accel_violations);
                    for v in trace.violations.iter().take(4) {
                        println!("   t={:.1} {:?}", v.time_s, v.kind);
                    }
                    // context rows around the first violation
                    let t0 = trace.violations[0].time_s;
                    for r in trace.rows.iter().filter(|r| (r.time_s - t0).abs() < 2.0).step_by(2) {
                        println!("   t={:6.1} pos={:7.1} v={:5.2} vref={:5.2} T={:8.1} light={:5.1}{} rem gap={:?}",
                            r.time_s, r.pos_m, r.speed_mps, r.v_ref_mps, r.torque_cmd_nm,
                            r.next_light_dist_m.min(999.0),
                            r.next_light_phase.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
                            r.lead_gap_m.map(|g| (g*10.0).round()/10.0));
                    }
                }
            }
        }
    }
    println!("scan done");
}
