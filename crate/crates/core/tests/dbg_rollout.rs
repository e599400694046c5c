use eco_core::config::Config;
use eco_core::grid::UniformGrid;
use eco_core::planner::*;
use eco_core::powertrain::build_cost_map;
use eco_core::signals::LiveSpat;
use eco_core::vehicle::State;

#[test]
fn rollout_probe() {
    let cfg = Config::default().with_fast_planner();
    let asm = cfg.assemble(None).unwrap();
    let map = build_cost_map(&cfg.powertrain, &cfg.costmap.grids()).unwrap();

    // Anchor mid-crawl near the end of the corridor, no lights left.
    let req = TerminalRequest {
        anchor_pos_m: 2390.0,
        route: &asm.route,
        models: &asm.models,
        cfg: &cfg.planner,
        veh: &cfg.vehicle,
        pt: &cfg.powertrain,
        cost_map: &map,
        soc: 0.88,
        energy: CostModelKind::PowerMap,
    };
    let table = terminal_cost(&req);
    let live: Option<LiveSpat> = None;
    let solve = SolveRequest {
        anchor: State { v: 1.3, t: 315.0 },
        anchor_pos_m: 2390.0,
        soc: 0.88,
        live,
        red_estimates: &[30.0; 8],
        true_signals: None,
        nominal_specs: &asm.models.iter().map(|m| m.nominal_spec()).collect::<Vec<_>>(),
        terminal: &table,
        cfg: &cfg.planner,
        accel: cfg.limits,
        route: &asm.route,
        veh: &cfg.vehicle,
        pt: &cfg.powertrain,
        cost_map: &map,
        energy: CostModelKind::PowerMap,
    };
    match solve_dp(&solve) {
        Ok(p) => {
            println!("solved, steps {}", p.n_steps);
            for s in rollout(&p, &asm.route, &cfg.vehicle, &map, 0.88, cfg.planner.lambda_w) {
                println!("k={:2} pos={:7.1} v={:5.2} t={:6.1} T={:8.1} stage={:9.1}", s.k, s.pos_m, s.v_mps, s.t_s, s.torque_nm, s.stage_cost_w);
            }
            // Anchor-layer values and torques per speed node.
            for iv in 0..p.v_grid.n() {
                println!("k=0 v={:5.2} V={:12.1} T={:8.1}", p.v_grid.value(iv), p.values[0][iv], p.torques[0][iv]);
            }
            // A mid-horizon layer: values across (v, t).
            let k = 10;
            let tg = &p.t_grids[k];
            for iv in (0..p.v_grid.n()).step_by(3) {
                let mut line = format!("k=10 v={:5.2}:", p.v_grid.value(iv));
                for jt in (0..tg.n()).step_by(4) {
                    line += &format!(" {:9.0}@t={:.0}", p.values[k][iv * tg.n() + jt], tg.value(jt));
                }
                println!("{line}");
            }
        }
        Err(e) => println!("failed: {e}"),
    }
    let _ = UniformGrid::from_range(0.0, 1.0, 2);
}
