use racestack::control::ControllerKind;
use racestack::presets::{cautious_ggv, oval_track};
use racestack::raceline::{min_curvature_path, profile_raceline};
use racestack::sim::{run_closed_loop, PlantConfig, StackConfig};

fn main() {
    let track = oval_track();
    let path = min_curvature_path(&track, 0.4).unwrap();
    let plant = PlantConfig::default();
    let factor = 1.3401;
    let ggv = cautious_ggv().scaled(factor);
    let line = profile_raceline(&path, &ggv).unwrap();
    for replan in [false, true] {
        let mut stack = StackConfig::new(ControllerKind::PurePursuit, ggv.clone());
        stack.online_replan = replan;
        let tr = run_closed_loop(&line, &track, &stack, &plant, 2, 0).unwrap();
        println!(
            "replan={replan}: laps={} crash={:?} rows={}",
            tr.laps_completed,
            tr.crash,
            tr.rows.len()
        );
        if let Some(c) = &tr.crash {
            for r in &tr.rows[c.tick.saturating_sub(40)..] {
                if r.t * 150.0 % 5.0 < 0.99 {
                    println!(
                        "  t={:.3} x={:+.3} y={:+.3} vx={:.3} v_cmd={:.3} rho={:+.3} lat={:+.3} s={:5.2}",
                        r.t, r.x, r.y, r.vx, r.v_cmd, r.rho_ref, r.lat_err, r.s_proj
                    );
                }
            }
        } else {
            let max_lat = tr.rows.iter().map(|r| r.lat_err.abs()).fold(0.0f64, f64::max);
            println!("  laps ok, worst |lat| {:.3} lap_times {:?}", max_lat, tr.lap_times);
        }
    }
}
