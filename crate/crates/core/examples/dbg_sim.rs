use racestack::control::{ControllerKind, LookaheadSchedule};
use racestack::presets::{cautious_ggv, oval_track};
use racestack::raceline::{min_curvature_path, profile_raceline, PLANNING_MARGIN};
use racestack::sim::{run_closed_loop, PlantConfig, StackConfig};

fn main() {
    let ggv = cautious_ggv();
    let track = oval_track();
    let path = min_curvature_path(&track, PLANNING_MARGIN).unwrap();
    let line = profile_raceline(&path, &ggv).unwrap();
    println!("# raceline len={:.2} lap={:.2}", line.path.total_len, line.lap_time());

    for (name, kind) in [
        ("pp", ControllerKind::PurePursuit),
        ("cl", ControllerKind::Clothoid),
    ] {
        for scale in [1.0, 1.25, 1.5] {
            for preview in [0.05, 0.10, 0.15, 0.20, 0.25] {
                let mut stack = StackConfig::new(kind, ggv.clone());
                let base = match kind {
                    ControllerKind::PurePursuit => LookaheadSchedule::pure_pursuit_default(),
                    ControllerKind::Clothoid => LookaheadSchedule::clothoid_default(),
                };
                stack.schedule = LookaheadSchedule::new(
                    base.v_knots.clone(),
                    base.ld_knots.iter().map(|l| l * scale).collect(),
                )
                .unwrap();
                stack.cl_preview = preview;
                let trace =
                    run_closed_loop(&line, &track, &stack, &PlantConfig::default(), 3, 0)
                        .unwrap();
                let worst =
                    trace.rows.iter().map(|r| r.lat_err.abs()).fold(0.0f64, f64::max);
                let mean = trace.rows.iter().map(|r| r.lat_err.abs()).sum::<f64>()
                    / trace.rows.len().max(1) as f64;
                println!(
                    "{name} ld_scale={scale:.2} preview={preview:.2}: laps={} crash={} worst_lat={worst:.3} mean_lat={mean:.4} last_lap={:.2}",
                    trace.laps_completed,
                    trace.crash.is_some(),
                    trace.lap_times.last().copied().unwrap_or(f64::NAN),
                );
                if kind == ControllerKind::PurePursuit {
                    break; // preview only affects CL
                }
            }
        }
    }
}
