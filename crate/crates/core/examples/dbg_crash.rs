use racestack::control::ControllerKind;
use racestack::harness::{compute_metrics, extract_dataset};
use racestack::msnn::{train, uniform_gate_centers, MsnnModel, MsnnVariant, TrainConfig};
use racestack::presets::{cautious_ggv, club_track};
use racestack::raceline::{min_curvature_path, profile_raceline, PLANNING_MARGIN};
use racestack::sim::{run_closed_loop, PlantConfig, RunTrace, StackConfig};

fn describe(tag: &str, tr: &RunTrace, line: &racestack::raceline::Raceline) {
    let m = compute_metrics(tr, line).unwrap();
    println!(
        "{tag}: mean_lat={:.4} rms_steer_rate={:.3} lap={:?}",
        m.mean_lat_err,
        m.rms_steering_rate,
        m.lap_time.map(|t| (t * 1e3).round() / 1e3)
    );
    let maxlat = tr.rows.iter().map(|r| r.lat_err.abs()).fold(0.0f64, f64::max);
    // per-lap max |lat| to see growth
    let mut lap_max = Vec::new();
    let mut cur = 0.0f64;
    let mut prev_s = 0.0;
    for r in &tr.rows {
        if prev_s > 0.7 * 16.0 && r.s_proj < 0.3 * 16.0 {
            lap_max.push(cur);
            cur = 0.0;
        }
        cur = cur.max(r.lat_err.abs());
        prev_s = r.s_proj;
    }
    lap_max.push(cur);
    let lm: Vec<String> = lap_max.iter().map(|x| format!("{x:.3}")).collect();
    println!(
        "{tag}: laps={} crash={:?} maxlat={maxlat:.3} per-lap [{}] lap_times={:?}",
        tr.laps_completed,
        tr.crash.as_ref().map(|c| c.tick),
        lm.join(" "),
        tr.lap_times.iter().map(|t| (t * 1e3).round() / 1e3).collect::<Vec<_>>()
    );
}

fn main() {
    let track = club_track();
    let path = min_curvature_path(&track, PLANNING_MARGIN).unwrap();
    let plant = PlantConfig::default();
    let nominal = cautious_ggv().scaled(1.1576);
    let line = profile_raceline(&path, &nominal).unwrap();
    let stack = StackConfig::new(ControllerKind::PurePursuit, nominal.clone());
    let trace = run_closed_loop(&line, &track, &stack, &plant, 4, 0).unwrap();
    let (tr_set, va_set) = extract_dataset(&trace, 9, 0.05, 0.75, 1).unwrap();
    let centers = uniform_gate_centers(5, 2.38, 3.25);
    let init = MsnnModel::new(MsnnVariant::Extended, plant.wheelbase, centers, 9).unwrap();
    let (fit, _) = train(&init, &tr_set, &va_set, &TrainConfig::default()).unwrap();

    for f in [1.0, 1.05] {
        let ggv = cautious_ggv().scaled(f);
        let line = profile_raceline(&path, &ggv).unwrap();
        // raw
        let st = StackConfig::new(ControllerKind::PurePursuit, ggv.clone());
        let tr = run_closed_loop(&line, &track, &st, &plant, 6, 0).unwrap();
        describe(&format!("raw pp lookup   f={f:.2}"), &tr, &line);
        // msnn
        let mut st = StackConfig::new(ControllerKind::PurePursuit, ggv.clone());
        st.msnn = Some(fit.clone());
        let tr = run_closed_loop(&line, &track, &st, &plant, 6, 0).unwrap();
        describe(&format!("pp msnn lookup  f={f:.2}"), &tr, &line);
        if let Some(c) = &tr.crash {
            let a = c.tick.saturating_sub(120);
            for r in tr.rows[a..].iter().step_by(15) {
                println!(
                    "   t={:.2} vx={:.2} rho={:+.3} lat={:+.3} cmd={:+.4} act={:+.4} vcmd={:.2}",
                    r.t, r.vx, r.rho_ref, r.lat_err, r.delta_cmd, r.delta_act, r.v_cmd
                );
            }
        }
        // clothoid msnn
        let mut st = StackConfig::new(ControllerKind::Clothoid, ggv.clone());
        st.msnn = Some(fit.clone());
        let tr = run_closed_loop(&line, &track, &st, &plant, 6, 0).unwrap();
        describe(&format!("cl  msnn lookup f={f:.2}"), &tr, &line);
        if f == 1.0 {
            if let Some(c) = &tr.crash {
                let a = c.tick.saturating_sub(120);
                for r in tr.rows[a..].iter().step_by(15) {
                    println!(
                        "   t={:.2} vx={:.2} rho={:+.3} lat={:+.3} cmd={:+.4} act={:+.4} vcmd={:.2}",
                        r.t, r.vx, r.rho_ref, r.lat_err, r.delta_cmd, r.delta_act, r.v_cmd
                    );
                }
            }
        }
        // raw clothoid for reference
        let st = StackConfig::new(ControllerKind::Clothoid, ggv.clone());
        let tr = run_closed_loop(&line, &track, &st, &plant, 6, 0).unwrap();
        describe(&format!("raw cl lookup   f={f:.2}"), &tr, &line);
    }
}
