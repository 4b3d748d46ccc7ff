use racestack::control::ControllerKind;
use racestack::harness::extract_dataset;
use racestack::msnn::{
    evaluate, interpret_weights, train, uniform_gate_centers, MsnnModel, MsnnVariant, TrainConfig,
};
use racestack::presets::{cautious_ggv, club_track};
use racestack::raceline::{min_curvature_path, profile_raceline, PLANNING_MARGIN};
use racestack::sim::{run_closed_loop, PlantConfig, StackConfig};

fn main() {
    let track = club_track();
    let path = min_curvature_path(&track, PLANNING_MARGIN).unwrap();
    let plant = PlantConfig::default();

    // provisional nominal: one expansion notch under the PP static bound
    let nominal = cautious_ggv().scaled(1.1576);
    let line = profile_raceline(&path, &nominal).unwrap();
    println!("nominal raceline: lap est {:.3}", line.lap_time());

    let stack = StackConfig::new(ControllerKind::PurePursuit, nominal.clone());
    let t0 = std::time::Instant::now();
    let trace = run_closed_loop(&line, &track, &stack, &plant, 4, 0).unwrap();
    println!(
        "collection: laps={} crash={:?} dur={:.1}s ({:?})",
        trace.laps_completed,
        trace.crash,
        trace.rows.len() as f64 / trace.tick_rate,
        t0.elapsed()
    );

    let (train_set, val_set) = extract_dataset(&trace, 9, 0.05, 0.75, 1).unwrap();
    println!("dataset: train {} val {}", train_set.len(), val_set.len());
    let vmin = trace.rows.iter().map(|r| r.vx).fold(f64::INFINITY, f64::min);
    let vmax = trace.rows.iter().map(|r| r.vx).fold(0.0f64, f64::max);
    println!("speed range {:.2}..{:.2}", vmin, vmax);

    let centers = uniform_gate_centers(5, vmin, vmax);
    let mut models = Vec::new();
    for variant in [MsnnVariant::Extended, MsnnVariant::Baseline] {
        let init = MsnnModel::new(variant, plant.wheelbase, centers.clone(), 9).unwrap();
        let t0 = std::time::Instant::now();
        let (fit, hist) = train(&init, &train_set, &val_set, &TrainConfig::default()).unwrap();
        let ev = evaluate(&fit, &val_set).unwrap();
        let rep = interpret_weights(&fit, 0.05);
        println!(
            "{variant:?}: epochs={} val FVU {:.4} rmse {:.5}  implied_delay {:.3}  ({:?})",
            hist.best_epoch,
            ev.fvu,
            ev.rmse,
            rep.implied_delay,
            t0.elapsed()
        );
        models.push(fit);
    }

    // feasibility bounds of the MS-NN stacks
    let model = models[0].clone();
    for (name, ctrl, replan) in [
        ("pp+msnn lookup", ControllerKind::PurePursuit, false),
        ("pp+msnn fbga", ControllerKind::PurePursuit, true),
        ("cl+msnn lookup", ControllerKind::Clothoid, false),
        ("cl+msnn fbga", ControllerKind::Clothoid, true),
    ] {
        print!("{name}: ");
        let mut last_ok = String::new();
        for k in 0..14 {
            let f = 1.05f64.powi(k);
            let ggv = cautious_ggv().scaled(f);
            let line = profile_raceline(&path, &ggv).unwrap();
            let mut st = StackConfig::new(ctrl, ggv.clone());
            st.online_replan = replan;
            st.msnn = Some(model.clone());
            let tr = run_closed_loop(&line, &track, &st, &plant, 2, 0).unwrap();
            let ok = tr.crash.is_none() && tr.laps_completed == 2;
            if ok {
                let lat = tr.rows.iter().map(|r| r.lat_err.abs()).fold(0.0f64, f64::max);
                last_ok = format!(
                    "f={f:.4} lap={:.3} maxlat={lat:.3}",
                    tr.lap_times.last().unwrap()
                );
            } else {
                println!("bound at f={f:.4}; last ok {last_ok}");
                break;
            }
            if k == 13 {
                println!("never infeasible up to {f:.4}; {last_ok}");
            }
        }
    }
}
