use racestack::control::{ControllerKind, LookaheadSchedule};
use racestack::harness::{compute_metrics, extract_dataset};
use racestack::msnn::{train, uniform_gate_centers, MsnnModel, MsnnVariant, TrainConfig};
use racestack::presets::{cautious_ggv, club_track};
use racestack::raceline::{min_curvature_path, profile_raceline, PLANNING_MARGIN};
use racestack::sim::{run_closed_loop, PlantConfig, StackConfig};

fn fit_for(pp: &LookaheadSchedule) -> Option<racestack::msnn::MsnnModel> {
    let track = club_track();
    let path = min_curvature_path(&track, PLANNING_MARGIN).unwrap();
    let plant = PlantConfig::default();
    let nominal = cautious_ggv().scaled(1.1576);
    let line = profile_raceline(&path, &nominal).unwrap();
    let mut stack = StackConfig::new(ControllerKind::PurePursuit, nominal.clone());
    stack.schedule = pp.clone();
    let trace = match run_closed_loop(&line, &track, &stack, &plant, 4, 0) {
        Ok(t) => t,
        Err(e) => { eprintln!("  [collection failed: {e:?}]"); return None; }
    };
    let (tr_set, va_set) = extract_dataset(&trace, 9, 0.05, 0.75, 1).unwrap();
    let vs: Vec<f64> = tr_set.samples.iter().map(|w| w.window.v[0]).collect();
    let (vlo, vhi) = vs.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let centers = uniform_gate_centers(5, vlo, vhi);
    let init = MsnnModel::new(MsnnVariant::Extended, plant.wheelbase, centers, 9).unwrap();
    let (fit, _) = train(&init, &tr_set, &va_set, &TrainConfig::default()).unwrap();
    let ev = racestack::msnn::evaluate(&fit, &va_set).unwrap();
    eprintln!("  [fit v-support {vlo:.2}..{vhi:.2} val_fvu {:.4}]", ev.fvu);
    Some(fit)
}

fn case(name: &str, ctrl: ControllerKind, sched: &LookaheadSchedule, fit: Option<&racestack::msnn::MsnnModel>) {
    let track = club_track();
    let path = min_curvature_path(&track, PLANNING_MARGIN).unwrap();
    let plant = PlantConfig::default();
    let ggv = cautious_ggv();
    let line = profile_raceline(&path, &ggv).unwrap();
    let mut st = StackConfig::new(ctrl, ggv.clone());
    st.schedule = sched.clone();
    st.msnn = fit.cloned();
    match run_closed_loop(&line, &track, &st, &plant, 6, 0) {
        Ok(tr) => {
            if tr.crash.is_some() {
                println!("{name}: CRASH t={:.2}", tr.rows.last().unwrap().t);
            } else {
                let m = compute_metrics(&tr, &line).unwrap();
                println!(
                    "{name}: mean_lat {:.4} max_lat {:.4} rms_rate {:.3} lap {:.3}",
                    m.mean_lat_err, m.max_lat_err, m.rms_steering_rate, m.lap_time.unwrap_or(f64::NAN)
                );
            }
        }
        Err(e) => println!("{name}: ERR {e:?}"),
    }
}

fn main() {
    for (tag, lo, hi) in [("pp x1.00", 0.8, 1.4), ("pp x1.25", 1.0, 1.75), ("pp x1.40", 1.1, 1.95)] {
        let sched = LookaheadSchedule::new(vec![1.0, 4.0], vec![lo, hi]).unwrap();
        let Some(fit) = fit_for(&sched) else { println!("{tag}: collection crashed"); continue };
        case(&format!("{tag} raw "), ControllerKind::PurePursuit, &sched, None);
        case(&format!("{tag} msnn"), ControllerKind::PurePursuit, &sched, Some(&fit));
    }
}
