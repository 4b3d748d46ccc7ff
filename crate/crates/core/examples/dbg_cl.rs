use racestack::control::ControllerKind;
use racestack::harness::extract_dataset;
use racestack::msnn::{train, uniform_gate_centers, MsnnModel, MsnnVariant, TrainConfig};
use racestack::presets::{cautious_ggv, club_track};
use racestack::raceline::{min_curvature_path, profile_raceline, PLANNING_MARGIN};
use racestack::sim::{run_closed_loop, PlantConfig, StackConfig};

fn main() {
    let track = club_track();
    let path = min_curvature_path(&track, PLANNING_MARGIN).unwrap();
    let plant = PlantConfig::default();
    let nominal = cautious_ggv().scaled(1.1576);
    let line_n = profile_raceline(&path, &nominal).unwrap();
    let stack = StackConfig::new(ControllerKind::PurePursuit, nominal.clone());
    let trace = run_closed_loop(&line_n, &track, &stack, &plant, 4, 0).unwrap();
    let (tr_set, va_set) = extract_dataset(&trace, 9, 0.05, 0.75, 1).unwrap();
    let centers = uniform_gate_centers(5, 2.38, 3.25);
    let init = MsnnModel::new(MsnnVariant::Extended, plant.wheelbase, centers, 9).unwrap();
    let (fit, _) = train(&init, &tr_set, &va_set, &TrainConfig::default()).unwrap();

    let ggv = cautious_ggv();
    let line = profile_raceline(&path, &ggv).unwrap();
    let mut st = StackConfig::new(ControllerKind::Clothoid, ggv.clone());
    st.msnn = Some(fit.clone());
    let tr = run_closed_loop(&line, &track, &st, &plant, 3, 0).unwrap();
    let st2 = StackConfig::new(ControllerKind::Clothoid, ggv.clone());
    let tr2 = run_closed_loop(&line, &track, &st2, &plant, 3, 0).unwrap();

    // middle lap of each, aligned by s_proj: bucket lat by arc position
    let total = line.path.total_len;
    let nb = 64usize;
    let mut b1 = vec![(0.0f64, 0usize); nb];
    let mut b2 = vec![(0.0f64, 0usize); nb];
    let (n1, n2) = (tr.rows.len(), tr2.rows.len());
    for r in &tr.rows[n1 / 3..2 * n1 / 3] {
        let k = ((r.s_proj.rem_euclid(total) / total) * nb as f64) as usize % nb;
        b1[k].0 += r.lat_err;
        b1[k].1 += 1;
    }
    for r in &tr2.rows[n2 / 3..2 * n2 / 3] {
        let k = ((r.s_proj.rem_euclid(total) / total) * nb as f64) as usize % nb;
        b2[k].0 += r.lat_err;
        b2[k].1 += 1;
    }
    println!("  s     path_rho   msnn_lat   raw_lat");
    for k in 0..nb {
        let s = (k as f64 + 0.5) / nb as f64 * total;
        let p = line.path.sample(s);
        let m = if b1[k].1 > 0 { b1[k].0 / b1[k].1 as f64 } else { f64::NAN };
        let r = if b2[k].1 > 0 { b2[k].0 / b2[k].1 as f64 } else { f64::NAN };
        println!("  {s:5.2}  {:+.3}     {m:+.3}     {r:+.3}", p.rho);
    }
}
