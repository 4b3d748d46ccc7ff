use racestack::control::{curvature_horizon, pure_pursuit_curvature, ControllerKind};
use racestack::geometry::PoseCurv;
use racestack::harness::extract_dataset;
use racestack::msnn::{
    msnn_forward, qss_vector, train, uniform_gate_centers, MsnnModel, MsnnVariant,
    ReferenceWindow, TrainConfig,
};
use racestack::presets::{cautious_ggv, club_track};
use racestack::raceline::{min_curvature_path, profile_raceline, Raceline, PLANNING_MARGIN};
use racestack::sim::{
    run_closed_loop, time_sample_window, PlantConfig, StackConfig, V_SLIP_FLOOR,
};

fn sample_profile(line: &Raceline, s: f64) -> (f64, f64) {
    let n = line.v.len();
    let ds = line.grid_step();
    let total = line.path.total_len;
    let s = s.rem_euclid(total);
    let fi = (s / ds).min((n - 1) as f64 + 0.999_999);
    let i = (fi.floor() as usize).min(n - 1);
    let j = (i + 1) % n;
    let tau = (fi - i as f64).clamp(0.0, 1.0);
    let pick = |a: &[f64]| a[i] + (a[j] - a[i]) * tau;
    (pick(&line.v), pick(&line.ax))
}

fn const_window(rho: f64, v: f64, w1: usize) -> ReferenceWindow {
    ReferenceWindow {
        rho: vec![rho; w1],
        v: vec![v; w1],
        ay: vec![v * v * rho; w1],
        ax: vec![0.0; w1],
    }
}

fn main() {
    let track = club_track();
    let path = min_curvature_path(&track, PLANNING_MARGIN).unwrap();
    let plant = PlantConfig::default();
    let l = plant.wheelbase;
    let k_true = plant.mass
        * (plant.dist_rear * plant.stiffness_rear - plant.dist_front * plant.stiffness_front)
        / (l * plant.stiffness_front * plant.stiffness_rear);
    println!("K_true = {k_true:.5}");

    let nominal = cautious_ggv().scaled(1.1576);
    let line = profile_raceline(&path, &nominal).unwrap();
    let stack = StackConfig::new(ControllerKind::PurePursuit, nominal.clone());
    let trace = run_closed_loop(&line, &track, &stack, &plant, 4, 0).unwrap();
    let (tr_set, va_set) = extract_dataset(&trace, 9, 0.05, 0.75, 1).unwrap();

    // dataset stats
    let mut rho_lo = f64::MAX;
    let mut rho_hi = f64::MIN;
    let mut v_lo = f64::MAX;
    let mut v_hi = f64::MIN;
    let mut ay_hi = f64::MIN;
    let mut d_hi = f64::MIN;
    for s in tr_set.samples.iter().chain(&va_set.samples) {
        for j in 0..s.window.rho.len() {
            rho_lo = rho_lo.min(s.window.rho[j]);
            rho_hi = rho_hi.max(s.window.rho[j]);
            v_lo = v_lo.min(s.window.v[j]);
            v_hi = v_hi.max(s.window.v[j]);
            ay_hi = ay_hi.max(s.window.ay[j].abs());
        }
        d_hi = d_hi.max(s.delta.abs());
    }
    println!("train dist: rho [{rho_lo:+.3},{rho_hi:+.3}] v [{v_lo:.2},{v_hi:.2}] |ay|<={ay_hi:.2} |delta|<={d_hi:.3}");

    let centers = uniform_gate_centers(5, v_lo, v_hi);
    let init = MsnnModel::new(MsnnVariant::Extended, l, centers, 9).unwrap();
    let (fit, _) = train(&init, &tr_set, &va_set, &TrainConfig::default()).unwrap();

    // DC map: constant window vs steady-state need rho*(L + K v^2)
    println!("-- DC map (pred / ideal, ideal = rho*(L+K v^2)) --");
    for &v in &[2.0, 2.4, 2.8, 3.2] {
        let mut row = format!("v={v:.1}:");
        for &rho in &[0.2, 0.5, 0.83, 1.0, 1.2] {
            let pred = msnn_forward(&fit, &const_window(rho, v, 10));
            let ideal = rho * (l + k_true * v * v);
            row.push_str(&format!("  {rho:.2}:{:.3}", pred / ideal));
        }
        println!("{row}");
    }

    // step responses at v=2.4: corner appears/disappears at tap k
    println!("-- entry step (rho 0 then 0.83 from tap k) --");
    for k in [3usize, 5, 7] {
        let mut wnd = const_window(0.0, 2.4, 10);
        for j in k..10 {
            wnd.rho[j] = 0.83;
            wnd.ay[j] = 2.4 * 2.4 * 0.83;
        }
        let pred = msnn_forward(&fit, &wnd);
        println!("  k={k}: pred={pred:+.4} (ideal_now=0, ideal_corner={:.4})", 0.83 * (l + k_true * 2.4 * 2.4));
    }
    println!("-- exit step (rho 0.83 then 0 from tap k) --");
    for k in [3usize, 5, 7] {
        let mut wnd = const_window(0.83, 2.4, 10);
        for j in k..10 {
            wnd.rho[j] = 0.0;
            wnd.ay[j] = 0.0;
        }
        let pred = msnn_forward(&fit, &wnd);
        println!("  k={k}: pred={pred:+.4} (ideal_now={:.4})", 0.83 * (l + k_true * 2.4 * 2.4));
    }

    // closed loop with the net at cautious
    let ggv = cautious_ggv();
    let line = profile_raceline(&path, &ggv).unwrap();
    let mut st = StackConfig::new(ControllerKind::PurePursuit, ggv.clone());
    st.msnn = Some(fit.clone());
    let tr = run_closed_loop(&line, &track, &st, &plant, 2, 0).unwrap();
    println!("msnn run: laps={} crash={:?}", tr.laps_completed, tr.crash);

    // rebuild the exact window at chosen ticks and decompose
    let picks: Vec<usize> = match &tr.crash {
        Some(c) => {
            let last = c.tick;
            vec![200, 600, 1000, last.saturating_sub(300), last.saturating_sub(200),
                 last.saturating_sub(120), last.saturating_sub(60), last.saturating_sub(20)]
        }
        None => vec![200, 600, 1000, 1400],
    };
    for &i in &picks {
        if i == 0 || i >= tr.rows.len() {
            continue;
        }
        let r = &tr.rows[i];
        let prev_s = tr.rows[i - 1].s_proj;
        let (v_rl, _) = sample_profile(&line, prev_s);
        let v_hint = r.vx.max(v_rl).max(2.0 * V_SLIP_FLOOR);
        let horizon = curvature_horizon(1.25 * v_hint, st.w, st.t_s);
        let pose = PoseCurv::new(r.x, r.y, r.psi, r.r / r.vx.max(V_SLIP_FLOOR));
        let reference = pure_pursuit_curvature(pose, r.vx, &line, &st.schedule, horizon);
        let m = reference.rho.len();
        let ds = reference.ds;
        let mut v_prof = Vec::with_capacity(m);
        let mut ax_prof = Vec::with_capacity(m);
        for kk in 0..m {
            let (vv, xa) = sample_profile(&line, reference.s_proj + kk as f64 * ds);
            v_prof.push(vv);
            ax_prof.push(xa);
        }
        let v_win: Vec<f64> = reference
            .rho
            .iter()
            .zip(&v_prof)
            .map(|(&rho, &v)| v.min(st.ggv.max_cornering_speed(rho)))
            .collect();
        let ay_win: Vec<f64> =
            reference.rho.iter().zip(&v_win).map(|(&rho, &v)| v * v * rho).collect();
        let win = time_sample_window(&reference.rho, &v_win, &ax_prof, &ay_win, ds, st.t_s, 10);
        let dss = qss_vector(&fit, &win);
        let mut contrib = Vec::with_capacity(10);
        let mut pred = 0.0;
        for j in 0..10 {
            let psi = fit.gates(win.v[j]);
            let gj: f64 = (0..fit.channels()).map(|c| psi[c] * fit.filters[c][j]).sum();
            contrib.push(dss[j] * gj);
            pred += dss[j] * gj;
        }
        let ideal = r.rho_ref * (l + k_true * r.vx * r.vx);
        println!(
            "tick {i} t={:.2} vx={:.2} lat={:+.3} rho0={:+.3} pred={pred:+.4} logged={:+.4} ideal_now={ideal:+.4}",
            r.t, r.vx, r.lat_err, r.rho_ref, r.delta_cmd
        );
        let rw: Vec<String> = win.rho.iter().map(|x| format!("{x:+.2}")).collect();
        let cw: Vec<String> = contrib.iter().map(|x| format!("{x:+.3}")).collect();
        println!("   rho_win {}  contrib {}", rw.join(" "), cw.join(" "));
    }
}
