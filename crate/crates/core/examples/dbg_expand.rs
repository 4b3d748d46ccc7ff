use racestack::control::ControllerKind;
use racestack::harness::{expand_ggv, FeasibilityBounds};
use racestack::presets::{cautious_ggv, club_track, oval_track};
use racestack::raceline::{min_curvature_path, profile_raceline};
use racestack::sim::{run_closed_loop, PlantConfig, StackConfig};

fn main() {
    let base = cautious_ggv();
    let plant = PlantConfig::default();
    for (tname, track) in [("oval", oval_track()), ("club", club_track())] {
        for margin in [0.35, 0.4] {
            println!("{tname} margin {margin}");
            let path = min_curvature_path(&track, margin).unwrap();
            for (name, ctrl, replan) in [
                ("pp lookup", ControllerKind::PurePursuit, false),
                ("pp fbga", ControllerKind::PurePursuit, true),
                ("cl lookup", ControllerKind::Clothoid, false),
                ("cl fbga", ControllerKind::Clothoid, true),
            ] {
                let mut stack = StackConfig::new(ctrl, base.clone());
                stack.online_replan = replan;
                let (ggv, log) = expand_ggv(
                    &base,
                    &track,
                    &path,
                    &stack,
                    &plant,
                    0.05,
                    FeasibilityBounds::default(),
                    2,
                    0,
                    40,
                )
                .unwrap();
                let back = log.iter().rev().find(|s| s.feasible).unwrap().factor;
                stack.ggv = ggv.clone();
                let line = profile_raceline(&path, &ggv).unwrap();
                let tr = run_closed_loop(&line, &track, &stack, &plant, 2, 0).unwrap();
                let lap = tr.lap_times.last().copied().unwrap_or(f64::NAN);
                println!(
                    "  {name}: factor {:.4}  ay {:.3}  lap {:.3}  last '{}'",
                    back,
                    ggv.ay_max_at(0.0),
                    lap,
                    log.last().unwrap().reason,
                );
            }
        }
    }
}
