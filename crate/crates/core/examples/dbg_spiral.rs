use racestack::geometry::fit_g2_spiral;
use racestack::presets::{cautious_ggv, oval_track};
use racestack::raceline::{min_curvature_path, profile_raceline};

fn main() {
    let ggv = cautious_ggv();
    let track = oval_track();
    let path = min_curvature_path(&track, 0.3).unwrap();
    let line = profile_raceline(&path, &ggv).unwrap();

    for s0 in [0.0, 2.0, 3.5, 5.0] {
        let a = line.path.sample(s0);
        let b = line.path.sample(s0 + 1.3);
        println!(
            "s0={s0}: start rho={:.4} -> target rho={:.4}  raceline rho mid={:.4}",
            a.rho,
            b.rho,
            line.path.curvature_at(s0 + 0.65)
        );
        match fit_g2_spiral(a, b) {
            Ok(sp) => {
                print!("  spiral s_f={:.3} profile:", sp.s_f);
                for k in 0..=10 {
                    let d = sp.s_f * k as f64 / 10.0;
                    print!(" {:.3}", sp.curvature_at(d));
                }
                println!();
                print!("  raceline profile:      ");
                for k in 0..=10 {
                    let d = 1.3 * k as f64 / 10.0;
                    print!(" {:.3}", line.path.curvature_at(s0 + d));
                }
                println!();
            }
            Err(e) => println!("  fit error: {e}"),
        }
    }
}
