//! Built-in tracks and acceleration envelopes used across tests, benches
//! and the CLI.

use crate::geometry::TrackDefinition;
use crate::ggv::GgvDiagram;

/// Conservative starting envelope: +/-1 m/s^2 longitudinal, 3 m/s^2
/// lateral, plain ellipse coupling, generous top speed so the cap only
/// binds on long straights.
pub fn cautious_ggv() -> GgvDiagram {
    GgvDiagram::constant(3.0, 1.0, 1.0, 5.0, 2.0).expect("valid preset")
}

/// Small stadium oval: two 3.5 m straights joined by 1.75 m-radius
/// semicircles, 0.9 m half-widths, ~18 m lap.
pub fn oval_track() -> TrackDefinition {
    let (straight, r, w): (f64, f64, f64) = (3.5, 1.75, 0.9);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let step = 0.1;

    let n_straight = (straight / step).round() as usize;
    let n_arc = (std::f64::consts::PI * r / step).round() as usize;

    // bottom straight, left to right
    for i in 0..n_straight {
        x.push(i as f64 * straight / n_straight as f64);
        y.push(0.0);
    }
    // right semicircle, bottom to top
    for i in 0..n_arc {
        let a = -std::f64::consts::FRAC_PI_2
            + std::f64::consts::PI * i as f64 / n_arc as f64;
        x.push(straight + r * a.cos());
        y.push(r + r * a.sin());
    }
    // top straight, right to left
    for i in 0..n_straight {
        x.push(straight - i as f64 * straight / n_straight as f64);
        y.push(2.0 * r);
    }
    // left semicircle, top to bottom
    for i in 0..n_arc {
        let a = std::f64::consts::FRAC_PI_2
            + std::f64::consts::PI * i as f64 / n_arc as f64;
        x.push(r * a.cos());
        y.push(r + r * a.sin());
    }

    let n = x.len();
    TrackDefinition::new(x, y, vec![w; n], vec![w; n], true)
        .expect("oval preset is well formed")
}

/// Four-corner club circuit: a 6 x 3 m rounded rectangle with 1.2 m
/// corner radii and 0.9 m half-widths. The long straights build speed
/// and the tight 90 degree corners put the stress on braking points
/// rather than steady cornering, which is what separates planner
/// configurations in the ablations.
pub fn club_track() -> TrackDefinition {
    let (lx, ly, r, w): (f64, f64, f64, f64) = (6.0, 3.0, 1.2, 0.9);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let step = 0.1;
    let pi = std::f64::consts::PI;

    let push_straight = |x: &mut Vec<f64>, y: &mut Vec<f64>, x0: f64, y0: f64, x1: f64, y1: f64| {
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        let n = (len / step).round() as usize;
        for i in 0..n {
            let f = i as f64 / n as f64;
            x.push(x0 + (x1 - x0) * f);
            y.push(y0 + (y1 - y0) * f);
        }
    };
    let push_arc = |x: &mut Vec<f64>, y: &mut Vec<f64>, cx: f64, cy: f64, a0: f64| {
        let n = ((pi / 2.0) * r / step).round() as usize;
        for i in 0..n {
            let a = a0 + (pi / 2.0) * i as f64 / n as f64;
            x.push(cx + r * a.cos());
            y.push(cy + r * a.sin());
        }
    };

    // counterclockwise from the bottom-left corner exit
    push_straight(&mut x, &mut y, r, 0.0, lx - r, 0.0);
    push_arc(&mut x, &mut y, lx - r, r, -pi / 2.0);
    push_straight(&mut x, &mut y, lx, r, lx, ly - r);
    push_arc(&mut x, &mut y, lx - r, ly - r, 0.0);
    push_straight(&mut x, &mut y, lx - r, ly, r, ly);
    push_arc(&mut x, &mut y, r, ly - r, pi / 2.0);
    push_straight(&mut x, &mut y, 0.0, ly - r, 0.0, r);
    push_arc(&mut x, &mut y, r, r, pi);

    let n = x.len();
    TrackDefinition::new(x, y, vec![w; n], vec![w; n], true)
        .expect("club preset is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::resample_track;

    #[test]
    fn oval_track_is_valid_and_sized() {
        let t = oval_track();
        let path = resample_track(&t, 0.05).unwrap();
        let expect = 2.0 * 3.5 + 2.0 * std::f64::consts::PI * 1.75;
        assert!((path.total_len - expect).abs() / expect < 0.01);
    }

    #[test]
    fn club_track_is_valid_and_sized() {
        let t = club_track();
        let path = resample_track(&t, 0.05).unwrap();
        let expect = 2.0 * (6.0 - 2.4) + 2.0 * (3.0 - 2.4) + 2.0 * std::f64::consts::PI * 1.2;
        assert!((path.total_len - expect).abs() / expect < 0.01, "{}", path.total_len);
    }
}
