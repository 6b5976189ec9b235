//! Track overlay rendering.
//!
//! Sampled tracks are drawn onto the chunk's first frame as polylines, one
//! hue per track, brightness fading from the oldest point to the newest so
//! the motion direction is visible in a single image.

use crate::datagen::Track;
use crate::simenv::Observation;

/// Bright base colors in [0, 1] RGB, distinct per track index.
const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.1, 0.1],
    [1.0, 1.0, 0.1],
    [0.1, 1.0, 1.0],
    [1.0, 0.1, 1.0],
    [0.4, 1.0, 0.1],
    [0.1, 0.5, 1.0],
    [1.0, 0.6, 0.1],
    [0.6, 0.1, 1.0],
];

const FADE_MIN: f64 = 0.45;

fn put(obs: &mut Observation, x: f64, y: f64, rgb: [f64; 3], fade: f64) {
    let xi = x.round() as isize;
    let yi = y.round() as isize;
    if xi < 0 || yi < 0 || xi >= obs.width as isize || yi >= obs.height as isize {
        return;
    }
    let px = obs.pixel_mut(yi as usize, xi as usize);
    for (p, &c) in px.iter_mut().zip(&rgb) {
        *p = (2.0 * c * fade - 1.0).clamp(-1.0, 1.0);
    }
}

fn draw_segment(obs: &mut Observation, a: [f64; 2], b: [f64; 2], rgb: [f64; 3], fade: f64) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(obs, a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, rgb, fade);
    }
}

/// Draw each track's points restricted to frames `[t0, t1)` onto `obs`.
/// Tracks with fewer than 2 frames inside the window are ignored.
pub fn overlay_tracks(obs: &mut Observation, tracks: &[&Track], t0: usize, t1: usize) {
    for (i, track) in tracks.iter().enumerate() {
        let rgb = PALETTE[i % PALETTE.len()];
        let s = track.start_frame;
        let e = s + track.points.len();
        let lo = t0.max(s);
        let hi = t1.min(e);
        if hi.saturating_sub(lo) < 2 {
            continue;
        }
        let span = (hi - lo - 1) as f64;
        for f in lo..hi - 1 {
            let a = track.points[f - s];
            let b = track.points[f + 1 - s];
            let fade = FADE_MIN + (1.0 - FADE_MIN) * ((f - lo) as f64 + 1.0) / span.max(1.0);
            draw_segment(obs, a, b, rgb, fade.min(1.0));
        }
    }
}
