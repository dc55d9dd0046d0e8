//! Parametric neutral face template and its class-conditional animation.
//! Coordinates are image-style (y grows downward), centered near the
//! origin, with inter-ocular distance 0.8. A subject's latents drive
//! blink events (vertical eye closure), rigid head sway and mouth jitter;
//! the same trajectory feeds both the landmark frames and the rasterized
//! clip, so the modalities stay correlated.

use rand::Rng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::data::SubjectLatents;
use crate::graph::{LandmarkFrame, LANDMARK_COUNT};
use crate::visual::Clip;

const RIGHT_EYE_CENTER: [f64; 2] = [-0.4, -0.38];
const LEFT_EYE_CENTER: [f64; 2] = [0.4, -0.38];
/// Template inter-ocular distance; sway/jitter latents scale by it.
pub const INTER_OCULAR: f64 = 0.8;

/// The 68-point neutral face.
pub fn base_face() -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    // jaw 0-16: lower face ellipse arc
    for i in 0..17 {
        let t = i as f64 / 16.0;
        let ang = std::f64::consts::PI * t;
        pts.push([-0.9 * ang.cos(), 0.72 * ang.sin() - 0.08]);
    }
    // brows 17-21 and 22-26: gentle arcs above the eyes
    for i in 0..5 {
        let t = i as f64 / 4.0;
        pts.push([-0.66 + 0.4 * t, -0.58 - 0.06 * (std::f64::consts::PI * t).sin()]);
    }
    for i in 0..5 {
        let t = i as f64 / 4.0;
        pts.push([0.26 + 0.4 * t, -0.64 - 0.06 * (std::f64::consts::PI * t).sin()]);
    }
    // nose bridge 27-30
    for i in 0..4 {
        pts.push([0.0, -0.45 + 0.13 * i as f64]);
    }
    // nose base 31-35
    for i in 0..5 {
        let t = i as f64 / 4.0;
        pts.push([-0.16 + 0.32 * t, 0.05 + 0.03 * (std::f64::consts::PI * t).sin()]);
    }
    // eyes 36-41 / 42-47: corner, two top lid points, corner, two bottom
    let eye = |cx: f64, cy: f64, flip: f64| -> Vec<[f64; 2]> {
        vec![
            [cx - 0.15 * flip, cy],
            [cx - 0.07 * flip, cy - 0.09],
            [cx + 0.07 * flip, cy - 0.09],
            [cx + 0.15 * flip, cy],
            [cx + 0.07 * flip, cy + 0.09],
            [cx - 0.07 * flip, cy + 0.09],
        ]
    };
    pts.extend(eye(RIGHT_EYE_CENTER[0], RIGHT_EYE_CENTER[1], 1.0));
    pts.extend(eye(LEFT_EYE_CENTER[0], LEFT_EYE_CENTER[1], 1.0));
    // outer lip 48-59: ellipse, corner-first going over the top
    for i in 0..12 {
        let ang = std::f64::consts::PI - 2.0 * std::f64::consts::PI * i as f64 / 12.0;
        pts.push([0.28 * ang.cos(), 0.38 - 0.12 * ang.sin()]);
    }
    // inner lip 60-67
    for i in 0..8 {
        let ang = std::f64::consts::PI - 2.0 * std::f64::consts::PI * i as f64 / 8.0;
        pts.push([0.22 * ang.cos(), 0.38 - 0.05 * ang.sin()]);
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}

/// Rasterization channel per landmark: 0 = eyes and brows, 1 = mouth,
/// 2 = jaw and nose.
pub fn region_channel(node: usize) -> usize {
    match node {
        17..=47 => 0,
        48..=67 => 1,
        _ => 2,
    }
}

/// Blink schedule: onset/duration pairs covering one shot.
fn schedule_blinks(
    latents: &SubjectLatents,
    shot_seconds: f64,
    rng: &mut Xoshiro256PlusPlus,
) -> Vec<(f64, f64)> {
    let mut events = Vec::new();
    let mut onset = rng.gen_range(0.05..(0.3f64).min(latents.blink_interval_s));
    while onset < shot_seconds {
        let duration = latents.blink_duration_s * rng.gen_range(0.85..1.15);
        events.push((onset, duration));
        onset += latents.blink_interval_s * rng.gen_range(0.8..1.2);
    }
    events
}

/// Triangular closure profile: 0 open, 1 fully closed at mid-blink.
fn closure_at(t: f64, events: &[(f64, f64)]) -> f64 {
    let mut c: f64 = 0.0;
    for &(onset, duration) in events {
        if t >= onset && t <= onset + duration {
            let p = (t - onset) / duration;
            c = c.max(1.0 - (2.0 * p - 1.0).abs());
        }
    }
    c
}

/// One shot's animated landmark trajectory plus the per-frame eye closure
/// used to drive it (exposed so tests can compare in-blink and open-eye
/// geometry).
pub struct AnimatedShot {
    pub frames: Vec<LandmarkFrame>,
    pub closures: Vec<f64>,
}

/// Animates `frame_count` frames at `fps` from per-subject latents and a
/// per-shot RNG.
pub fn animate_shot(
    latents: &SubjectLatents,
    frame_count: usize,
    fps: f64,
    rng: &mut Xoshiro256PlusPlus,
) -> AnimatedShot {
    let base = base_face();
    let shot_seconds = frame_count as f64 / fps;
    let events = schedule_blinks(latents, shot_seconds, rng);
    // oscillation fast enough to near-cancel in the shot mean, so the
    // per-frame motion cue does not swamp the eye-closure cue
    let sway_freq = rng.gen_range(1.2..2.4);
    let sway_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let drift_freq = rng.gen_range(0.9..1.6);
    let drift_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut frames = Vec::with_capacity(frame_count);
    let mut closures = Vec::with_capacity(frame_count);
    for fi in 0..frame_count {
        let t = fi as f64 / fps;
        let closure = closure_at(t, &events);
        let mut pts = base.clone();
        // blink: lid points move toward the eye's vertical center
        for (range, cy) in [(36..=41, RIGHT_EYE_CENTER[1]), (42..=47, LEFT_EYE_CENTER[1])] {
            for i in range {
                pts[i][1] = cy + (pts[i][1] - cy) * (1.0 - 0.95 * closure);
            }
        }
        // mouth jitter: per-frame noise on lip points
        let jitter = latents.mouth_jitter * INTER_OCULAR;
        for p in pts.iter_mut().take(68).skip(48) {
            p[0] += rng.gen_range(-1.0..1.0) * jitter;
            p[1] += rng.gen_range(-1.0..1.0) * jitter;
        }
        // head sway: rigid rotation about the centroid plus slow drift
        let theta = latents.sway_amplitude * (std::f64::consts::TAU * sway_freq * t + sway_phase).sin();
        let drift = latents.sway_amplitude
            * INTER_OCULAR
            * 0.3
            * (std::f64::consts::TAU * drift_freq * t + drift_phase).sin();
        let (sin_t, cos_t) = theta.sin_cos();
        let c = centroid(&pts);
        for p in pts.iter_mut() {
            let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
            p[0] = c[0] + dx * cos_t - dy * sin_t + drift;
            p[1] = c[1] + dx * sin_t + dy * cos_t + drift * 0.4;
        }
        frames.push(LandmarkFrame::new(pts).expect("animated frame is well formed"));
        closures.push(closure);
    }
    AnimatedShot { frames, closures }
}

fn centroid(pts: &[[f64; 2]]) -> [f64; 2] {
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    [sx / n, sy / n]
}

/// Renders the landmark trajectory into a clip: `t_out` frames sampled
/// uniformly, landmarks splatted as small gaussian discs on a dark
/// background, one channel per region group, values clamped to [0, 1].
pub fn rasterize_clip(
    shot_id: &str,
    frames: &[LandmarkFrame],
    dims: [usize; 4],
) -> Clip {
    let [c, t_out, h, w] = dims;
    debug_assert_eq!(c, 3);
    let mut voxels = vec![0.0f64; c * t_out * h * w];
    let plane = h * w;
    let sigma = 0.7f64 * (w as f64 / 32.0);
    let radius = (2.0 * sigma).ceil() as isize;
    for ti in 0..t_out {
        // uniform temporal sampling of the source frames
        let src = if t_out == 1 {
            frames.len() / 2
        } else {
            (ti * (frames.len() - 1) + (t_out - 1) / 2) / (t_out - 1)
        };
        let frame = &frames[src.min(frames.len() - 1)];
        for (node, p) in frame.coords.iter().enumerate() {
            let ch = region_channel(node);
            // map [-1.2, 1.2] onto the pixel grid
            let px = (p[0] + 1.2) / 2.4 * (w as f64 - 1.0);
            let py = (p[1] + 1.2) / 2.4 * (h as f64 - 1.0);
            let (cx, cy) = (px.round() as isize, py.round() as isize);
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (x, y) = (cx + dx, cy + dy);
                    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        continue;
                    }
                    let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                    let v = (-d2 / (2.0 * sigma * sigma)).exp();
                    let idx = ch * t_out * plane + ti * plane + y as usize * w + x as usize;
                    voxels[idx] = (voxels[idx] + v).min(1.0);
                }
            }
        }
    }
    Clip::new(shot_id.to_string(), dims, voxels).expect("rasterized clip is in range")
}
