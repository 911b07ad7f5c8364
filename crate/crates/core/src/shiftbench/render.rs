//! Procedural 32x32 texture motifs and the pixel-level shift operators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SIDE: usize = 32;

/// One grayscale image, row-major.
pub(crate) struct Canvas {
    pub px: Vec<f64>,
}

impl Canvas {
    fn new(level: f64) -> Self {
        Canvas { px: vec![level; SIDE * SIDE] }
    }

    /// Paints `value * coverage` wherever it brightens the pixel; coverage is
    /// a soft inside-test evaluated at every pixel centre.
    fn paint_max(&mut self, value: f64, coverage: impl Fn(f64, f64) -> f64) {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let c = coverage(x as f64 + 0.5, y as f64 + 0.5);
                if c > 0.0 {
                    let p = &mut self.px[y * SIDE + x];
                    let v = *p + (value - *p) * c.min(1.0);
                    if v > *p {
                        *p = v;
                    }
                }
            }
        }
    }

    fn paint_min(&mut self, value: f64, coverage: impl Fn(f64, f64) -> f64) {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let c = coverage(x as f64 + 0.5, y as f64 + 0.5);
                if c > 0.0 {
                    let p = &mut self.px[y * SIDE + x];
                    let v = *p + (value - *p) * c.min(1.0);
                    if v < *p {
                        *p = v;
                    }
                }
            }
        }
    }

    fn add_noise(&mut self, rng: &mut ChaCha8Rng, sigma: f64) {
        if sigma <= 0.0 {
            return;
        }
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        for p in &mut self.px {
            *p += n.sample(rng);
        }
    }

    fn clamp(&mut self) {
        for p in &mut self.px {
            *p = p.clamp(0.0, 1.0);
        }
    }
}

/// Soft edge: 1 inside, 0 outside, linear ramp of one pixel across `d = 0`.
fn edge(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn background(rng: &mut ChaCha8Rng) -> Canvas {
    let level = rng.gen_range(0.12..0.28);
    let mut c = Canvas::new(level);
    // gentle illumination gradient
    let (gx, gy) = (rng.gen_range(-0.003..0.003), rng.gen_range(-0.003..0.003));
    for y in 0..SIDE {
        for x in 0..SIDE {
            c.px[y * SIDE + x] += gx * (x as f64 - 16.0) + gy * (y as f64 - 16.0);
        }
    }
    c
}

fn blobs(rng: &mut ChaCha8Rng, c: &mut Canvas) {
    for _ in 0..rng.gen_range(2..=3) {
        let (cx, cy) = (rng.gen_range(6.0..26.0), rng.gen_range(6.0..26.0));
        let r0 = rng.gen_range(4.0..6.5);
        let harmonics: Vec<(f64, f64, f64)> = (2..=4)
            .map(|k| (k as f64, rng.gen_range(0.1..0.28) * r0, rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        let v = rng.gen_range(0.7..0.85);
        c.paint_max(v, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            let th = dy.atan2(dx);
            let r = r0 + harmonics.iter().map(|(k, a, p)| a * (k * th + p).sin()).sum::<f64>();
            edge((dx * dx + dy * dy).sqrt() - r)
        });
    }
}

fn rods(rng: &mut ChaCha8Rng, c: &mut Canvas) {
    for _ in 0..rng.gen_range(3..=5) {
        let (cx, cy) = (rng.gen_range(4.0..28.0), rng.gen_range(4.0..28.0));
        let half = rng.gen_range(5.0..9.0);
        let hw = rng.gen_range(0.8..1.3);
        let th = rng.gen_range(0.0..std::f64::consts::PI);
        let (ux, uy) = (th.cos(), th.sin());
        let v = rng.gen_range(0.75..0.9);
        c.paint_max(v, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            let along = (dx * ux + dy * uy).abs() - half;
            let across = (-dx * uy + dy * ux).abs() - hw;
            edge(along.max(across))
        });
    }
}

fn plates(rng: &mut ChaCha8Rng, c: &mut Canvas) {
    for _ in 0..rng.gen_range(1..=2) {
        let (cx, cy) = (rng.gen_range(9.0..23.0), rng.gen_range(9.0..23.0));
        let apothem = rng.gen_range(5.5..8.5);
        let rot = rng.gen_range(0.0..std::f64::consts::FRAC_PI_3);
        let v = rng.gen_range(0.55..0.68);
        let inside = move |x: f64, y: f64| {
            let (dx, dy) = (x - cx, y - cy);
            (0..6)
                .map(|k| {
                    let a = rot + k as f64 * std::f64::consts::FRAC_PI_3;
                    dx * a.cos() + dy * a.sin() - apothem
                })
                .fold(f64::NEG_INFINITY, f64::max)
        };
        c.paint_max(v, |x, y| edge(inside(x, y)));
        // bright rim
        c.paint_max(v + 0.22, |x, y| {
            let d = inside(x, y);
            if d > -1.2 && d < 0.5 {
                0.8
            } else {
                0.0
            }
        });
    }
}

fn spheres(rng: &mut ChaCha8Rng, c: &mut Canvas) {
    for _ in 0..rng.gen_range(6..=10) {
        let (cx, cy) = (rng.gen_range(3.0..29.0), rng.gen_range(3.0..29.0));
        let r = rng.gen_range(1.6..2.8);
        let v = rng.gen_range(0.8..0.95);
        c.paint_max(v, |x, y| {
            let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (r * r);
            if d2 < 1.0 {
                (1.0 - d2).sqrt()
            } else {
                0.0
            }
        });
    }
}

fn cracks(rng: &mut ChaCha8Rng, c: &mut Canvas) {
    let surface = rng.gen_range(0.55..0.68);
    c.px.iter_mut().for_each(|p| *p = p.max(surface));
    for _ in 0..rng.gen_range(2..=3) {
        let (mut x, mut y) = (rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0));
        let mut th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let dark = rng.gen_range(0.08..0.2);
        for _ in 0..rng.gen_range(24..40) {
            th += rng.gen_range(-0.5..0.5);
            let (px, py) = (x, y);
            c.paint_min(dark, |qx, qy| edge(((qx - px).powi(2) + (qy - py).powi(2)).sqrt() - 0.8));
            x += th.cos();
            y += th.sin();
        }
    }
}

/// Draws one example of `class`. Classes beyond the five named motifs
/// reuse them with a distinct background texture period.
pub(crate) fn render(class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut c = background(rng);
    match class % 5 {
        0 => blobs(rng, &mut c),
        1 => rods(rng, &mut c),
        2 => plates(rng, &mut c),
        3 => spheres(rng, &mut c),
        _ => cracks(rng, &mut c),
    }
    let variant = class / 5;
    if variant > 0 {
        let period = 2.0 + variant as f64;
        for y in 0..SIDE {
            for x in 0..SIDE {
                c.px[y * SIDE + x] += 0.06 * ((x + y) as f64 * std::f64::consts::TAU / period).sin();
            }
        }
    }
    c.add_noise(rng, 0.02);
    c.clamp();
    c.px
}

/// Progressive roughening and erosion of magnitude `g` in `[0, 1]`.
///
/// Bright motif pixels are pitted and surfaces gain grain. The visible
/// strength is `g^0.3`, so the earliest aging already changes the surface.
/// Random draws do not depend on `g`: for a fixed seed, a larger magnitude
/// deepens the same pits and grain rather than drawing new ones.
pub(crate) fn age(px: &mut [f64], g: f64, rng: &mut ChaCha8Rng) {
    if g <= 0.0 {
        return;
    }
    let s = g.powf(0.3);
    let mut sorted = px.to_vec();
    sorted.sort_by(f64::total_cmp);
    let floor = sorted[sorted.len() / 5];
    let grain = Normal::new(0.0, 1.0).expect("unit normal");
    for p in px.iter_mut() {
        let (u, depth) = (rng.gen::<f64>(), rng.gen_range(0.3..0.9));
        let contrast = *p - floor;
        if contrast > 0.05 && u < 0.8 * s {
            *p -= contrast * depth * s;
        }
        *p = (*p + 0.14 * s * grain.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Fixed style change of a different operator: brighter, higher contrast.
pub(crate) fn restyle(px: &mut [f64]) {
    for p in px {
        *p = ((*p - 0.5) * 1.3 + 0.62).clamp(0.0, 1.0);
    }
}

/// Separable box blur with clamped borders.
pub(crate) fn box_blur(px: &mut [f64], radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let n = SIDE as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; px.len()];
    for y in 0..n {
        for x in 0..n {
            let s: f64 = (-r..=r).map(|d| px[(y * n + (x + d).clamp(0, n - 1)) as usize]).sum();
            tmp[(y * n + x) as usize] = s * norm;
        }
    }
    for y in 0..n {
        for x in 0..n {
            let s: f64 = (-r..=r).map(|d| tmp[((y + d).clamp(0, n - 1) * n + x) as usize]).sum();
            px[(y * n + x) as usize] = s * norm;
        }
    }
}
