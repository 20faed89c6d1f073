//! The procedural "real" image family.
//!
//! Each image is a band-limited Gaussian random field, optionally overlaid
//! with a softly masked high-frequency texture patch, plus a few
//! anti-aliased discs and rectangles. Frequency content is randomised per
//! image so the corpus mixes smooth and detailed regions.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::math;
use crate::rng::{self, SeededRng};
use crate::{GridShape, LatentGrid};

/// Knobs of the procedural family. Frequencies are in cycles per image side.
#[derive(Clone, Debug, PartialEq)]
pub struct RealFamily {
    /// Cosine components summed for the random field.
    pub field_components: usize,
    /// Range of the field's upper band edge.
    pub field_band: (f64, f64),
    /// Range of the field's standard deviation.
    pub field_std: (f64, f64),
    /// Probability of a high-frequency texture patch.
    pub texture_prob: f64,
    pub texture_freq: (f64, f64),
    pub texture_amp: (f64, f64),
    /// Inclusive range of the number of shapes.
    pub shapes: (usize, usize),
}

impl Default for RealFamily {
    fn default() -> Self {
        Self {
            field_components: 24,
            field_band: (1.5, 4.0),
            field_std: (0.2, 0.4),
            texture_prob: 0.6,
            texture_freq: (5.0, 8.0),
            texture_amp: (0.1, 0.25),
            shapes: (1, 3),
        }
    }
}

fn uniform(r: &mut SeededRng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        r.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Fraction of the pixel at signed distance `d` (negative inside) covered
/// by the shape, with a one-pixel linear ramp.
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

/// One image of the family from its own generator.
pub fn synth_image(r: &mut SeededRng, shape: GridShape, family: &RealFamily) -> LatentGrid {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let side = h.max(w) as f64;
    let mut plane = vec![0.0; h * w];

    // random field: random directions, radial frequency up to the band edge
    let band = uniform(r, family.field_band);
    let std = uniform(r, family.field_std);
    let k = family.field_components.max(1);
    let amp = std * math::sqrt(2.0 / k as f64);
    for _ in 0..k {
        let theta = r.random_range(0.0..PI);
        let f = band * math::sqrt(r.random_range(0.0..1.0));
        let (fx, fy) = (f * math::cos(theta) / side, f * math::sin(theta) / side);
        let phase = r.random_range(0.0..2.0 * PI);
        let a = amp * rng::normal(r).abs().max(0.25);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] += a * math::cos(2.0 * PI * (fx * x as f64 + fy * y as f64) + phase);
            }
        }
    }

    // high-frequency texture inside a soft circular window
    if r.random_range(0.0..1.0) < family.texture_prob {
        let freq = uniform(r, family.texture_freq) / side;
        let theta = r.random_range(0.0..PI);
        let a = uniform(r, family.texture_amp);
        let (cx, cy) = (r.random_range(0.2..0.8) * w as f64, r.random_range(0.2..0.8) * h as f64);
        let radius = r.random_range(0.15..0.3) * side;
        let phase = r.random_range(0.0..2.0 * PI);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let win = math::exp(-(dx * dx + dy * dy) / (2.0 * radius * radius));
                let arg = 2.0 * PI * freq * (math::cos(theta) * x as f64 + math::sin(theta) * y as f64) + phase;
                plane[y * w + x] += a * win * math::cos(arg);
            }
        }
    }

    // anti-aliased shapes painted over the background
    let n_shapes = r.random_range(family.shapes.0..=family.shapes.1.max(family.shapes.0));
    for _ in 0..n_shapes {
        let value = r.random_range(-0.8..0.8);
        let (cx, cy) = (r.random_range(0.1..0.9) * w as f64, r.random_range(0.1..0.9) * h as f64);
        let disc = r.random_range(0.0..1.0) < 0.5;
        let (sx, sy) = (r.random_range(0.06..0.2) * side, r.random_range(0.06..0.2) * side);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let d = if disc {
                    math::sqrt(dx * dx + dy * dy) - sx
                } else {
                    (dx.abs() - sx).max(dy.abs() - sy)
                };
                let cov = coverage(d);
                let p = &mut plane[y * w + x];
                *p = (1.0 - cov) * *p + cov * value;
            }
        }
    }

    // channels share the luminance plane with a small per-channel tint
    let tints: Vec<f64> = (0..c)
        .map(|i| if i == 0 { 0.0 } else { r.random_range(-0.1..0.1) })
        .collect();
    let mut values = Vec::with_capacity(h * w * c);
    for p in &plane {
        for t in &tints {
            values.push((p + t).clamp(-1.0, 1.0));
        }
    }
    LatentGrid::new(shape, values).expect("finite by construction")
}

/// `count` images; image `i` depends only on `(seed, i)`.
pub fn synth_real(count: usize, seed: u64, shape: GridShape, family: &RealFamily) -> Vec<LatentGrid> {
    (0..count)
        .map(|i| {
            let mut r = rng::seeded(rng::derive_index(seed, i as u64));
            synth_image(&mut r, shape, family)
        })
        .collect()
}
