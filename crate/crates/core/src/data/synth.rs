//! Procedural three-level image hierarchy.
//!
//! Coarse classes differ in base colour, mid classes in stripe frequency and
//! fine classes in the shape drawn on top. Every image also gets a random
//! shape offset, stripe phase and pixel noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::rng;

/// Base colours, one per coarse class (cycled beyond the list).
pub const PALETTE: [[u8; 3]; 4] = [[205, 165, 95], [45, 75, 150], [90, 170, 80], [160, 60, 140]];
/// Stripe periods in pixels, one per mid class within a coarse class.
pub const STRIPE_PERIODS: [f32; 4] = [16.0, 5.0, 8.0, 3.0];
pub const STRIPE_AMPLITUDE: f32 = 30.0;
pub const NOISE_STD: f32 = 10.0;
/// Shapes are drawn in the base colour scaled by this factor.
pub const INK_SHADE: f32 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Cross,
    Ring,
}

impl Shape {
    const ALL: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Cross, Shape::Ring];

    fn covers(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
            Shape::Cross => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub seed: u64,
    pub coarse: usize,
    pub mid_per_coarse: usize,
    pub fine_per_mid: usize,
    pub n_per_fine: usize,
    pub size: usize,
}

impl SynthSpec {
    pub fn new(seed: u64, n_per_fine: usize) -> Self {
        SynthSpec { seed, coarse: 2, mid_per_coarse: 2, fine_per_mid: 2, n_per_fine, size: 32 }
    }

    pub fn fine_classes(&self) -> usize {
        self.coarse * self.mid_per_coarse * self.fine_per_mid
    }
}

/// `(coarse, mid within coarse, fine within mid)` of a fine label.
pub fn hierarchy(spec: &SynthSpec, fine: usize) -> (usize, usize, usize) {
    let per_coarse = spec.mid_per_coarse * spec.fine_per_mid;
    (fine / per_coarse, (fine % per_coarse) / spec.fine_per_mid, fine % spec.fine_per_mid)
}

/// Images are ordered fine-class-major; labels are fine indices.
pub fn synth_hierarchical_dataset(spec: SynthSpec) -> Dataset {
    let s = spec.size.max(1);
    let n_fine = spec.fine_classes();
    let mut images = Vec::with_capacity(n_fine * spec.n_per_fine * s * s * 3);
    let mut labels = Vec::with_capacity(n_fine * spec.n_per_fine);
    let noise = Normal::new(0.0f32, NOISE_STD).expect("positive std");
    for fine in 0..n_fine {
        let (c, m, f) = hierarchy(&spec, fine);
        let base = PALETTE[c % PALETTE.len()];
        let period = STRIPE_PERIODS[m % STRIPE_PERIODS.len()];
        let shape = Shape::ALL[f % Shape::ALL.len()];
        let ink = base.map(|v| (v as f32 * INK_SHADE).round() as u8);
        for i in 0..spec.n_per_fine {
            let mut r = rng::stream(spec.seed, &[fine as u64, i as u64]);
            let phase: f32 = r.random_range(0.0..period);
            let sz = s as f32;
            let radius = sz * r.random_range(0.22..0.3);
            let cx = sz * 0.5 + r.random_range(-0.12..0.12) * sz;
            let cy = sz * 0.5 + r.random_range(-0.12..0.12) * sz;
            for y in 0..s {
                for x in 0..s {
                    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                    let stripe = if ((fx + phase) / period).floor() as i64 % 2 == 0 {
                        STRIPE_AMPLITUDE
                    } else {
                        -STRIPE_AMPLITUDE
                    };
                    let inside = shape.covers(fx - cx, fy - cy, radius);
                    for ch in 0..3 {
                        let v = if inside { ink[ch] as f32 } else { base[ch] as f32 + stripe };
                        let v = v + noise.sample(&mut r);
                        images.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            labels.push(fine as u32);
        }
    }
    Dataset::new(s, s, images, labels).expect("consistent sizes")
}
