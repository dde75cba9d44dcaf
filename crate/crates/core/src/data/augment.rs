//! Weak and strong augmentation chains.
//!
//! Both start with a random resized crop sampled in continuous source
//! coordinates and bilinearly resampled to the output size. Pixel values
//! stay on the `[0, 1]` scale until the final per-channel normalization.
//!
//! Weak chain, in order: crop, horizontal flip, colour jitter (brightness,
//! contrast, saturation, hue in random order), grayscale, Gaussian blur.
//!
//! Strong chain: one coin with probability [`AugmentPolicy::auto_augment_p`]
//! selects crop, flip and one auto-augment sub-policy. Otherwise the weak
//! chain runs on the same generator.
//!
//! | sub-policy | first op (p, magnitude) | second op (p, magnitude) |
//! |---|---|---|
//! | 0 | posterize (0.4, 8) | rotate (0.6, 9) |
//! | 1 | solarize (0.6, 5) | contrast (0.6, 5) |
//! | 2 | brightness (0.8, 6) | sharpness (0.6, 7) |
//! | 3 | shear (0.6, 6) | translate (0.4, 5) |
//! | 4 | rotate (0.8, 8) | solarize (0.4, 3) |
//! | 5 | contrast (0.8, 8) | posterize (0.6, 6) |
//! | 6 | sharpness (0.8, 9) | shear (0.4, 4) |
//! | 7 | translate (0.6, 7) | brightness (0.6, 4) |
//!
//! Magnitudes run from 0 to 10 and map to: rotate up to 30°, posterize down
//! to 4 bits, solarize threshold `1 − m/10`, contrast/brightness/sharpness
//! factor `1 ± 0.09·m`, shear `± 0.03·m`, translate `± 0.045·m·S` pixels.
//! Geometric ops fill uncovered pixels with black.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageRef, Normalization};
use crate::tensor::Tensor;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub flip_p: f32,
    pub jitter_p: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub grayscale_p: f32,
    pub blur_p: f32,
    pub blur_sigma: (f32, f32),
    pub auto_augment_p: f32,
}

impl AugmentPolicy {
    pub fn weak() -> Self {
        AugmentPolicy {
            kind: AugmentKind::Weak,
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 1.0),
            auto_augment_p: 0.0,
        }
    }

    pub fn strong() -> Self {
        AugmentPolicy { kind: AugmentKind::Strong, auto_augment_p: 0.5, ..Self::weak() }
    }

    /// Crop and resize only.
    pub fn identity() -> Self {
        AugmentPolicy {
            kind: AugmentKind::Weak,
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            ..Self::weak()
        }
    }
}

/// Working image: `s × s × 3` floats on the `[0, 1]` scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub size: usize,
    pub px: Vec<f32>,
}

/// Source rectangle of a crop in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl CropBox {
    pub fn area_fraction(&self, height: usize, width: usize) -> f32 {
        self.w * self.h / (height * width) as f32
    }
}

/// Random area fraction in `scale` and log-uniform aspect ratio in
/// `[3/4, 4/3]`; after ten misses, the largest centred box that fits.
pub fn sample_crop(rng: &mut ChaCha8Rng, height: usize, width: usize, scale: (f32, f32)) -> CropBox {
    let (h, w) = (height as f32, width as f32);
    let area = h * w;
    let (lr0, lr1) = ((3.0f32 / 4.0).ln(), (4.0f32 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w && ch <= h {
            let x = rng.random_range(0.0..=(w - cw));
            let y = rng.random_range(0.0..=(h - ch));
            return CropBox { x, y, w: cw, h: ch };
        }
    }
    // fallback: centred square at the clamped target area
    let side = (area * scale.1).sqrt().min(w).min(h);
    CropBox { x: (w - side) / 2.0, y: (h - side) / 2.0, w: side, h: side }
}

/// Bilinear resample of `crop` to `size × size` (half-pixel centres).
pub fn resample(img: ImageRef<'_>, crop: CropBox, size: usize) -> Canvas {
    let mut px = Vec::with_capacity(size * size * 3);
    let sample = |x: f32, y: f32, c: usize| -> f32 {
        let x = x.clamp(0.0, (img.width - 1) as f32);
        let y = y.clamp(0.0, (img.height - 1) as f32);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
        let (fx, fy) = (x - x0 as f32, y - y0 as f32);
        let at = |xx: usize, yy: usize| img.pixels[(yy * img.width + xx) * 3 + c] as f32 / 255.0;
        let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
        let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    for i in 0..size {
        let sy = crop.y + (i as f32 + 0.5) * crop.h / size as f32 - 0.5;
        for j in 0..size {
            let sx = crop.x + (j as f32 + 0.5) * crop.w / size as f32 - 0.5;
            for c in 0..3 {
                px.push(sample(sx, sy, c));
            }
        }
    }
    Canvas { size, px }
}

impl Canvas {
    fn map(&mut self, f: impl Fn(f32) -> f32) {
        self.px.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn flip_horizontal(&mut self) {
        let s = self.size;
        for y in 0..s {
            for x in 0..s / 2 {
                for c in 0..3 {
                    self.px.swap((y * s + x) * 3 + c, (y * s + s - 1 - x) * 3 + c);
                }
            }
        }
    }

    fn luma(&self) -> Vec<f32> {
        self.px.chunks(3).map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).collect()
    }

    pub fn grayscale(&mut self) {
        let l = self.luma();
        for (p, g) in self.px.chunks_mut(3).zip(l) {
            p.fill(g);
        }
    }

    fn blend(&mut self, other: &[f32], factor: f32) {
        for (v, o) in self.px.iter_mut().zip(other) {
            *v = (o + factor * (*v - o)).clamp(0.0, 1.0);
        }
    }

    pub fn adjust_brightness(&mut self, factor: f32) {
        self.map(|v| (v * factor).clamp(0.0, 1.0));
    }

    pub fn adjust_contrast(&mut self, factor: f32) {
        let mean = self.luma().iter().sum::<f32>() / (self.size * self.size) as f32;
        self.map(|v| (mean + factor * (v - mean)).clamp(0.0, 1.0));
    }

    pub fn adjust_saturation(&mut self, factor: f32) {
        let gray: Vec<f32> = self.luma().into_iter().flat_map(|g| [g, g, g]).collect();
        self.blend(&gray, factor);
    }

    /// Rotates hue by `shift` turns.
    pub fn adjust_hue(&mut self, shift: f32) {
        for p in self.px.chunks_mut(3) {
            let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
            let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
            p.copy_from_slice(&[r, g, b]);
        }
    }

    pub fn gaussian_blur(&mut self, sigma: f32) {
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f32 = kernel.iter().sum();
        let s = self.size as isize;
        let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
            let mut out = vec![0.0; src.len()];
            for y in 0..s {
                for x in 0..s {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for (k, w) in kernel.iter().enumerate() {
                            let o = k as isize - radius;
                            let (xx, yy) = if horizontal { ((x + o).clamp(0, s - 1), y) } else { (x, (y + o).clamp(0, s - 1)) };
                            acc += w * src[((yy * s + xx) * 3) as usize + c];
                        }
                        out[((y * s + x) * 3) as usize + c] = acc / norm;
                    }
                }
            }
            out
        };
        let h = pass(&self.px, true);
        self.px = pass(&h, false);
    }

    pub fn posterize(&mut self, bits: u32) {
        let levels = (1u32 << bits) as f32;
        let step = 256.0 / levels;
        self.map(|v| ((v * 255.0 / step).floor() * step) / 255.0);
    }

    pub fn solarize(&mut self, threshold: f32) {
        self.map(|v| if v >= threshold { 1.0 - v } else { v });
    }

    pub fn sharpen(&mut self, factor: f32) {
        let s = self.size;
        let mut smooth = self.px.clone();
        for y in 1..s.saturating_sub(1) {
            for x in 1..s - 1 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let w = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                            acc += w * self.px[((y + dy - 1) * s + x + dx - 1) * 3 + c];
                        }
                    }
                    smooth[(y * s + x) * 3 + c] = acc / 13.0;
                }
            }
        }
        self.blend(&smooth, factor);
    }

    /// Inverse-maps every output pixel through `f` (output → source
    /// coordinates, pixel centres) with bilinear sampling and black fill.
    fn warp(&mut self, f: impl Fn(f32, f32) -> (f32, f32)) {
        let s = self.size;
        let src = self.px.clone();
        let at = |x: isize, y: isize, c: usize| -> f32 {
            if x < 0 || y < 0 || x >= s as isize || y >= s as isize {
                0.0
            } else {
                src[(y as usize * s + x as usize) * 3 + c]
            }
        };
        for y in 0..s {
            for x in 0..s {
                let (sx, sy) = f(x as f32, y as f32);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                for c in 0..3 {
                    let top = at(x0, y0, c) * (1.0 - fx) + at(x0 + 1, y0, c) * fx;
                    let bot = at(x0, y0 + 1, c) * (1.0 - fx) + at(x0 + 1, y0 + 1, c) * fx;
                    self.px[(y * s + x) * 3 + c] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }

    pub fn rotate(&mut self, degrees: f32) {
        let c = (self.size as f32 - 1.0) / 2.0;
        let (sin, cos) = degrees.to_radians().sin_cos();
        self.warp(|x, y| {
            let (dx, dy) = (x - c, y - c);
            (c + cos * dx + sin * dy, c - sin * dx + cos * dy)
        });
    }

    pub fn shear_x(&mut self, amount: f32) {
        let c = (self.size as f32 - 1.0) / 2.0;
        self.warp(|x, y| (x + amount * (y - c), y));
    }

    pub fn translate(&mut self, dx: f32, dy: f32) {
        self.warp(|x, y| (x - dx, y - dy));
    }

    /// Per-channel `(v − mean) / std` into an `[s, s, 3]` tensor.
    pub fn normalize(&self, norm: &Normalization) -> Tensor {
        let data = self
            .px
            .chunks(3)
            .flat_map(|p| (0..3).map(move |c| (p[c] - norm.mean[c]) / norm.std[c]))
            .collect();
        Tensor::new([self.size, self.size, 3], data).expect("positive size")
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter(c: &mut Canvas, rng: &mut ChaCha8Rng, p: &AugmentPolicy) {
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let factor = |rng: &mut ChaCha8Rng, amount: f32| rng.random_range((1.0 - amount).max(0.0)..=1.0 + amount);
    for op in order {
        match op {
            0 if p.brightness > 0.0 => {
                let f = factor(rng, p.brightness);
                c.adjust_brightness(f)
            }
            1 if p.contrast > 0.0 => {
                let f = factor(rng, p.contrast);
                c.adjust_contrast(f)
            }
            2 if p.saturation > 0.0 => {
                let f = factor(rng, p.saturation);
                c.adjust_saturation(f)
            }
            3 if p.hue > 0.0 => {
                let h = rng.random_range(-p.hue..=p.hue);
                c.adjust_hue(h)
            }
            _ => {}
        }
    }
}

fn photometric(c: &mut Canvas, rng: &mut ChaCha8Rng, p: &AugmentPolicy) {
    if rng.random::<f32>() < p.jitter_p {
        color_jitter(c, rng, p);
    }
    if rng.random::<f32>() < p.grayscale_p {
        c.grayscale();
    }
    if rng.random::<f32>() < p.blur_p {
        let sigma = rng.random_range(p.blur_sigma.0..=p.blur_sigma.1);
        c.gaussian_blur(sigma);
    }
}

/// Random resized crop, flip and the weak photometric chain, unnormalized.
pub fn weak_canvas(
    img: ImageRef<'_>,
    rng: &mut ChaCha8Rng,
    out_size: usize,
    scale: (f32, f32),
    policy: &AugmentPolicy,
) -> (Canvas, CropBox) {
    let crop = sample_crop(rng, img.height, img.width, scale);
    let mut c = resample(img, crop, out_size);
    if rng.random::<f32>() < policy.flip_p {
        c.flip_horizontal();
    }
    photometric(&mut c, rng, policy);
    (c, crop)
}

pub fn weak_augment(
    img: ImageRef<'_>,
    rng: &mut ChaCha8Rng,
    out_size: usize,
    scale: (f32, f32),
    policy: &AugmentPolicy,
    norm: &Normalization,
) -> Tensor {
    weak_canvas(img, rng, out_size, scale, policy).0.normalize(norm)
}

#[derive(Clone, Copy, Debug)]
enum AutoOp {
    Rotate,
    Posterize,
    Solarize,
    Contrast,
    Brightness,
    Sharpness,
    Shear,
    Translate,
}

const SUB_POLICIES: [[(AutoOp, f32, f32); 2]; 8] = {
    use AutoOp::*;
    [
        [(Posterize, 0.4, 8.0), (Rotate, 0.6, 9.0)],
        [(Solarize, 0.6, 5.0), (Contrast, 0.6, 5.0)],
        [(Brightness, 0.8, 6.0), (Sharpness, 0.6, 7.0)],
        [(Shear, 0.6, 6.0), (Translate, 0.4, 5.0)],
        [(Rotate, 0.8, 8.0), (Solarize, 0.4, 3.0)],
        [(Contrast, 0.8, 8.0), (Posterize, 0.6, 6.0)],
        [(Sharpness, 0.8, 9.0), (Shear, 0.4, 4.0)],
        [(Translate, 0.6, 7.0), (Brightness, 0.6, 4.0)],
    ]
};

fn apply_auto(c: &mut Canvas, rng: &mut ChaCha8Rng, op: AutoOp, m: f32) {
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    match op {
        AutoOp::Rotate => c.rotate(sign * 3.0 * m),
        AutoOp::Posterize => c.posterize(8 - (m * 0.4) as u32),
        AutoOp::Solarize => c.solarize(1.0 - m / 10.0),
        AutoOp::Contrast => c.adjust_contrast(1.0 + sign * 0.09 * m),
        AutoOp::Brightness => c.adjust_brightness(1.0 + sign * 0.09 * m),
        AutoOp::Sharpness => c.sharpen(1.0 + sign * 0.09 * m),
        AutoOp::Shear => c.shear_x(sign * 0.03 * m),
        AutoOp::Translate => {
            let d = sign * 0.045 * m * c.size as f32;
            if rng.random::<bool>() {
                c.translate(d, 0.0)
            } else {
                c.translate(0.0, d)
            }
        }
    }
}

/// Whether the next strong draw on `rng` takes the auto-augment branch.
pub fn strong_branch(rng: &mut ChaCha8Rng, policy: &AugmentPolicy) -> bool {
    rng.random::<f32>() < policy.auto_augment_p
}

pub fn strong_canvas(
    img: ImageRef<'_>,
    rng: &mut ChaCha8Rng,
    out_size: usize,
    scale: (f32, f32),
    policy: &AugmentPolicy,
) -> (Canvas, CropBox, bool) {
    if !strong_branch(rng, policy) {
        let (c, crop) = weak_canvas(img, rng, out_size, scale, policy);
        return (c, crop, false);
    }
    let crop = sample_crop(rng, img.height, img.width, scale);
    let mut c = resample(img, crop, out_size);
    if rng.random::<f32>() < policy.flip_p {
        c.flip_horizontal();
    }
    let sub = SUB_POLICIES[rng.random_range(0..SUB_POLICIES.len())];
    for (op, p, m) in sub {
        if rng.random::<f32>() < p {
            apply_auto(&mut c, rng, op, m);
        }
    }
    (c, crop, true)
}

pub fn strong_augment(
    img: ImageRef<'_>,
    rng: &mut ChaCha8Rng,
    out_size: usize,
    scale: (f32, f32),
    policy: &AugmentPolicy,
    norm: &Normalization,
) -> Tensor {
    strong_canvas(img, rng, out_size, scale, policy).0.normalize(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> u8) -> Vec<u8> {
        let mut v = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    v.push(f(y, x, c));
                }
            }
        }
        v
    }

    const UNIT: Normalization = Normalization { mean: [0.0; 3], std: [1.0; 3] };

    #[test]
    fn shapes_are_fixed() {
        let px = image(32, 32, |y, x, c| (y * 8 + x + c * 50) as u8);
        let img = ImageRef { height: 32, width: 32, pixels: &px };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = weak_augment(img, &mut rng, 16, (0.05, 0.25), &AugmentPolicy::weak(), &UNIT);
            assert_eq!(w.shape(), &[16, 16, 3]);
            let s = strong_augment(img, &mut rng, 32, (0.25, 1.0), &AugmentPolicy::strong(), &UNIT);
            assert_eq!(s.shape(), &[32, 32, 3]);
            // everything stays on the pixel scale before normalization
            assert!(s.data().iter().chain(w.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn identity_policy_is_a_plain_resize() {
        let px = image(8, 8, |y, x, c| (y * 30 + x * 3 + c) as u8);
        let img = ImageRef { height: 8, width: 8, pixels: &px };
        let a = weak_augment(img, &mut ChaCha8Rng::seed_from_u64(1), 8, (1.0, 1.0), &AugmentPolicy::identity(), &UNIT);
        let b = weak_augment(img, &mut ChaCha8Rng::seed_from_u64(2), 8, (1.0, 1.0), &AugmentPolicy::identity(), &UNIT);
        assert_eq!(a, b);
        for (v, p) in a.data().iter().zip(&px) {
            assert!((v - *p as f32 / 255.0).abs() < 1e-5);
        }
    }

    #[test]
    fn grayscale_of_pure_red() {
        let px = image(4, 4, |_, _, c| if c == 0 { 255 } else { 0 });
        let img = ImageRef { height: 4, width: 4, pixels: &px };
        let mut c = resample(img, CropBox { x: 0.0, y: 0.0, w: 4.0, h: 4.0 }, 4);
        c.grayscale();
        for p in c.px.chunks(3) {
            assert!(p.iter().all(|&v| (v * 255.0 - 0.299 * 255.0).abs() < 1e-3));
        }
    }

    #[test]
    fn crops_stay_in_bounds_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (lo, hi) in [(0.25, 1.0), (0.05, 0.25)] {
            for _ in 0..500 {
                let b = sample_crop(&mut rng, 32, 32, (lo, hi));
                assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 32.0 + 1e-4 && b.y + b.h <= 32.0 + 1e-4);
                let a = b.area_fraction(32, 32);
                assert!(a >= lo - 1e-4 && a <= hi + 1e-4, "{a}");
            }
        }
    }

    #[test]
    fn strong_weak_branch_matches_weak_chain() {
        let px = image(32, 32, |y, x, c| ((y * 7 + x * 3 + c * 11) % 256) as u8);
        let img = ImageRef { height: 32, width: 32, pixels: &px };
        let policy = AugmentPolicy::strong();
        let mut checked = 0;
        for seed in 0..40 {
            let mut probe = ChaCha8Rng::seed_from_u64(seed);
            if strong_branch(&mut probe, &policy) {
                continue;
            }
            let strong = strong_augment(img, &mut ChaCha8Rng::seed_from_u64(seed), 32, (0.25, 1.0), &policy, &UNIT);
            let weak = weak_augment(img, &mut probe, 32, (0.25, 1.0), &policy, &UNIT);
            assert_eq!(strong, weak);
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn auto_augment_frequency() {
        let policy = AugmentPolicy::strong();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let hits = (0..10_000).filter(|_| strong_branch(&mut rng, &policy)).count();
        let f = hits as f64 / 10_000.0;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5f32, 0.9f32), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }
}
