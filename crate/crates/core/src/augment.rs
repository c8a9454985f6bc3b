//! Stochastic image augmentation.
//!
//! One of three pipelines is chosen per sample: A (blur, sharpness), B
//! (brightness, contrast, saturation, sharpness, hue) or C (both). Masking
//! and rotation follow whichever pipeline ran. All randomness comes from a
//! [`SampleRng`] keyed by `(seed, sample, epoch)`, and every draw is made in
//! a fixed order whether or not the step is enabled, so switching one
//! technique off never changes what the others do.

use image::{Rgb, RgbImage};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    A,
    B,
    C,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Full,
    NoMasking,
    NoRotation,
    NoColor,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "no-masking" => Ok(Preset::NoMasking),
            "no-rotation" => Ok(Preset::NoRotation),
            "no-color" => Ok(Preset::NoColor),
            _ => Err(Error::Config {
                section: "augment".into(),
                key: "preset".into(),
                message: format!("unknown preset {s:?} (full, no-masking, no-rotation, no-color)"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probabilities of pipelines A, B and C.
    pub pipeline_probabilities: [f64; 3],
    pub rotation_range_deg: [f64; 2],
    pub enable_masking: bool,
    pub enable_rotation: bool,
    pub enable_color: bool,
    /// Gaussian blur standard deviation in pixels.
    pub blur_radius: [f64; 2],
    pub sharpness: [f64; 2],
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    /// Hue rotation in turns.
    pub hue: [f64; 2],
    pub mask_count: [usize; 2],
    pub mask_area_fraction: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pipeline_probabilities: [1.0 / 3.0; 3],
            rotation_range_deg: [-10.0, 10.0],
            enable_masking: true,
            enable_rotation: true,
            enable_color: true,
            blur_radius: [0.0, 2.5],
            sharpness: [0.0, 2.0],
            brightness: [0.6, 1.4],
            contrast: [0.6, 1.4],
            saturation: [0.6, 1.4],
            hue: [-0.1, 0.1],
            mask_count: [1, 3],
            mask_area_fraction: [0.02, 0.10],
        }
    }
}

impl AugmentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = Self::default();
        cfg.apply_preset(preset);
        cfg
    }

    /// Turns off the technique a preset ablates; `Full` enables all three.
    pub fn apply_preset(&mut self, preset: Preset) {
        self.enable_masking = preset != Preset::NoMasking;
        self.enable_rotation = preset != Preset::NoRotation;
        self.enable_color = preset != Preset::NoColor;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Config {
            section: "augment".into(),
            key: key.into(),
            message,
        };
        let p = self.pipeline_probabilities;
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(bad("pipeline_probabilities", format!("must be non-negative and sum to 1, got {p:?}")));
        }
        let ranges = [
            ("rotation_range_deg", self.rotation_range_deg),
            ("blur_radius", self.blur_radius),
            ("sharpness", self.sharpness),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
            ("mask_area_fraction", self.mask_area_fraction),
        ];
        for (key, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(bad(key, format!("range [{lo}, {hi}] is not ordered")));
            }
        }
        if self.blur_radius[0] < 0.0 || self.sharpness[0] < 0.0 || self.brightness[0] < 0.0 {
            return Err(bad("blur_radius", "intensities must be non-negative".into()));
        }
        if self.mask_count[0] > self.mask_count[1] {
            return Err(bad("mask_count", format!("range {:?} is not ordered", self.mask_count)));
        }
        if self.mask_area_fraction[0] < 0.0 || self.mask_area_fraction[1] > 1.0 {
            return Err(bad("mask_area_fraction", "must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Deterministic random stream for one sample in one epoch.
pub struct SampleRng(ChaCha8Rng);

impl SampleRng {
    pub fn new(seed: u64, sample: u64, epoch: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"lemma-htr/augment");
        for v in [seed, sample, epoch] {
            h.update(v.to_le_bytes());
        }
        Self(ChaCha8Rng::from_seed(h.finalize().into()))
    }

    fn uniform(&mut self, [lo, hi]: [f64; 2]) -> f64 {
        // always consume one draw, even for degenerate ranges
        let u: f64 = self.0.gen();
        lo + (hi - lo) * u
    }
}

impl RngCore for SampleRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

pub fn choose_pipeline(rng: &mut SampleRng, cfg: &AugmentConfig) -> Pipeline {
    let u: f64 = rng.0.gen();
    let [a, b, _] = cfg.pipeline_probabilities;
    if u < a {
        Pipeline::A
    } else if u < a + b {
        Pipeline::B
    } else {
        Pipeline::C
    }
}

/// One blackened rectangle, in relative units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDraw {
    pub area_fraction: f64,
    /// Width / height, log-uniform in `[1/3, 3]`.
    pub aspect: f64,
    /// Top-left corner as a fraction of the free range.
    pub fx: f64,
    pub fy: f64,
}

/// Every random quantity one augmentation can use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraws {
    pub pipeline: Pipeline,
    pub blur_radius: f64,
    pub sharpness: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub mask_count: usize,
    /// Always `mask_count` upper bound many; only the first `mask_count`
    /// are applied.
    pub masks: Vec<MaskDraw>,
    pub angle_deg: f64,
}

impl AugmentDraws {
    /// Draws in a fixed order that does not depend on the toggles.
    pub fn draw(rng: &mut SampleRng, cfg: &AugmentConfig) -> Self {
        let pipeline = choose_pipeline(rng, cfg);
        let blur_radius = rng.uniform(cfg.blur_radius);
        let sharpness = rng.uniform(cfg.sharpness);
        let brightness = rng.uniform(cfg.brightness);
        let contrast = rng.uniform(cfg.contrast);
        let saturation = rng.uniform(cfg.saturation);
        let hue = rng.uniform(cfg.hue);
        let [lo, hi] = cfg.mask_count;
        let span = (hi - lo + 1) as f64;
        let mask_count = lo + ((rng.uniform([0.0, 1.0]) * span) as usize).min(hi - lo);
        let masks = (0..hi)
            .map(|_| MaskDraw {
                area_fraction: rng.uniform(cfg.mask_area_fraction),
                aspect: rng.uniform([-(3f64.ln()), 3f64.ln()]).exp(),
                fx: rng.uniform([0.0, 1.0]),
                fy: rng.uniform([0.0, 1.0]),
            })
            .collect();
        let angle_deg = rng.uniform(cfg.rotation_range_deg);
        Self {
            pipeline,
            blur_radius,
            sharpness,
            brightness,
            contrast,
            saturation,
            hue,
            mask_count,
            masks,
            angle_deg,
        }
    }

    /// Draws under which every step is the identity.
    pub fn identity(pipeline: Pipeline) -> Self {
        Self {
            pipeline,
            blur_radius: 0.0,
            sharpness: 1.0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            mask_count: 0,
            masks: Vec::new(),
            angle_deg: 0.0,
        }
    }

    /// The same draws with `preset`'s technique at its identity value.
    pub fn neutralized(&self, preset: Preset) -> Self {
        let mut d = self.clone();
        match preset {
            Preset::Full => {}
            Preset::NoMasking => d.mask_count = 0,
            Preset::NoRotation => d.angle_deg = 0.0,
            Preset::NoColor => {
                d.brightness = 1.0;
                d.contrast = 1.0;
                d.saturation = 1.0;
                d.hue = 0.0;
            }
        }
        d
    }
}

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(img: &RgbImage, f: impl Fn([f32; 3]) -> [f32; 3]) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let v = f(p.0.map(f32::from));
        *p = Rgb(v.map(to_u8));
    }
    out
}

/// `degenerate + factor·(image − degenerate)`, pixelwise.
fn blend(img: &RgbImage, degenerate: &RgbImage, factor: f64) -> RgbImage {
    let f = factor as f32;
    let mut out = img.clone();
    for (p, d) in out.pixels_mut().zip(degenerate.pixels()) {
        *p = Rgb(std::array::from_fn(|c| {
            let (x, y) = (p.0[c] as f32, d.0[c] as f32);
            to_u8(y + f * (x - y))
        }));
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let half = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur with standard deviation `radius`, kernel
/// truncated at 3σ, edges clamped. `radius == 0` is the identity.
pub fn gaussian_blur(img: &RgbImage, radius: f64) -> RgbImage {
    if radius <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(radius);
    let half = (k.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let src: Vec<[f32; 3]> = img.pixels().map(|p| p.0.map(f32::from)).collect();
    let mut tmp = vec![[0f32; 3]; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for (i, kv) in k.iter().enumerate() {
                let xx = (x + i as i64 - half).clamp(0, w - 1);
                let s = src[(y * w + xx) as usize];
                for c in 0..3 {
                    acc[c] += kv * s[c];
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for (i, kv) in k.iter().enumerate() {
                let yy = (y + i as i64 - half).clamp(0, h - 1);
                let s = tmp[(yy * w + x) as usize];
                for c in 0..3 {
                    acc[c] += kv * s[c];
                }
            }
            out.put_pixel(x as u32, y as u32, Rgb(acc.map(to_u8)));
        }
    }
    out
}

/// Blend towards a 3×3 smoothed copy (center weight 5, others 1); factor
/// 1 is the identity, 0 fully smoothed, above 1 sharpens. Border pixels
/// are left untouched.
pub fn adjust_sharpness(img: &RgbImage, factor: f64) -> RgbImage {
    if factor == 1.0 {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    let mut smooth = img.clone();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let mut acc = [0u32; 3];
            for dy in 0..3 {
                for dx in 0..3 {
                    let weight = if dx == 1 && dy == 1 { 5 } else { 1 };
                    let p = img.get_pixel(x + dx - 1, y + dy - 1);
                    for c in 0..3 {
                        acc[c] += weight * p.0[c] as u32;
                    }
                }
            }
            smooth.put_pixel(x, y, Rgb(acc.map(|v| ((v as f32) / 13.0).round() as u8)));
        }
    }
    blend(img, &smooth, factor)
}

pub fn adjust_brightness(img: &RgbImage, factor: f64) -> RgbImage {
    if factor == 1.0 {
        return img.clone();
    }
    let f = factor as f32;
    map_pixels(img, |p| p.map(|v| v * f))
}

fn luma(p: [f32; 3]) -> f32 {
    (p[0] * 299.0 + p[1] * 587.0 + p[2] * 114.0) / 1000.0
}

/// Blend towards the mean luma.
pub fn adjust_contrast(img: &RgbImage, factor: f64) -> RgbImage {
    if factor == 1.0 {
        return img.clone();
    }
    let n = (img.width() * img.height()).max(1) as f64;
    let mean = (img.pixels().map(|p| luma(p.0.map(f32::from)) as f64).sum::<f64>() / n).round() as f32;
    let f = factor as f32;
    map_pixels(img, |p| p.map(|v| mean + f * (v - mean)))
}

/// Blend towards the grayscale image.
pub fn adjust_saturation(img: &RgbImage, factor: f64) -> RgbImage {
    if factor == 1.0 {
        return img.clone();
    }
    let f = factor as f32;
    map_pixels(img, |p| {
        let g = luma(p);
        p.map(|v| g + f * (v - g))
    })
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotates hue by `shift` turns.
pub fn shift_hue(img: &RgbImage, shift: f64) -> RgbImage {
    if shift == 0.0 {
        return img.clone();
    }
    let s = shift as f32;
    map_pixels(img, |p| {
        let [h, sat, v] = rgb_to_hsv(p);
        hsv_to_rgb([h + s, sat, v])
    })
}

/// Pixel rectangle `(x0, y0, w, h)` covered by a mask draw.
pub fn mask_rect(m: &MaskDraw, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let area = m.area_fraction * width as f64 * height as f64;
    let mw = ((area * m.aspect).sqrt().round() as u32).clamp(1, width);
    let mh = ((area / mw as f64).round() as u32).clamp(1, height);
    let x0 = (m.fx * (width - mw) as f64).floor() as u32;
    let y0 = (m.fy * (height - mh) as f64).floor() as u32;
    (x0, y0, mw, mh)
}

/// Blackens the given rectangles; everything else is untouched.
pub fn random_mask(img: &RgbImage, masks: &[MaskDraw]) -> RgbImage {
    let mut out = img.clone();
    for m in masks {
        let (x0, y0, mw, mh) = mask_rect(m, img.width(), img.height());
        for y in y0..y0 + mh {
            for x in x0..x0 + mw {
                out.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
    }
    out
}

/// Counter-clockwise rotation about the image center with bilinear
/// sampling; uncovered area is white.
pub fn rotate(img: &RgbImage, angle_deg: f64) -> RgbImage {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let fetch = |x: i64, y: i64| -> [f64; 3] {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            [255.0; 3]
        } else {
            img.get_pixel(x as u32, y as u32).0.map(f64::from)
        }
    };
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            // inverse map; image y points down, so this turns content counter-clockwise
            let sx = cos * dx - sin * dy + cx - 0.5;
            let sy = sin * dx + cos * dy + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let (a, b, c, d) = (fetch(x0, y0), fetch(x0 + 1, y0), fetch(x0, y0 + 1), fetch(x0 + 1, y0 + 1));
            let px = std::array::from_fn(|i| {
                let top = a[i] + (b[i] - a[i]) * fx;
                let bottom = c[i] + (d[i] - c[i]) * fx;
                (top + (bottom - top) * fy).round().clamp(0.0, 255.0) as u8
            });
            out.put_pixel(x, y, Rgb(px));
        }
    }
    out
}

fn a_steps(img: RgbImage, d: &AugmentDraws) -> RgbImage {
    adjust_sharpness(&gaussian_blur(&img, d.blur_radius), d.sharpness)
}

fn b_steps(img: RgbImage, d: &AugmentDraws, cfg: &AugmentConfig, with_sharpness: bool) -> RgbImage {
    let mut img = img;
    if cfg.enable_color {
        img = adjust_brightness(&img, d.brightness);
        img = adjust_contrast(&img, d.contrast);
        img = adjust_saturation(&img, d.saturation);
    }
    if with_sharpness {
        img = adjust_sharpness(&img, d.sharpness);
    }
    if cfg.enable_color {
        img = shift_hue(&img, d.hue);
    }
    img
}

fn shared_steps(img: RgbImage, d: &AugmentDraws, cfg: &AugmentConfig) -> RgbImage {
    let mut img = img;
    if cfg.enable_masking {
        img = random_mask(&img, &d.masks[..d.mask_count.min(d.masks.len())]);
    }
    if cfg.enable_rotation {
        img = rotate(&img, d.angle_deg);
    }
    img
}

/// Blur then sharpness, then the shared steps.
pub fn apply_pipeline_a(img: &RgbImage, d: &AugmentDraws, cfg: &AugmentConfig) -> RgbImage {
    shared_steps(a_steps(img.clone(), d), d, cfg)
}

/// Brightness, contrast, saturation, sharpness, hue, then the shared steps.
pub fn apply_pipeline_b(img: &RgbImage, d: &AugmentDraws, cfg: &AugmentConfig) -> RgbImage {
    shared_steps(b_steps(img.clone(), d, cfg, true), d, cfg)
}

/// Pipeline A's steps then B's (sharpness applied once), then the shared
/// steps.
pub fn apply_pipeline_c(img: &RgbImage, d: &AugmentDraws, cfg: &AugmentConfig) -> RgbImage {
    shared_steps(b_steps(a_steps(img.clone(), d), d, cfg, false), d, cfg)
}

pub fn apply_with_draws(img: &RgbImage, d: &AugmentDraws, cfg: &AugmentConfig) -> RgbImage {
    match d.pipeline {
        Pipeline::A => apply_pipeline_a(img, d, cfg),
        Pipeline::B => apply_pipeline_b(img, d, cfg),
        Pipeline::C => apply_pipeline_c(img, d, cfg),
    }
}

/// Augments sample `sample` for epoch `epoch`.
pub fn augment(img: &RgbImage, cfg: &AugmentConfig, seed: u64, sample: u64, epoch: u64) -> RgbImage {
    let draws = AugmentDraws::draw(&mut SampleRng::new(seed, sample, epoch), cfg);
    apply_with_draws(img, &draws, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) * 3 % 256) as u8]))
    }

    fn quiet() -> AugmentConfig {
        AugmentConfig {
            enable_masking: false,
            enable_rotation: false,
            ..Default::default()
        }
    }

    #[test]
    fn identity_draws_change_nothing() {
        let img = gradient(40, 20);
        for p in [Pipeline::A, Pipeline::B, Pipeline::C] {
            assert_eq!(apply_with_draws(&img, &AugmentDraws::identity(p), &AugmentConfig::default()), img);
        }
    }

    #[test]
    fn degenerate_pipeline_distribution() {
        let cfg = AugmentConfig {
            pipeline_probabilities: [1.0, 0.0, 0.0],
            ..Default::default()
        };
        for s in 0..50 {
            assert_eq!(choose_pipeline(&mut SampleRng::new(1, s, 0), &cfg), Pipeline::A);
        }
        let a = AugmentDraws::draw(&mut SampleRng::new(9, 3, 2), &AugmentConfig::default());
        let b = AugmentDraws::draw(&mut SampleRng::new(9, 3, 2), &AugmentConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_brightness_is_black() {
        let img = gradient(8, 8);
        assert!(adjust_brightness(&img, 0.0).pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn dimensions_preserved() {
        let img = gradient(33, 17);
        for s in 0..20 {
            assert_eq!(augment(&img, &AugmentConfig::default(), 5, s, 1).dimensions(), (33, 17));
        }
    }

    #[test]
    fn blur_only_c_equals_a() {
        let img = gradient(30, 30);
        let mut d = AugmentDraws::identity(Pipeline::C);
        d.blur_radius = 1.3;
        let c = apply_with_draws(&img, &d, &quiet());
        d.pipeline = Pipeline::A;
        assert_eq!(c, apply_with_draws(&img, &d, &quiet()));
    }

    #[test]
    fn masks_are_black_and_local() {
        let img = RgbImage::from_pixel(50, 40, Rgb([200, 180, 160]));
        let cfg = AugmentConfig {
            mask_count: [0, 0],
            ..Default::default()
        };
        let d = AugmentDraws::draw(&mut SampleRng::new(0, 0, 0), &cfg);
        assert_eq!(random_mask(&img, &d.masks[..d.mask_count]), img);

        let m = MaskDraw {
            area_fraction: 0.05,
            aspect: 2.0,
            fx: 0.3,
            fy: 0.6,
        };
        let out = random_mask(&img, &[m]);
        let (x0, y0, w, h) = mask_rect(&m, 50, 40);
        for (x, y, p) in out.enumerate_pixels() {
            let inside = (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y);
            assert_eq!(p.0, if inside { [0, 0, 0] } else { [200, 180, 160] });
        }
    }

    #[test]
    fn hue_roundtrip() {
        let img = gradient(16, 16);
        let back = shift_hue(&shift_hue(&img, 0.07), -0.07);
        for (a, b) in img.pixels().zip(back.pixels()) {
            for c in 0..3 {
                assert!((a.0[c] as i32 - b.0[c] as i32).abs() <= 1, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn rotation_fills_white() {
        let img = RgbImage::from_pixel(20, 20, Rgb([0, 0, 0]));
        let r = rotate(&img, 10.0);
        assert_eq!(r.dimensions(), (20, 20));
        assert_eq!(r.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(r.get_pixel(10, 10).0, [0, 0, 0]);
    }

    #[test]
    fn validation() {
        let mut c = AugmentConfig::default();
        assert!(c.validate().is_ok());
        c.pipeline_probabilities = [0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
        let c = AugmentConfig {
            rotation_range_deg: [10.0, -10.0],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert_eq!("no-color".parse::<Preset>().unwrap(), Preset::NoColor);
        assert!("nope".parse::<Preset>().is_err());
    }
}
