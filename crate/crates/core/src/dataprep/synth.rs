//! Synthetic record cards: a lemma in the upper-left quarter, plus decoy
//! text (a small index mark near the lemma, a source reference on the
//! right, context lines at the bottom).

use std::collections::HashSet;
use std::path::PathBuf;

use font8x8::{UnicodeFonts, BASIC_FONTS, LATIN_FONTS};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BBox, Detection};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CardStyle {
    pub width: u32,
    pub height: u32,
    /// Degradation strength in `[0, 1]`: pixel noise, blur, faded ink,
    /// tilted baselines and stains. 0 renders clean cards.
    pub noise: f32,
    pub decoys: bool,
}

impl Default for CardStyle {
    fn default() -> Self {
        Self {
            width: 480,
            height: 320,
            noise: 0.0,
            decoys: true,
        }
    }
}

impl CardStyle {
    pub fn noisy() -> Self {
        Self {
            noise: 1.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCard {
    pub image: RgbImage,
    pub label: String,
    /// Tight box around the lemma ink.
    pub lemma_box: BBox,
    pub decoy_boxes: Vec<BBox>,
}

impl SyntheticCard {
    /// All boxes in a seed-dependent order, as a detector would report them.
    pub fn detection(&self, image_path: impl Into<PathBuf>, seed: u64) -> Detection {
        let mut boxes = self.decoy_boxes.clone();
        boxes.push(self.lemma_box);
        boxes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Detection {
            image_path: image_path.into(),
            boxes,
            label: self.label.clone(),
        }
    }
}

fn glyph(c: char) -> Result<[u8; 8]> {
    BASIC_FONTS.get(c).or_else(|| LATIN_FONTS.get(c)).ok_or(Error::Render(c))
}

/// Ink coverage in `[0, 1]` per pixel.
struct Canvas {
    w: u32,
    h: u32,
    ink: Vec<f32>,
}

struct Pen {
    scale: u32,
    /// Horizontal shift per glyph row, in pixels (italic slant).
    slant: f32,
    /// Extra stroke thickness in pixels.
    weight: u32,
    /// Baseline rise per pixel of advance.
    tilt: f32,
    jitter: f32,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self {
            w,
            h,
            ink: vec![0.0; (w * h) as usize],
        }
    }

    fn text_width(text: &str, pen: &Pen) -> u32 {
        text.chars().count() as u32 * 7 * pen.scale + 8 * pen.scale + pen.weight
    }

    /// Draws `text` with its top-left near `(x, y)` and returns the tight
    /// box of the ink it laid down, or `None` if nothing landed on canvas.
    fn draw(&mut self, text: &str, x: i64, y: i64, pen: &Pen, rng: &mut ChaCha8Rng) -> Result<Option<BBox>> {
        let glyphs = text.chars().map(glyph).collect::<Result<Vec<_>>>()?;
        let s = pen.scale as i64;
        let (mut bx0, mut by0, mut bx1, mut by1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        let mut cx = x;
        for g in glyphs {
            let dy = (rng.gen_range(-1.0..=1.0) * pen.jitter * s as f32).round() as i64
                - ((cx - x) as f32 * pen.tilt).round() as i64;
            for (r, bits) in g.iter().enumerate() {
                let shift = (pen.slant * (7 - r) as f32 * s as f32).round() as i64;
                for c in 0..8 {
                    if bits & (1 << c) == 0 {
                        continue;
                    }
                    let px = cx + c as i64 * s + shift;
                    let py = y + dy + r as i64 * s;
                    let span = s + pen.weight as i64;
                    for yy in py..py + span {
                        for xx in px..px + span {
                            if xx < 0 || yy < 0 || xx >= self.w as i64 || yy >= self.h as i64 {
                                continue;
                            }
                            self.ink[(yy * self.w as i64 + xx) as usize] = 1.0;
                            bx0 = bx0.min(xx);
                            by0 = by0.min(yy);
                            bx1 = bx1.max(xx + 1);
                            by1 = by1.max(yy + 1);
                        }
                    }
                }
            }
            cx += 7 * s + rng.gen_range(0..=s.max(1) / 2);
        }
        Ok((bx0 < bx1).then(|| BBox::new(bx0 as u32, by0 as u32, bx1 as u32, by1 as u32)))
    }
}

const INDEX_MARKS: [&str; 6] = ["1", "2", "I", "II", "3", "a"];
const SOURCES: [&str; 6] = ["Aug. civ. 5,12", "Cic. off. 1,4", "Hier. epist. 22", "Beda hist. 3", "Greg. M. dial.", "Isid. orig. 8"];
const CONTEXT: [&str; 12] = [
    "et in eodem loco", "quod dicitur de", "ut supra notatum", "cum magna cura", "sicut scriptum est", "in libro primo",
    "per omnia saecula", "de civitate dei", "secundum regulam", "ad finem operis", "quae sequuntur", "inter alia",
];

/// Renders a card for `lemma`. Every random choice comes from
/// `style_seed`, so the same arguments give pixel-identical cards.
pub fn generate_synthetic_card(lemma: &str, style_seed: u64, style: &CardStyle) -> Result<SyntheticCard> {
    if lemma.is_empty() {
        return Err(Error::Validation("cannot render an empty lemma".into()));
    }
    for c in lemma.chars() {
        glyph(c)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let noise = style.noise.clamp(0.0, 1.0);
    let (w, h) = (style.width, style.height);
    let mut canvas = Canvas::new(w, h);

    let mut pen = Pen {
        scale: rng.gen_range(3..=4),
        slant: rng.gen_range(0.0..0.35 + 0.25 * noise),
        weight: rng.gen_range(0..=1),
        tilt: rng.gen_range(-1.0..=1.0) * 0.09 * noise,
        jitter: 0.15 + 0.2 * noise,
    };
    let x0 = rng.gen_range(8..=24i64);
    let mut y0 = rng.gen_range(10..=30i64);
    // shrink the lemma until its center is safely inside the quarter
    while pen.scale > 1 && (x0 as u32 + Canvas::text_width(lemma, &pen) / 2 + 4 >= w / 2 || y0 as u32 + 6 * pen.scale >= h / 2) {
        pen.scale -= 1;
    }
    // make room for a rising baseline
    y0 += (pen.tilt.max(0.0) * Canvas::text_width(lemma, &pen) as f32).ceil() as i64;
    let lemma_box = canvas
        .draw(lemma, x0, y0, &pen, &mut rng)?
        .ok_or(Error::Render(lemma.chars().next().unwrap_or(' ')))?;
    if !lemma_box.center_in_upper_left(w, h) {
        return Err(Error::Validation(format!("lemma {lemma:?} is too long for a {w}x{h} card")));
    }

    let mut decoy_boxes = Vec::new();
    if style.decoys {
        let small = Pen {
            scale: (pen.scale - 1).max(1),
            slant: 0.1,
            weight: 0,
            tilt: 0.0,
            jitter: 0.0,
        };
        let mark = *INDEX_MARKS.choose(&mut rng).unwrap();
        let mx = lemma_box.x0 as i64 + rng.gen_range(0..=8);
        let my = lemma_box.y1 as i64 + rng.gen_range(6..=14);
        let mut probe = Canvas::new(w, h);
        let mut probe_rng = rng.clone();
        if let Some(b) = probe.draw(mark, mx, my, &small, &mut probe_rng)? {
            if b.area() < lemma_box.area() && b.center_in_upper_left(w, h) && !overlaps(&b, &lemma_box) {
                decoy_boxes.extend(canvas.draw(mark, mx, my, &small, &mut rng)?);
            }
        }

        let print = Pen {
            scale: 2,
            slant: 0.0,
            weight: 0,
            tilt: 0.0,
            jitter: 0.0,
        };
        let source = *SOURCES.choose(&mut rng).unwrap();
        let sx = (w / 2 + rng.gen_range(16..=40)) as i64;
        let sy = rng.gen_range(12..=28i64);
        decoy_boxes.extend(canvas.draw(source, sx, sy, &print, &mut rng)?);

        let lines = rng.gen_range(2..=3);
        let mut ly = (h / 2 + rng.gen_range(30..=50)) as i64;
        for _ in 0..lines {
            let words: Vec<&str> = CONTEXT.choose_multiple(&mut rng, 2).copied().collect();
            let line = words.join(" ");
            decoy_boxes.extend(canvas.draw(&line, rng.gen_range(20..=60), ly, &print, &mut rng)?);
            ly += 26;
        }
    }

    let image = paint(&canvas, noise, &mut rng);
    Ok(SyntheticCard {
        image,
        label: lemma.to_string(),
        lemma_box,
        decoy_boxes,
    })
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

/// Composites ink onto paper and applies the requested degradation.
fn paint(canvas: &Canvas, noise: f32, rng: &mut ChaCha8Rng) -> RgbImage {
    let paper = [rng.gen_range(232.0..250.0), rng.gen_range(226.0..244.0), rng.gen_range(200.0..228.0f32)];
    let inks: [[f32; 3]; 3] = [[20.0, 22.0, 30.0], [25.0, 35.0, 95.0], [70.0, 45.0, 30.0]];
    let mut ink = *inks.choose(rng).unwrap();
    let fade = noise * rng.gen_range(0.2..0.55);
    for (i, v) in ink.iter_mut().enumerate() {
        *v += (paper[i] - *v) * fade;
    }

    let (w, h) = (canvas.w, canvas.h);
    let mut cover = canvas.ink.clone();
    if noise > 0.0 && rng.gen_bool((0.4 + 0.5 * noise as f64).min(1.0)) {
        cover = box_blur(&cover, w, h);
    }
    let grain = Normal::new(0.0, 3.0 + 22.0 * noise).expect("positive std");
    let mut img = RgbImage::new(w, h);
    for (i, p) in img.pixels_mut().enumerate() {
        let a = cover[i];
        let g: f32 = grain.sample(rng);
        *p = Rgb(std::array::from_fn(|c| (paper[c] + (ink[c] - paper[c]) * a + g).round().clamp(0.0, 255.0) as u8));
    }
    if noise > 0.0 {
        for _ in 0..rng.gen_range(0..=(3.0 * noise) as u32) {
            stain(&mut img, rng);
        }
    }
    img
}

fn box_blur(src: &[f32], w: u32, h: u32) -> Vec<f32> {
    let (w, h) = (w as i64, h as i64);
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for yy in (y - 1).max(0)..=(y + 1).min(h - 1) {
                for xx in (x - 1).max(0)..=(x + 1).min(w - 1) {
                    acc += src[(yy * w + xx) as usize];
                    n += 1.0;
                }
            }
            out[(y * w + x) as usize] = acc / n;
        }
    }
    out
}

/// A translucent brownish ellipse.
fn stain(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    let (w, h) = img.dimensions();
    let cx = rng.gen_range(0..w) as f32;
    let cy = rng.gen_range(0..h) as f32;
    let rx = rng.gen_range(8.0..40.0f32);
    let ry = rng.gen_range(6.0..24.0f32);
    let alpha = rng.gen_range(0.1..0.3f32);
    let tint = [150.0, 120.0, 80.0f32];
    for y in (cy - ry).max(0.0) as u32..((cy + ry) as u32).min(h) {
        for x in (cx - rx).max(0.0) as u32..((cx + rx) as u32).min(w) {
            let d = ((x as f32 - cx) / rx).powi(2) + ((y as f32 - cy) / ry).powi(2);
            if d <= 1.0 {
                let p = img.get_pixel_mut(x, y);
                for c in 0..3 {
                    p.0[c] = (p.0[c] as f32 * (1.0 - alpha) + tint[c] * alpha).round() as u8;
                }
            }
        }
    }
}

const ONSETS: [&str; 20] = ["", "b", "c", "d", "f", "g", "l", "m", "n", "p", "qu", "r", "s", "t", "v", "st", "pr", "tr", "cl", "gr"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ae"];
const CODAS: [&str; 9] = ["", "", "", "s", "m", "n", "r", "l", "x"];
const ENDINGS: [&str; 10] = ["us", "a", "um", "is", "or", "io", "ae", "es", "ere", "ior"];

/// `count` distinct Latin-looking words, deterministic in `seed`. About
/// one in ten is capitalized.
pub fn synthetic_lemmas(count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut w = String::new();
        for _ in 0..rng.gen_range(1..=3) {
            w.push_str(ONSETS.choose(&mut rng).unwrap());
            w.push_str(VOWELS.choose(&mut rng).unwrap());
            w.push_str(CODAS.choose(&mut rng).unwrap());
        }
        w.push_str(ENDINGS.choose(&mut rng).unwrap());
        if rng.gen_bool(0.1) {
            let mut c = w.chars();
            let first = c.next().unwrap().to_uppercase().collect::<String>();
            w = first + c.as_str();
        }
        if w.chars().count() >= 2 && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::select_lemma_box;
    use super::*;

    #[test]
    fn lemma_box_in_upper_left_and_selected() {
        for seed in 0..20 {
            let card = generate_synthetic_card("salus", seed, &CardStyle::default()).unwrap();
            let (w, h) = card.image.dimensions();
            assert!(card.lemma_box.center_in_upper_left(w, h));
            let det = card.detection("x.png", seed);
            assert_eq!(select_lemma_box(&det.boxes, w, h).unwrap(), Some(card.lemma_box));
            assert!(!card.decoy_boxes.is_empty());
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_card("sanctus", 7, &CardStyle::noisy()).unwrap();
        let b = generate_synthetic_card("sanctus", 7, &CardStyle::noisy()).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.lemma_box, b.lemma_box);
    }

    #[test]
    fn lemma_box_is_tight() {
        let card = generate_synthetic_card("abbas", 3, &CardStyle { decoys: false, ..Default::default() }).unwrap();
        let b = card.lemma_box;
        let dark = |x: u32, y: u32| card.image.get_pixel(x, y).0[0] < 150;
        assert!((b.x0..b.x1).any(|x| dark(x, b.y0)));
        assert!((b.x0..b.x1).any(|x| dark(x, b.y1 - 1)));
        assert!((b.y0..b.y1).any(|y| dark(b.x0, y)));
        assert!((b.y0..b.y1).any(|y| dark(b.x1 - 1, y)));
    }

    #[test]
    fn unrenderable_character() {
        assert!(matches!(
            generate_synthetic_card("日本", 0, &CardStyle::default()),
            Err(Error::Render('日'))
        ));
    }

    #[test]
    fn lemma_list_is_distinct() {
        let l = synthetic_lemmas(500, 1);
        assert_eq!(l.iter().collect::<HashSet<_>>().len(), 500);
        assert_eq!(l, synthetic_lemmas(500, 1));
    }
}
