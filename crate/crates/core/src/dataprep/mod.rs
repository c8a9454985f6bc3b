//! From record-card scans and detector boxes to a manifest of lemma crops.

mod synth;

pub use synth::{generate_synthetic_card, synthetic_lemmas, CardStyle, SyntheticCard};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::nfc;

/// Pixel box, inclusive-exclusive, serialized as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<[u32; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [u32; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    /// Checks ordering and containment in a `width × height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(Error::Validation(format!(
                "box {:?} is empty or outside a {width}x{height} image",
                <[u32; 4]>::from(*self)
            )));
        }
        Ok(())
    }

    /// Center strictly inside the upper-left quarter `[0, W/2) × [0, H/2)`.
    pub fn center_in_upper_left(&self, width: u32, height: u32) -> bool {
        // doubled coordinates keep the test exact in integers
        (self.x0 as u64 + self.x1 as u64) < width as u64 && (self.y0 as u64 + self.y1 as u64) < height as u64
    }

    /// `self` interpreted relative to `outer`'s top-left corner.
    pub fn offset_by(&self, outer: &BBox) -> BBox {
        BBox::new(self.x0 + outer.x0, self.y0 + outer.y0, self.x1 + outer.x0, self.y1 + outer.y0)
    }
}

/// The lemma box: the largest-area candidate whose center lies in the
/// upper-left quarter. Area ties go to the smallest `(y0, x0)`. Returns
/// `None` when nothing qualifies.
pub fn select_lemma_box(boxes: &[BBox], width: u32, height: u32) -> Result<Option<BBox>> {
    for b in boxes {
        b.validate(width, height)?;
    }
    Ok(boxes
        .iter()
        .filter(|b| b.center_in_upper_left(width, height))
        .min_by_key(|b| (std::cmp::Reverse(b.area()), b.y0, b.x0, b.y1, b.x1))
        .copied())
}

pub fn extract_crop(image: &RgbImage, bbox: &BBox) -> Result<RgbImage> {
    bbox.validate(image.width(), image.height())?;
    Ok(image::imageops::crop_imm(image, bbox.x0, bbox.y0, bbox.width(), bbox.height()).to_image())
}

/// A scanned card with its detector candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardRecord {
    pub image_path: PathBuf,
    pub image_width: u32,
    pub image_height: u32,
    pub candidate_boxes: Vec<BBox>,
    pub label: String,
}

impl CardRecord {
    /// Validates the record and NFC-normalizes its label.
    pub fn new(image_path: PathBuf, image_width: u32, image_height: u32, candidate_boxes: Vec<BBox>, label: &str) -> Result<Self> {
        let label = nfc(label.trim());
        if label.is_empty() {
            return Err(Error::Validation(format!("{}: empty label", image_path.display())));
        }
        for b in &candidate_boxes {
            b.validate(image_width, image_height)?;
        }
        Ok(Self {
            image_path,
            image_width,
            image_height,
            candidate_boxes,
            label,
        })
    }
}

/// One line of a detector output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_path: PathBuf,
    pub boxes: Vec<BBox>,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split_seed: u64,
    pub train_fraction: f64,
}

/// Shuffles deterministically under `seed` and sends the first
/// `⌊n·train_fraction⌋` items to train, the rest to test.
pub fn split_dataset<E>(mut entries: Vec<E>, train_fraction: f64, seed: u64) -> Result<(Vec<E>, Vec<E>)> {
    if entries.is_empty() {
        return Err(Error::Validation("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config {
            section: "dataprep".into(),
            key: "train_fraction".into(),
            message: format!("must lie in (0, 1), got {train_fraction}"),
        });
    }
    let n = entries.len();
    // the epsilon absorbs representation error such as 0.85 * 100 = 84.999…
    let n_train = ((n as f64) * train_fraction + 1e-9).floor() as usize;
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = entries.split_off(n_train);
    Ok((entries, test))
}

impl DatasetManifest {
    /// Splits `(path, label)` pairs into a manifest.
    pub fn build(items: Vec<(PathBuf, String)>, train_fraction: f64, split_seed: u64) -> Result<Self> {
        let (train, test) = split_dataset(items, train_fraction, split_seed)?;
        let tag = |split| move |(path, label): (PathBuf, String)| ManifestEntry { path, label, split };
        let entries = train
            .into_iter()
            .map(tag(Split::Train))
            .chain(test.into_iter().map(tag(Split::Test)))
            .collect();
        Ok(Self {
            entries,
            split_seed,
            train_fraction,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries)
    }

    /// Reads entries; the split parameters are not stored and come back as
    /// zero.
    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self {
            entries: read_jsonl(path)?,
            split_seed: 0,
            train_fraction: 0.0,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("serializable record");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxValidationReport {
    pub records: usize,
    pub pearson_r: f64,
    pub threshold: f64,
    pub flagged: bool,
    /// Box-width quartiles keyed by label length.
    pub per_length: BTreeMap<usize, Quartiles>,
}

pub const DEFAULT_FLAG_THRESHOLD: f64 = 0.5;
pub const MIN_VALIDATION_RECORDS: usize = 10;

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Checks that box widths grow with label length: a weak correlation
/// (`r < threshold`) flags the annotation set for review.
pub fn validate_box_widths<S: AsRef<str>>(records: &[(S, BBox)], threshold: f64) -> Result<BoxValidationReport> {
    if records.len() < MIN_VALIDATION_RECORDS {
        return Err(Error::InsufficientData {
            needed: MIN_VALIDATION_RECORDS,
            got: records.len(),
        });
    }
    let lengths: Vec<f64> = records.iter().map(|(l, _)| l.as_ref().chars().count() as f64).collect();
    let widths: Vec<f64> = records.iter().map(|(_, b)| b.width() as f64).collect();
    let r = pearson(&lengths, &widths);

    let mut by_len: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (l, w) in lengths.iter().zip(&widths) {
        by_len.entry(*l as usize).or_default().push(*w);
    }
    let per_length = by_len
        .into_iter()
        .map(|(len, ws)| {
            let d = crate::eval::Distribution::of(&ws).expect("non-empty group");
            (
                len,
                Quartiles {
                    count: ws.len(),
                    min: d.min,
                    q1: d.q1,
                    median: d.median,
                    q3: d.q3,
                    max: d.max,
                },
            )
        })
        .collect();
    Ok(BoxValidationReport {
        records: records.len(),
        pearson_r: r,
        threshold,
        flagged: r < threshold,
        per_length,
    })
}

/// Why a card produced no crop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub image_path: PathBuf,
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// No candidate box has its center in the upper-left quarter.
    NoBox,
    /// The record failed validation (bad box, empty label, unreadable image).
    Invalid,
}

#[derive(Clone, Debug)]
pub struct PrepareOutput {
    pub manifest: DatasetManifest,
    pub skipped: Vec<SkippedRecord>,
    /// Label and chosen box of every cropped card, in input order.
    pub selected: Vec<(String, BBox)>,
}

impl PrepareOutput {
    pub fn has_invalid(&self) -> bool {
        self.skipped.iter().any(|s| s.reason == SkipReason::Invalid)
    }
}

/// Subdirectory of the output directory that receives the crops.
pub const CROPS_DIR: &str = "crops";

/// Selects, crops and splits every detection. Crops are written as PNG to
/// `out_dir/crops`, and manifest paths are relative to `out_dir`. Relative
/// image paths are resolved against `images_dir`.
pub fn prepare(
    detections: &[Detection],
    images_dir: &Path,
    out_dir: &Path,
    train_fraction: f64,
    seed: u64,
) -> Result<PrepareOutput> {
    let crops_dir = out_dir.join(CROPS_DIR);
    std::fs::create_dir_all(&crops_dir).map_err(|e| Error::io(&crops_dir, e))?;
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    let mut selected = Vec::new();
    for (i, det) in detections.iter().enumerate() {
        let source = images_dir.join(&det.image_path);
        let skip = |reason, detail: String| SkippedRecord {
            image_path: det.image_path.clone(),
            reason,
            detail,
        };
        let image = match image::open(&source) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                skipped.push(skip(SkipReason::Invalid, e.to_string()));
                continue;
            }
        };
        let record = match CardRecord::new(det.image_path.clone(), image.width(), image.height(), det.boxes.clone(), &det.label) {
            Ok(r) => r,
            Err(e) => {
                skipped.push(skip(SkipReason::Invalid, e.to_string()));
                continue;
            }
        };
        let Some(bbox) = select_lemma_box(&record.candidate_boxes, record.image_width, record.image_height)? else {
            skipped.push(skip(SkipReason::NoBox, "no candidate box centered in the upper-left quarter".into()));
            continue;
        };
        let crop = extract_crop(&image, &bbox)?;
        let stem = det.image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let name = Path::new(CROPS_DIR).join(format!("{i:06}_{stem}.png"));
        let out = out_dir.join(&name);
        crop.save(&out).map_err(|e| Error::Image { path: out.clone(), source: e })?;
        selected.push((record.label.clone(), bbox));
        items.push((name, record.label));
    }
    let manifest = if items.is_empty() {
        DatasetManifest {
            entries: Vec::new(),
            split_seed: seed,
            train_fraction,
        }
    } else {
        DatasetManifest::build(items, train_fraction, seed)?
    };
    Ok(PrepareOutput {
        manifest,
        skipped,
        selected,
    })
}
