//! Character error rate, exact match, and corpus reports.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Edit-operation counts aligning a prediction to its label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub correct: usize,
    /// Label length in code points.
    pub label_len: usize,
}

impl CerBreakdown {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn cer(&self) -> f64 {
        self.edits() as f64 / self.label_len as f64
    }
}

pub fn nfc(s: &str) -> String {
    s.nfc().collect()
}

/// Levenshtein distance over code points.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut diag = row[0];
        row[0] = i;
        for j in 1..=b.len() {
            let up = row[j];
            row[j] = (diag + usize::from(a[i - 1] != b[j - 1])).min(up + 1).min(row[j - 1] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

/// Counts of a minimal edit script turning `prediction` into `label`.
///
/// Both strings are NFC-normalized first. Among minimal scripts the
/// backtrace prefers substitution, then deletion, then insertion. Here an
/// insertion is an extra predicted character and a deletion a label
/// character the prediction misses.
pub fn cer(prediction: &str, label: &str) -> Result<CerBreakdown> {
    let p: Vec<char> = nfc(prediction).chars().collect();
    let l: Vec<char> = nfc(label).chars().collect();
    if l.is_empty() {
        return Err(Error::Validation("CER is undefined for an empty label".into()));
    }
    let (n, m) = (p.len(), l.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(p[i - 1] != l[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }

    let mut out = CerBreakdown {
        label_len: m,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + usize::from(p[i - 1] != l[j - 1]) {
            if p[i - 1] == l[j - 1] {
                out.correct += 1;
            } else {
                out.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if j > 0 && here == d[i * w + j - 1] + 1 {
            out.deletions += 1;
            j -= 1;
        } else {
            out.insertions += 1;
            i -= 1;
        }
    }
    Ok(out)
}

/// `Σ lᵢ·CERᵢ / Σ lᵢ` over `(label length, CER)` pairs.
pub fn weighted_cer(items: &[(usize, f64)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Validation("weighted CER of an empty set".into()));
    }
    if items.iter().any(|&(l, _)| l == 0) {
        return Err(Error::Validation("label lengths must be positive".into()));
    }
    let num: f64 = items.iter().map(|&(l, c)| l as f64 * c).sum();
    let den: usize = items.iter().map(|&(l, _)| l).sum();
    Ok(num / den as f64)
}

/// Fraction of `(prediction, label)` pairs that agree after NFC.
pub fn exact_match_rate<P: AsRef<str>, L: AsRef<str>>(pairs: &[(P, L)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("exact match rate of an empty set".into()));
    }
    let hits = pairs
        .iter()
        .filter(|(p, l)| nfc(p.as_ref()) == nfc(l.as_ref()))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Keeps only the first word of an external OCR transcription: cuts at the
/// first whitespace, `-` or `(`, then trims.
pub fn normalize_external_prediction(text: &str) -> String {
    let text = text.trim();
    let end = text
        .find(|c: char| c.is_whitespace() || c == '-' || c == '(')
        .unwrap_or(text.len());
    text[..end].trim().to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub std_dev: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
        Some(Self {
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
            std_dev: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean_cer: f64,
    pub weighted_cer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_cer: f64,
    pub weighted_cer: f64,
    pub exact_match: f64,
    pub total_edits: usize,
    pub total_label_chars: usize,
    pub distribution: Distribution,
    /// Keyed by label length in code points.
    pub per_length: BTreeMap<usize, GroupStats>,
    /// Keyed by how often the label occurs in the evaluated set.
    pub per_frequency: BTreeMap<String, GroupStats>,
}

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub prediction: String,
    pub label: String,
    pub breakdown: CerBreakdown,
}

impl Scored {
    pub fn new(id: impl Into<String>, prediction: &str, label: &str) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            breakdown: cer(prediction, label)?,
            prediction: nfc(prediction),
            label: nfc(label),
        })
    }
}

pub const FREQUENCY_BUCKETS: [(&str, usize, usize); 4] =
    [("1", 1, 1), ("2-10", 2, 10), ("11-100", 11, 100), (">100", 101, usize::MAX)];

fn group(items: &[&Scored]) -> GroupStats {
    let edits: usize = items.iter().map(|s| s.breakdown.edits()).sum();
    let chars: usize = items.iter().map(|s| s.breakdown.label_len).sum();
    GroupStats {
        count: items.len(),
        mean_cer: items.iter().map(|s| s.breakdown.cer()).sum::<f64>() / items.len() as f64,
        weighted_cer: edits as f64 / chars as f64,
    }
}

impl EvalReport {
    pub fn from_scored(samples: &[Scored]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("cannot report on zero samples".into()));
        }
        let cers: Vec<f64> = samples.iter().map(|s| s.breakdown.cer()).collect();
        let weighted: Vec<(usize, f64)> = samples.iter().map(|s| (s.breakdown.label_len, s.breakdown.cer())).collect();
        let pairs: Vec<(&str, &str)> = samples.iter().map(|s| (s.prediction.as_str(), s.label.as_str())).collect();

        let mut by_len: BTreeMap<usize, Vec<&Scored>> = BTreeMap::new();
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in samples {
            by_len.entry(s.breakdown.label_len).or_default().push(s);
            *freq.entry(s.label.as_str()).or_default() += 1;
        }
        let mut per_frequency = BTreeMap::new();
        for (name, lo, hi) in FREQUENCY_BUCKETS {
            let items: Vec<&Scored> = samples
                .iter()
                .filter(|s| (lo..=hi).contains(&freq[s.label.as_str()]))
                .collect();
            if !items.is_empty() {
                per_frequency.insert(name.to_string(), group(&items));
            }
        }
        Ok(Self {
            count: samples.len(),
            mean_cer: cers.iter().sum::<f64>() / cers.len() as f64,
            weighted_cer: weighted_cer(&weighted)?,
            exact_match: exact_match_rate(&pairs)?,
            total_edits: samples.iter().map(|s| s.breakdown.edits()).sum(),
            total_label_chars: samples.iter().map(|s| s.breakdown.label_len).sum(),
            distribution: Distribution::of(&cers).expect("non-empty"),
            per_length: by_len.into_iter().map(|(k, v)| (k, group(&v))).collect(),
            per_frequency,
        })
    }

    pub fn from_pairs<I, P, L>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (P, L)>,
        P: AsRef<str>,
        L: AsRef<str>,
    {
        let scored = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (p, l))| Scored::new(i.to_string(), p.as_ref(), l.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_scored(&scored)
    }
}

/// A line of a prediction or label file. Field names follow either the
/// `{id, text}` convention or the `{path, prediction}` / `{path, label}`
/// files written by this crate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    #[serde(alias = "path")]
    pub id: String,
    #[serde(alias = "prediction", alias = "label")]
    pub text: String,
}

pub fn read_text_records(path: &Path) -> Result<Vec<TextRecord>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Pairs every label with its prediction; fails listing ids present on
/// only one side.
pub fn join_by_id(predictions: &[TextRecord], labels: &[TextRecord], normalize: bool) -> Result<Vec<Scored>> {
    let preds: HashMap<&str, &str> = predictions.iter().map(|r| (r.id.as_str(), r.text.as_str())).collect();
    let known: HashMap<&str, ()> = labels.iter().map(|r| (r.id.as_str(), ())).collect();
    let mut missing: Vec<String> = labels
        .iter()
        .filter(|r| !preds.contains_key(r.id.as_str()))
        .map(|r| r.id.clone())
        .chain(predictions.iter().filter(|r| !known.contains_key(r.id.as_str())).map(|r| r.id.clone()))
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::Join { missing });
    }
    labels
        .iter()
        .map(|l| {
            let p = preds[l.id.as_str()];
            let p = if normalize { normalize_external_prediction(p) } else { p.to_string() };
            Scored::new(l.id.clone(), &p, &l.text)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ours: EvalReport,
    pub external: EvalReport,
    /// Long-format `(system, id, cer)` rows.
    #[serde(skip)]
    pub rows: Vec<(String, String, f64)>,
}

/// Scores two systems on the same labels. External predictions are
/// normalized with [`normalize_external_prediction`] first.
pub fn compare_systems(ours: &[TextRecord], external: &[TextRecord], labels: &[TextRecord]) -> Result<Comparison> {
    let a = join_by_id(ours, labels, false)?;
    let b = join_by_id(external, labels, true)?;
    let rows = a
        .iter()
        .map(|s| ("ours".to_string(), s.id.clone(), s.breakdown.cer()))
        .chain(b.iter().map(|s| ("external".to_string(), s.id.clone(), s.breakdown.cer())))
        .collect();
    Ok(Comparison {
        ours: EvalReport::from_scored(&a)?,
        external: EvalReport::from_scored(&b)?,
        rows,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with header `system,id,cer`.
pub fn distribution_csv(rows: &[(String, String, f64)]) -> String {
    let mut out = String::from("system,id,cer\n");
    for (system, id, cer) in rows {
        out.push_str(&format!("{},{},{}\n", csv_field(system), csv_field(id), cer));
    }
    out
}
