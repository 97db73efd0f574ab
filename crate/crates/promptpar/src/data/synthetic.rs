//! Desk-scale synthetic benchmark whose labels are pixel-decidable.
//!
//! Every attribute is a trivial visual property with a wide decision
//! margin: half-specific base colors and brightness (exercising the
//! region-aware path), and global frame/saturation/stripe/dot markers.
//! Generated labels can be recomputed from pixels by [`decide_labels`],
//! an independent rule-based checker.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageTensor, Sample};
use crate::error::{Error, Result};
use crate::vocab::{RegionHint, VocabEntry};

/// Fixed schema: (raw label, subject, value). The first `attributes`
/// entries are active.
pub const SCHEMA: [(&str, &str, &str); 8] = [
    ("top red", "top color", "red"),
    ("top bright", "top brightness", "high"),
    ("bottom green", "bottom color", "green"),
    ("bottom bright", "bottom brightness", "high"),
    ("border", "frame", "present"),
    ("saturated", "colors", "saturated"),
    ("mid stripe", "stripe", "present"),
    ("corner dots", "corners", "marked"),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub attributes: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Target prevalence per attribute; empty means 0.5 everywhere.
    pub skew: Vec<f64>,
    /// Number of distinct person identities (0 means one per sample).
    pub identities: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            samples: 2000,
            attributes: 6,
            image_size: 32,
            seed: 1,
            skew: Vec::new(),
            identities: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("synthetic sample count must be > 0".into()));
        }
        if self.attributes == 0 || self.attributes > SCHEMA.len() {
            return Err(Error::Config(format!(
                "synthetic attribute count must be 1..={}, got {}",
                SCHEMA.len(),
                self.attributes
            )));
        }
        if self.image_size % 16 != 0 || self.image_size == 0 {
            return Err(Error::Config(format!(
                "synthetic image size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if !self.skew.is_empty() {
            if self.skew.len() != self.attributes {
                return Err(Error::Config(format!(
                    "{} skew entries for {} attributes",
                    self.skew.len(),
                    self.attributes
                )));
            }
            for s in &self.skew {
                if !(0.0..=1.0).contains(s) {
                    return Err(Error::Config(format!("skew {s} outside [0,1]")));
                }
            }
        }
        Ok(())
    }

    fn prevalence(&self, j: usize) -> f64 {
        if self.skew.is_empty() {
            0.5
        } else {
            self.skew[j]
        }
    }
}

/// Vocabulary entries backing the active schema rows.
pub fn schema_entries(attributes: usize) -> Vec<VocabEntry> {
    SCHEMA[..attributes]
        .iter()
        .map(|(label, subject, value)| VocabEntry {
            label: label.to_string(),
            subject: subject.to_string(),
            value: value.to_string(),
            group: RegionHint::Global,
        })
        .collect()
}

fn splitmix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

const NOISE: f64 = 0.05;
const BRIGHT_SCALE: f64 = 1.0;
const DARK_SCALE: f64 = 0.45;

fn base_top(red: bool) -> [f64; 3] {
    if red {
        [0.8, 0.3, 0.2]
    } else {
        [0.2, 0.3, 0.8]
    }
}

fn base_bottom(green: bool) -> [f64; 3] {
    if green {
        [0.3, 0.8, 0.2]
    } else {
        [0.3, 0.2, 0.8]
    }
}

fn pastel(c: [f64; 3]) -> [f64; 3] {
    [
        0.5 * c[0] + 0.25,
        0.5 * c[1] + 0.25,
        0.5 * c[2] + 0.25,
    ]
}

/// Render one sample image from its label bits.
fn render(bits: &[bool], size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let n = bits.len();
    let u = size / 16;
    let bit = |j: usize, default: bool| if j < n { bits[j] } else { default };

    let mut top = base_top(bit(0, true));
    let mut bottom = base_bottom(bit(2, true));
    if !bit(5, true) {
        top = pastel(top);
        bottom = pastel(bottom);
    }
    let top_scale = if bit(1, true) { BRIGHT_SCALE } else { DARK_SCALE };
    let bottom_scale = if bit(3, true) { BRIGHT_SCALE } else { DARK_SCALE };

    let mut img = ImageTensor::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (color, scale) = if y < size / 2 {
                (&top, top_scale)
            } else {
                (&bottom, bottom_scale)
            };
            for c in 0..3 {
                let noise = rng.random_range(-NOISE..NOISE);
                img.set(y, x, c, (color[c] * scale + noise).clamp(0.0, 1.0));
            }
        }
    }

    let mut paint_white = |y0: usize, y1: usize, x0: usize, x1: usize, rng: &mut ChaCha8Rng| {
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    let noise = rng.random_range(-NOISE..NOISE);
                    img.set(y, x, c, (1.0 + noise).clamp(0.0, 1.0));
                }
            }
        }
    };

    if bit(4, false) {
        paint_white(0, u, 0, size, rng);
        paint_white(size - u, size, 0, size, rng);
        paint_white(u, size - u, 0, u, rng);
        paint_white(u, size - u, size - u, size, rng);
    }
    if bit(6, false) {
        paint_white(7 * u, 9 * u, u, size - u, rng);
    }
    if bit(7, false) {
        for (y0, x0) in [
            (2 * u, 2 * u),
            (2 * u, 12 * u),
            (12 * u, 2 * u),
            (12 * u, 12 * u),
        ] {
            paint_white(y0, y0 + 2 * u, x0, x0 + 2 * u, rng);
        }
    }
    img
}

fn window_means(img: &ImageTensor, y0: usize, y1: usize, x0: usize, x1: usize) -> [f64; 3] {
    let mut sums = [0.0; 3];
    let count = ((y1 - y0) * (x1 - x0)) as f64;
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..3 {
                sums[c] += img.get(y, x, c);
            }
        }
    }
    [sums[0] / count, sums[1] / count, sums[2] / count]
}

fn lum(m: &[f64; 3]) -> f64 {
    (m[0] + m[1] + m[2]) / 3.0
}

fn spread_ratio(m: &[f64; 3]) -> f64 {
    let max = m[0].max(m[1]).max(m[2]);
    let min = m[0].min(m[1]).min(m[2]);
    (max - min) / (lum(m) + 1e-9)
}

/// Re-derive the labels of a synthetic image from pixels alone.
///
/// Measurement windows avoid every optional marker region, so each rule has
/// a wide margin around its threshold regardless of the other attributes.
pub fn decide_labels(img: &ImageTensor, attributes: usize) -> Result<Vec<u8>> {
    if img.height != img.width || img.height % 16 != 0 {
        return Err(Error::Data(format!(
            "synthetic checker expects a square multiple-of-16 image, got {}x{}",
            img.height, img.width
        )));
    }
    let size = img.height;
    let u = size / 16;
    let top = window_means(img, 4 * u, 7 * u, 2 * u, 14 * u);
    let bottom = window_means(img, 9 * u, 12 * u, 2 * u, 14 * u);

    // Frame band: the perimeter of width u.
    let mut frame_sum = 0.0;
    let mut frame_count = 0.0;
    for y in 0..size {
        for x in 0..size {
            if y < u || y >= size - u || x < u || x >= size - u {
                for c in 0..3 {
                    frame_sum += img.get(y, x, c);
                }
                frame_count += 3.0;
            }
        }
    }
    let frame_mean = frame_sum / frame_count;

    let stripe = window_means(img, 7 * u, 9 * u, u, size - u);
    let mut dots_sum = 0.0;
    for (y0, x0) in [
        (2 * u, 2 * u),
        (2 * u, 12 * u),
        (12 * u, 2 * u),
        (12 * u, 12 * u),
    ] {
        dots_sum += lum(&window_means(img, y0, y0 + 2 * u, x0, x0 + 2 * u));
    }
    let dots_mean = dots_sum / 4.0;

    let decisions = [
        top[0] > top[2],
        lum(&top) > 0.31,
        bottom[1] > bottom[2],
        lum(&bottom) > 0.31,
        frame_mean > 0.7,
        0.5 * (spread_ratio(&top) + spread_ratio(&bottom)) > 1.0,
        lum(&stripe) > 0.7,
        dots_mean > 0.7,
    ];
    Ok(decisions[..attributes].iter().map(|&b| u8::from(b)).collect())
}

/// Generate the dataset in memory: images paired with their samples.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<ImageTensor>, Vec<Sample>)> {
    cfg.validate()?;
    let mut images = Vec::with_capacity(cfg.samples);
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed, i as u64 + 1));
        let bits: Vec<bool> = (0..cfg.attributes)
            .map(|j| rng.random_bool(cfg.prevalence(j)))
            .collect();
        let img = render(&bits, cfg.image_size, &mut rng);
        let identity = if cfg.identities == 0 {
            format!("id{i:05}")
        } else {
            format!("id{:05}", i % cfg.identities)
        };
        samples.push(Sample {
            image_name: format!("sample_{i:05}.png"),
            identity: Some(identity),
            labels: bits.iter().map(|&b| u8::from(b)).collect(),
        });
        images.push(img);
    }
    Ok((images, samples))
}

/// Emit the dataset to disk: `images/*.png`, the annotation file, the
/// vocabulary file, and a manifest recording the generator config.
pub fn write_synthetic(cfg: &SyntheticConfig, dir: &Path) -> Result<()> {
    let (images, samples) = generate_synthetic(cfg)?;
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    for (img, sample) in images.iter().zip(&samples) {
        img.save_png(&image_dir.join(&sample.image_name))?;
    }
    super::annotations::write_annotations(&dir.join("annotations.tsv"), &samples)?;
    let vocab_lines: String = schema_entries(cfg.attributes)
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.label, e.subject, e.value))
        .collect();
    std::fs::write(dir.join("vocabulary.tsv"), vocab_lines)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}
