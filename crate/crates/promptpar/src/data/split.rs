//! Train/val/test splitting, including the zero-shot variant that keeps
//! person identities disjoint between train and test.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Standard,
    ZeroShot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn validate_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::Split("split ratios must be nonnegative".into()));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "split ratios must sum to 1, got {}",
            a + b + c
        )));
    }
    Ok(())
}

fn cut_points(count: usize, ratios: (f64, f64, f64)) -> (usize, usize) {
    let train = (ratios.0 * count as f64).round() as usize;
    let val = (ratios.1 * count as f64).round() as usize;
    let train = train.min(count);
    let val = val.min(count - train);
    (train, val)
}

/// Shuffle sample indices and partition them by ratio.
pub fn standard_split(n_samples: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitSpec> {
    validate_ratios(ratios)?;
    if n_samples == 0 {
        return Err(Error::Split("cannot split an empty dataset".into()));
    }
    let mut indices: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let (n_train, n_val) = cut_points(n_samples, ratios);
    Ok(SplitSpec {
        mode: SplitMode::Standard,
        seed,
        train: indices[..n_train].to_vec(),
        val: indices[n_train..n_train + n_val].to_vec(),
        test: indices[n_train + n_val..].to_vec(),
    })
}

/// Partition person identities (not samples) by ratio, so every sample of
/// an identity lands in exactly one split and train/test identities are
/// disjoint by construction.
pub fn zero_shot_split(
    samples: &[Sample],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSpec> {
    validate_ratios(ratios)?;
    if samples.is_empty() {
        return Err(Error::Split("cannot split an empty dataset".into()));
    }
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| s.identity.is_none())
        .map(|s| s.image_name.as_str())
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(5).copied().collect();
        return Err(Error::Split(format!(
            "{} samples lack an identity (e.g. {:?})",
            missing.len(),
            shown
        )));
    }

    // Unique identities in first-appearance order, then a seeded shuffle.
    let mut identities: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for s in samples {
        let id = s.identity.as_deref().unwrap();
        if seen.insert(id) {
            identities.push(id);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    identities.shuffle(&mut rng);

    let (n_train, n_val) = cut_points(identities.len(), ratios);
    let assignment: std::collections::HashMap<&str, u8> = identities
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            (*id, split)
        })
        .collect();

    let mut spec = SplitSpec {
        mode: SplitMode::ZeroShot,
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        match assignment[s.identity.as_deref().unwrap()] {
            0 => spec.train.push(i),
            1 => spec.val.push(i),
            _ => spec.test.push(i),
        }
    }
    Ok(spec)
}

/// Identity sets of two index lists are disjoint.
pub fn identities_disjoint(samples: &[Sample], a: &[usize], b: &[usize]) -> bool {
    let ids = |idx: &[usize]| -> std::collections::HashSet<&str> {
        idx.iter()
            .filter_map(|&i| samples[i].identity.as_deref())
            .collect()
    };
    ids(a).intersection(&ids(b)).count() == 0
}
