//! Turning prompt scores into ensemble weights and prompt subsets.
//!
//! Selection treats the useful prompts as upper outliers of the score
//! distribution: z_p = (s_p - median) / MAD, and a prompt is kept when
//! z_p > tau. Thresholding z rather than s makes tau independent of the
//! score scale.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MAD values below this are treated as zero spread.
pub const MAD_EPS: f64 = 1e-12;
/// Threshold for datasets with many diverse classes.
pub const TAU_GENERAL: f64 = 0.5;
/// Threshold for fine-grained datasets.
pub const TAU_FINE_GRAINED: f64 = 2.0;
pub const DEFAULT_POWER: u32 = 10;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum WeightingScheme {
    /// Scores used directly as weights.
    Raw,
    /// max(score, 0)^exponent.
    Power { exponent: u32 },
    /// softmax(score / temperature) over the prompts.
    Softmax { temperature: f64 },
}

impl Default for WeightingScheme {
    fn default() -> Self {
        WeightingScheme::Softmax {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl WeightingScheme {
    pub fn power() -> Self {
        WeightingScheme::Power {
            exponent: DEFAULT_POWER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightingScheme::Power { exponent: 0 } => Err(Error::InvalidConfig(
                "power exponent must be at least 1".into(),
            )),
            WeightingScheme::Softmax { temperature }
                if !(temperature > 0.0 && temperature.is_finite()) =>
            {
                Err(Error::InvalidConfig(format!(
                    "softmax temperature must be positive, got {temperature}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightingScheme::Raw => "raw",
            WeightingScheme::Power { .. } => "power",
            WeightingScheme::Softmax { .. } => "softmax",
        }
    }
}

impl fmt::Display for WeightingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightingScheme::Raw => f.write_str("raw"),
            WeightingScheme::Power { exponent } => write!(f, "power({exponent})"),
            WeightingScheme::Softmax { temperature } => write!(f, "softmax(T={temperature})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub scheme: WeightingScheme,
    pub weights: Vec<f64>,
}

impl WeightVector {
    pub fn uniform(prompts: usize) -> Self {
        WeightVector {
            scheme: WeightingScheme::Raw,
            weights: vec![1.0; prompts],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Overflow-safe softmax of `scores / temperature`.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn apply_weighting(scores: &[f64], scheme: WeightingScheme) -> WeightVector {
    let weights = match scheme {
        WeightingScheme::Raw => scores.to_vec(),
        WeightingScheme::Power { exponent } => scores
            .iter()
            .map(|&s| s.max(0.0).powi(exponent as i32))
            .collect(),
        WeightingScheme::Softmax { temperature } => softmax(scores, temperature),
    };
    WeightVector { scheme, weights }
}

/// Applies `scheme` to the selected prompts only; unselected prompts get weight 0.
///
/// Softmax therefore renormalizes over the survivors.
pub fn apply_weighting_masked(
    scores: &[f64],
    scheme: WeightingScheme,
    mask: &[bool],
) -> Result<WeightVector> {
    if scores.len() != mask.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: mask.len(),
        });
    }
    let survivors: Vec<f64> = scores
        .iter()
        .zip(mask)
        .filter_map(|(&s, &keep)| keep.then_some(s))
        .collect();
    if survivors.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut subset = apply_weighting(&survivors, scheme).weights.into_iter();
    let weights = mask
        .iter()
        .map(|&keep| {
            if keep {
                subset.next().expect("one weight per survivor")
            } else {
                0.0
            }
        })
        .collect();
    Ok(WeightVector { scheme, weights })
}

/// Median with the midpoint convention for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MadStats {
    pub median: f64,
    pub mad: f64,
    /// Zero-filled when `degenerate` is set.
    pub z_scores: Vec<f64>,
    /// MAD below [`MAD_EPS`]: z-scores are undefined.
    pub degenerate: bool,
}

pub fn mad_z_scores(scores: &[f64]) -> MadStats {
    let med = median(scores);
    let deviations: Vec<f64> = scores.iter().map(|s| (s - med).abs()).collect();
    let mad = median(&deviations);
    let degenerate = mad < MAD_EPS;
    let z_scores = if degenerate {
        vec![0.0; scores.len()]
    } else {
        scores.iter().map(|s| (s - med) / mad).collect()
    };
    MadStats {
        median: med,
        mad,
        z_scores,
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    None,
    /// MAD was degenerate; every prompt kept.
    #[serde(rename = "all")]
    AllSelected,
    /// Nothing passed tau; the best-scoring prompt kept.
    Top1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub tau: f64,
    pub median: f64,
    pub mad: f64,
    pub z_scores: Vec<f64>,
    pub selected: Vec<bool>,
    pub fallback: Fallback,
}

impl SelectionMask {
    pub fn all(prompts: usize) -> Self {
        SelectionMask {
            tau: f64::NEG_INFINITY,
            median: 0.0,
            mad: 0.0,
            z_scores: vec![0.0; prompts],
            selected: vec![true; prompts],
            fallback: Fallback::None,
        }
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mask: SelectionMask = serde_json::from_str(&json).map_err(|e| Error::parse(path, e))?;
        if mask.z_scores.len() != mask.selected.len() {
            return Err(Error::parse(path, "z_scores and selected differ in length"));
        }
        if mask.count() == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(mask)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Keeps prompts whose MAD z-score exceeds `tau`, with fallbacks that always
/// leave at least one prompt selected.
pub fn select_prompts(scores: &[f64], tau: f64) -> Result<SelectionMask> {
    if !tau.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "tau must be finite, got {tau}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyPool);
    }
    let stats = mad_z_scores(scores);
    let (selected, fallback) = if stats.degenerate {
        (vec![true; scores.len()], Fallback::AllSelected)
    } else {
        let selected: Vec<bool> = stats.z_scores.iter().map(|&z| z > tau).collect();
        if selected.iter().any(|&s| s) {
            (selected, Fallback::None)
        } else {
            let mut top = vec![false; scores.len()];
            top[argmax(scores)] = true;
            (top, Fallback::Top1)
        }
    };
    Ok(SelectionMask {
        tau,
        median: stats.median,
        mad: stats.mad,
        z_scores: stats.z_scores,
        selected,
        fallback,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
