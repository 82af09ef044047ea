use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logits::LogitsSource;
use crate::error::{Error, Result};

/// Which expected-logit reference is subtracted before taking the max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    /// Raw max logit.
    None,
    /// Per-class mean logit over pretrain images.
    Pretrain,
    /// Pretrain mean further averaged over classes: one scalar per prompt.
    PretrainStar,
    /// Per-class mean logit over the test images themselves.
    Test,
    /// Average of the pretrain and test references.
    #[default]
    Both,
}

impl NormalizationMode {
    pub const ALL: [NormalizationMode; 5] = [
        NormalizationMode::None,
        NormalizationMode::Pretrain,
        NormalizationMode::PretrainStar,
        NormalizationMode::Test,
        NormalizationMode::Both,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationMode::None => "none",
            NormalizationMode::Pretrain => "pretrain",
            NormalizationMode::PretrainStar => "pretrain-star",
            NormalizationMode::Test => "test",
            NormalizationMode::Both => "both",
        }
    }

    pub fn needs_pretrain(self) -> bool {
        matches!(
            self,
            NormalizationMode::Pretrain | NormalizationMode::PretrainStar | NormalizationMode::Both
        )
    }

    pub fn needs_test(self) -> bool {
        matches!(self, NormalizationMode::Test | NormalizationMode::Both)
    }
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormalizationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown normalization mode {s:?}")))
    }
}

/// Per-prompt, per-class mean logits over the test images and (optionally)
/// the pretrain images. Mode-independent, so an ablation grid computes it once.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMeans {
    prompts: usize,
    classes: usize,
    test: Vec<f64>,
    pretrain: Option<Vec<f64>>,
    n_test: usize,
    n_pretrain: usize,
}

impl LogitMeans {
    pub fn compute(cube: &dyn LogitsSource, pretrain: Option<&dyn LogitsSource>) -> Result<Self> {
        let shape = cube.shape();
        let pretrain_means = match pretrain {
            Some(source) => {
                let ps = source.shape();
                if ps.prompts != shape.prompts || ps.classes != shape.classes {
                    return Err(Error::dims(format!(
                        "pretrain cube is {}x{}x{}, test cube is {}x{}x{}",
                        ps.prompts,
                        ps.images,
                        ps.classes,
                        shape.prompts,
                        shape.images,
                        shape.classes
                    )));
                }
                Some((class_means(source), ps.images))
            }
            None => None,
        };
        let (pretrain, n_pretrain) = match pretrain_means {
            Some((m, n)) => (Some(m), n),
            None => (None, 0),
        };
        Ok(LogitMeans {
            prompts: shape.prompts,
            classes: shape.classes,
            test: class_means(cube),
            pretrain,
            n_test: shape.images,
            n_pretrain,
        })
    }

    pub fn has_pretrain(&self) -> bool {
        self.pretrain.is_some()
    }
}

/// Column means of every prompt slab, f64, summed in ascending image order.
fn class_means(source: &dyn LogitsSource) -> Vec<f64> {
    let shape = source.shape();
    let per_prompt: Vec<Vec<f64>> = (0..shape.prompts)
        .into_par_iter()
        .map(|p| {
            let slab = source.prompt_logits(p);
            let mut sums = vec![0f64; shape.classes];
            for row in slab.chunks_exact(shape.classes) {
                for (s, &x) in sums.iter_mut().zip(row) {
                    *s += f64::from(x);
                }
            }
            let n = shape.images as f64;
            sums.into_iter().map(|s| s / n).collect()
        })
        .collect();
    per_prompt.concat()
}

/// Expected-logit references for one normalization mode.
///
/// Both components are stored as P×C; a component the mode does not use is
/// zero-filled and flagged. Under `PretrainStar` every row of `e_pretrain`
/// holds that prompt's single class-averaged value.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStats {
    mode: NormalizationMode,
    prompts: usize,
    classes: usize,
    e_pretrain: Vec<f64>,
    e_test: Vec<f64>,
    pretrain_used: bool,
    test_used: bool,
    n_test: usize,
    n_pretrain: usize,
}

impl ReferenceStats {
    pub fn from_means(means: &LogitMeans, mode: NormalizationMode) -> Result<Self> {
        let (prompts, classes) = (means.prompts, means.classes);
        let zeros = || vec![0f64; prompts * classes];
        let e_pretrain = match mode {
            NormalizationMode::Pretrain | NormalizationMode::Both => means
                .pretrain
                .clone()
                .ok_or(Error::MissingPretrain(mode.as_str()))?,
            NormalizationMode::PretrainStar => {
                let per_class = means
                    .pretrain
                    .as_ref()
                    .ok_or(Error::MissingPretrain(mode.as_str()))?;
                per_class
                    .chunks_exact(classes)
                    .flat_map(|row| {
                        let star = row.iter().sum::<f64>() / classes as f64;
                        std::iter::repeat_n(star, classes)
                    })
                    .collect()
            }
            NormalizationMode::None | NormalizationMode::Test => zeros(),
        };
        let e_test = if mode.needs_test() {
            means.test.clone()
        } else {
            zeros()
        };
        Ok(ReferenceStats {
            mode,
            prompts,
            classes,
            e_pretrain,
            e_test,
            pretrain_used: mode.needs_pretrain(),
            test_used: mode.needs_test(),
            n_test: means.n_test,
            n_pretrain: if mode.needs_pretrain() {
                means.n_pretrain
            } else {
                0
            },
        })
    }

    pub fn mode(&self) -> NormalizationMode {
        self.mode
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n_test(&self) -> usize {
        self.n_test
    }

    pub fn n_pretrain(&self) -> usize {
        self.n_pretrain
    }

    pub fn pretrain_used(&self) -> bool {
        self.pretrain_used
    }

    pub fn test_used(&self) -> bool {
        self.test_used
    }

    pub fn e_pretrain(&self, prompt: usize) -> &[f64] {
        &self.e_pretrain[prompt * self.classes..(prompt + 1) * self.classes]
    }

    /// The single class-averaged pretrain reference of a prompt under `PretrainStar`.
    pub fn e_pretrain_star(&self, prompt: usize) -> Option<f64> {
        (self.mode == NormalizationMode::PretrainStar).then(|| self.e_pretrain(prompt)[0])
    }

    pub fn e_test(&self, prompt: usize) -> &[f64] {
        &self.e_test[prompt * self.classes..(prompt + 1) * self.classes]
    }

    /// The length-C vector subtracted from every logit row of `prompt`.
    pub fn offset(&self, prompt: usize) -> Vec<f64> {
        let pre = self.e_pretrain(prompt);
        let test = self.e_test(prompt);
        match self.mode {
            NormalizationMode::None => vec![0.0; self.classes],
            NormalizationMode::Pretrain | NormalizationMode::PretrainStar => pre.to_vec(),
            NormalizationMode::Test => test.to_vec(),
            NormalizationMode::Both => pre.iter().zip(test).map(|(a, b)| (a + b) / 2.0).collect(),
        }
    }
}

/// Expected logits for `mode` from the test cube and optional pretrain cube.
pub fn reference_stats(
    cube: &dyn LogitsSource,
    pretrain: Option<&dyn LogitsSource>,
    mode: NormalizationMode,
) -> Result<ReferenceStats> {
    if mode.needs_pretrain() && pretrain.is_none() {
        return Err(Error::MissingPretrain(mode.as_str()));
    }
    let pretrain = if mode.needs_pretrain() {
        pretrain
    } else {
        None
    };
    ReferenceStats::from_means(&LogitMeans::compute(cube, pretrain)?, mode)
}
