//! Weighted and masked prompt ensembles, prediction, and top-1 evaluation.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{
    normalized_max_logit_score, per_example_scores, LogitMeans, LogitsSource, NormalizationMode,
    PerExampleScores, ReferenceStats,
};
use crate::tensor::Tensor;
use crate::weighting::{
    apply_weighting, apply_weighting_masked, select_prompts, SelectionMask, WeightVector,
    WeightingScheme,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub tau: f64,
}

/// One point of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub normalization: NormalizationMode,
    pub weighting: WeightingScheme,
    pub selection: Option<Selection>,
    pub per_example: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            normalization: NormalizationMode::Both,
            weighting: WeightingScheme::default(),
            selection: None,
            per_example: false,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        self.weighting.validate()?;
        if let Some(Selection { tau }) = self.selection {
            if !tau.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "tau must be finite, got {tau}"
                )));
            }
        }
        Ok(())
    }

    /// Cartesian product in row-major order: mode, scheme, selection, per-example.
    pub fn grid(
        modes: &[NormalizationMode],
        schemes: &[WeightingScheme],
        selections: &[Option<f64>],
        per_example: &[bool],
    ) -> Vec<EnsembleConfig> {
        let mut out = Vec::new();
        for &normalization in modes {
            for &weighting in schemes {
                for &tau in selections {
                    for &pe in per_example {
                        out.push(EnsembleConfig {
                            normalization,
                            weighting,
                            selection: tau.map(|tau| Selection { tau }),
                            per_example: pe,
                        });
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for EnsembleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "norm={} weighting={}",
            self.normalization, self.weighting
        )?;
        if let Some(s) = self.selection {
            write!(f, " tau={}", s.tau)?;
        }
        if self.per_example {
            f.write_str(" per-example")?;
        }
        Ok(())
    }
}

/// N×C ensembled logits in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembledLogits {
    images: usize,
    classes: usize,
    values: Vec<f64>,
}

impl EnsembledLogits {
    pub fn new(images: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if images * classes != values.len() || images == 0 || classes == 0 {
            return Err(Error::dims(format!(
                "{images}x{classes} ensembled logits need {} values, got {}",
                images * classes,
                values.len()
            )));
        }
        Ok(EnsembledLogits {
            images,
            classes,
            values,
        })
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, image: usize) -> &[f64] {
        &self.values[image * self.classes..(image + 1) * self.classes]
    }

    /// Rank-2 f32 tensor for writing to disk.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f32(
            vec![self.images, self.classes],
            self.values.iter().map(|&v| v as f32).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub predicted: Vec<u32>,
    pub classes: usize,
    pub ensembled_logits: Option<EnsembledLogits>,
    pub config: Option<EnsembleConfig>,
    pub selected_count: Option<usize>,
}

impl PredictionResult {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_u32(vec![self.predicted.len()], self.predicted.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: Option<EnsembleConfig>,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
    pub selected_count: Option<usize>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mask_flags(mask: Option<&SelectionMask>, prompts: usize) -> Result<Vec<bool>> {
    match mask {
        None => Ok(vec![true; prompts]),
        Some(m) => {
            if m.len() != prompts {
                return Err(Error::LengthMismatch {
                    left: m.len(),
                    right: prompts,
                });
            }
            if m.count() == 0 {
                return Err(Error::EmptyMask);
            }
            Ok(m.selected.clone())
        }
    }
}

/// Accumulates (1/P) Σ_p weight(p, n) · logits[p, n, c] over the selected
/// prompts, in ascending prompt order.
fn accumulate(
    cube: &dyn LogitsSource,
    selected: &[bool],
    weight: impl Fn(usize, usize) -> f64 + Sync,
) -> EnsembledLogits {
    let shape = cube.shape();
    let mut acc = vec![0f64; shape.slab_len()];
    for p in (0..shape.prompts).filter(|&p| selected[p]) {
        let slab = cube.prompt_logits(p);
        acc.par_chunks_mut(shape.classes)
            .zip(slab.par_chunks(shape.classes))
            .enumerate()
            .for_each(|(n, (out, logits))| {
                let w = weight(p, n);
                for (o, &x) in out.iter_mut().zip(logits) {
                    *o += w * f64::from(x);
                }
            });
    }
    let prompts = shape.prompts as f64;
    acc.iter_mut().for_each(|v| *v /= prompts);
    EnsembledLogits {
        images: shape.images,
        classes: shape.classes,
        values: acc,
    }
}

/// out[n, c] = (1/P) Σ_p w_p · m_p · logits[p, n, c].
pub fn ensemble_logits(
    cube: &dyn LogitsSource,
    weights: &WeightVector,
    mask: Option<&SelectionMask>,
) -> Result<EnsembledLogits> {
    let shape = cube.shape();
    if weights.len() != shape.prompts {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: shape.prompts,
        });
    }
    let selected = mask_flags(mask, shape.prompts)?;
    Ok(accumulate(cube, &selected, |p, _| weights.weights[p]))
}

/// Argmax per row; the lowest class index wins ties.
pub fn predict(ensembled: &EnsembledLogits) -> PredictionResult {
    let predicted = (0..ensembled.images)
        .map(|n| crate::weighting::argmax(ensembled.row(n)) as u32)
        .collect();
    PredictionResult {
        predicted,
        classes: ensembled.classes,
        ensembled_logits: None,
        config: None,
        selected_count: None,
    }
}

pub fn evaluate(pred: &PredictionResult, labels: &Tensor) -> Result<EvalReport> {
    let labels = labels.expect_u32(1, "labels")?;
    evaluate_labels(pred, labels)
}

pub fn evaluate_labels(pred: &PredictionResult, labels: &[u32]) -> Result<EvalReport> {
    if labels.len() != pred.predicted.len() {
        return Err(Error::LengthMismatch {
            left: pred.predicted.len(),
            right: labels.len(),
        });
    }
    if let Some((index, &label)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= pred.classes)
    {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            classes: pred.classes,
        });
    }
    let n_correct = pred
        .predicted
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let n_total = labels.len();
    Ok(EvalReport {
        config: pred.config,
        accuracy: n_correct as f64 / n_total as f64,
        n_correct,
        n_total,
        selected_count: pred.selected_count,
    })
}

/// Per-image weights: column n of `scores` goes through `scheme` on its own.
pub fn per_example_ensemble(
    cube: &dyn LogitsSource,
    scores: &PerExampleScores,
    scheme: WeightingScheme,
    mask: Option<&SelectionMask>,
) -> Result<PredictionResult> {
    let ensembled = per_example_ensemble_logits(cube, scores, scheme, mask)?;
    let mut result = predict(&ensembled);
    result.ensembled_logits = Some(ensembled);
    Ok(result)
}

pub fn per_example_ensemble_logits(
    cube: &dyn LogitsSource,
    scores: &PerExampleScores,
    scheme: WeightingScheme,
    mask: Option<&SelectionMask>,
) -> Result<EnsembledLogits> {
    let shape = cube.shape();
    if scores.prompts() != shape.prompts || scores.images() != shape.images {
        return Err(Error::dims(format!(
            "per-example scores are {}x{}, cube has {} prompts and {} images",
            scores.prompts(),
            scores.images(),
            shape.prompts,
            shape.images
        )));
    }
    let selected = mask_flags(mask, shape.prompts)?;
    // image-major: weights[n * P + p]
    let weights: Vec<f64> = (0..shape.images)
        .into_par_iter()
        .map(|n| apply_weighting_masked(&scores.column(n), scheme, &selected).map(|w| w.weights))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let prompts = shape.prompts;
    Ok(accumulate(cube, &selected, |p, n| weights[n * prompts + p]))
}

/// Scores, selects, weights, ensembles and predicts for one configuration,
/// reusing precomputed mean logits.
pub fn run_config(
    cube: &dyn LogitsSource,
    means: &LogitMeans,
    config: &EnsembleConfig,
) -> Result<PredictionResult> {
    config.validate()?;
    let mode = config.normalization;
    let stats = ReferenceStats::from_means(means, mode)?;
    let (dataset, per_example) = if config.per_example {
        let pe = per_example_scores(cube, &stats, mode)?;
        (pe.mean_over_images(), Some(pe))
    } else {
        (normalized_max_logit_score(cube, &stats, mode)?, None)
    };
    let mask = config
        .selection
        .map(|s| select_prompts(&dataset.scores, s.tau))
        .transpose()?;
    let mut result = match &per_example {
        Some(pe) => per_example_ensemble(cube, pe, config.weighting, mask.as_ref())?,
        None => {
            let weights = match &mask {
                Some(m) => apply_weighting_masked(&dataset.scores, config.weighting, &m.selected)?,
                None => apply_weighting(&dataset.scores, config.weighting),
            };
            let ensembled = ensemble_logits(cube, &weights, mask.as_ref())?;
            let mut r = predict(&ensembled);
            r.ensembled_logits = Some(ensembled);
            r
        }
    };
    result.config = Some(*config);
    result.selected_count = mask.map(|m| m.count());
    Ok(result)
}

/// Equal-average ensemble: every prompt weighted 1.
pub fn equal_average(cube: &dyn LogitsSource) -> Result<PredictionResult> {
    let ensembled = ensemble_logits(cube, &WeightVector::uniform(cube.shape().prompts), None)?;
    let mut r = predict(&ensembled);
    r.ensembled_logits = Some(ensembled);
    Ok(r)
}

/// One report per configuration, in grid order. Mean logits are computed once.
pub fn run_ablation_grid(
    cube: &dyn LogitsSource,
    pretrain: Option<&dyn LogitsSource>,
    labels: &Tensor,
    grid: &[EnsembleConfig],
) -> Result<Vec<EvalReport>> {
    let labels = labels.expect_u32(1, "labels")?;
    let needs_pretrain = grid.iter().any(|c| c.normalization.needs_pretrain());
    let means = LogitMeans::compute(cube, if needs_pretrain { pretrain } else { None })?;
    grid.iter()
        .map(|config| evaluate_labels(&run_config(cube, &means, config)?, labels))
        .collect()
}

/// CSV with header `norm,weighting,selection_tau,per_example,accuracy`.
pub fn ablation_csv(reports: &[EvalReport]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::InvalidConfig(format!("csv encoding failed: {e}"));
    writer
        .write_record([
            "norm",
            "weighting",
            "selection_tau",
            "per_example",
            "accuracy",
        ])
        .map_err(io)?;
    for report in reports {
        let config = report
            .config
            .ok_or_else(|| Error::InvalidConfig("ablation row without config".into()))?;
        writer
            .write_record([
                config.normalization.as_str().to_string(),
                config.weighting.name().to_string(),
                config
                    .selection
                    .map(|s| s.tau.to_string())
                    .unwrap_or_default(),
                config.per_example.to_string(),
                report.accuracy.to_string(),
            ])
            .map_err(io)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::InvalidConfig(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_ablation_csv(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ablation_csv(reports)?).map_err(|e| Error::io(path, e))
}
