//! Per-prompt suitability scores.
//!
//! The raw score of a prompt is the mean over test images of the maximum
//! class logit. The normalized score first subtracts an expected-logit
//! reference (pretrain images, test images, or their average) from every
//! logit, which removes prompt-level offsets that inflate the max without
//! helping discrimination.
//!
//! All reductions run in f64 in ascending index order, so results do not
//! depend on the number of worker threads.

mod logits;
mod reference;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub(crate) use logits::dot;
pub use logits::{
    compute_logits, load_logits_cube, materialize, CubeShape, EmbeddingLogits, LogitsCube,
    LogitsSource, Provenance,
};
pub use reference::{reference_stats, LogitMeans, NormalizationMode, ReferenceStats};

use crate::error::{Error, Result};

/// One score per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub mode: NormalizationMode,
    pub per_example: bool,
    pub n_test: usize,
    pub n_pretrain: usize,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// One score per (prompt, image), stored prompt-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleScores {
    pub mode: NormalizationMode,
    pub n_test: usize,
    pub n_pretrain: usize,
    prompts: usize,
    images: usize,
    scores: Vec<f64>,
}

impl PerExampleScores {
    pub fn new(mode: NormalizationMode, n_pretrain: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let prompts = rows.len();
        let images = rows.first().map_or(0, Vec::len);
        if prompts == 0 || images == 0 {
            return Err(Error::dims(
                "per-example scores need at least one prompt and image",
            ));
        }
        if rows.iter().any(|r| r.len() != images) {
            return Err(Error::dims("per-example score rows have unequal lengths"));
        }
        Ok(PerExampleScores {
            mode,
            n_test: images,
            n_pretrain,
            prompts,
            images,
            scores: rows.concat(),
        })
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn get(&self, prompt: usize, image: usize) -> f64 {
        self.scores[prompt * self.images + image]
    }

    pub fn prompt_row(&self, prompt: usize) -> &[f64] {
        &self.scores[prompt * self.images..(prompt + 1) * self.images]
    }

    /// Scores of every prompt for one image.
    pub fn column(&self, image: usize) -> Vec<f64> {
        (0..self.prompts).map(|p| self.get(p, image)).collect()
    }

    /// Mean over images, i.e. the dataset-level score vector.
    pub fn mean_over_images(&self) -> ScoreVector {
        ScoreVector {
            mode: self.mode,
            per_example: false,
            n_test: self.n_test,
            n_pretrain: self.n_pretrain,
            scores: (0..self.prompts)
                .map(|p| mean(self.prompt_row(p)))
                .collect(),
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per image, the max over classes of `logit - offset[class]`.
fn max_normalized_logits(slab: &[f32], offset: &[f64]) -> Vec<f64> {
    slab.chunks_exact(offset.len())
        .map(|row| {
            row.iter()
                .zip(offset)
                .map(|(&x, &o)| f64::from(x) - o)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn check_stats(
    cube: &dyn LogitsSource,
    stats: &ReferenceStats,
    mode: NormalizationMode,
) -> Result<()> {
    if stats.mode() != mode {
        return Err(Error::ModeMismatch {
            stats: stats.mode().as_str(),
            requested: mode.as_str(),
        });
    }
    let shape = cube.shape();
    if stats.prompts() != shape.prompts || stats.classes() != shape.classes {
        return Err(Error::dims(format!(
            "reference statistics are {}x{}, cube has {} prompts and {} classes",
            stats.prompts(),
            stats.classes(),
            shape.prompts,
            shape.classes
        )));
    }
    Ok(())
}

/// Raw max-logit score: s_p = mean_n max_c logits[p, n, c].
pub fn max_logit_score(cube: &dyn LogitsSource) -> ScoreVector {
    let shape = cube.shape();
    let zeros = vec![0f64; shape.classes];
    let scores = (0..shape.prompts)
        .into_par_iter()
        .map(|p| mean(&max_normalized_logits(&cube.prompt_logits(p), &zeros)))
        .collect();
    ScoreVector {
        mode: NormalizationMode::None,
        per_example: false,
        n_test: shape.images,
        n_pretrain: 0,
        scores,
    }
}

/// Normalized max-logit score: the raw score computed on logits minus the
/// mode's expected-logit reference.
pub fn normalized_max_logit_score(
    cube: &dyn LogitsSource,
    stats: &ReferenceStats,
    mode: NormalizationMode,
) -> Result<ScoreVector> {
    let per_example = per_example_scores(cube, stats, mode)?;
    Ok(per_example.mean_over_images())
}

/// Normalized max logit of every (prompt, image) pair, without the mean over images.
///
/// The reference is always the dataset-level statistic in `stats`.
pub fn per_example_scores(
    cube: &dyn LogitsSource,
    stats: &ReferenceStats,
    mode: NormalizationMode,
) -> Result<PerExampleScores> {
    check_stats(cube, stats, mode)?;
    let shape = cube.shape();
    let rows: Vec<Vec<f64>> = (0..shape.prompts)
        .into_par_iter()
        .map(|p| max_normalized_logits(&cube.prompt_logits(p), &stats.offset(p)))
        .collect();
    PerExampleScores::new(mode, stats.n_pretrain(), rows)
}

/// Reference statistics and dataset-level scores in one call.
pub fn score(
    cube: &dyn LogitsSource,
    pretrain: Option<&dyn LogitsSource>,
    mode: NormalizationMode,
) -> Result<ScoreVector> {
    let stats = reference_stats(cube, pretrain, mode)?;
    normalized_max_logit_score(cube, &stats, mode)
}

/// Scores a ZPT logits cube, with an optional ZPT pretrain cube.
pub fn score_from_logits(
    cube_path: impl AsRef<Path>,
    pretrain_path: Option<&Path>,
    mode: NormalizationMode,
) -> Result<ScoreVector> {
    let cube = load_logits_cube(cube_path)?;
    let pretrain = pretrain_path.map(load_logits_cube).transpose()?;
    score(
        &cube,
        pretrain.as_ref().map(|c| c as &dyn LogitsSource),
        mode,
    )
}

/// Dataset-level or per-example scores, as stored in a score JSON file.
#[derive(Debug, Clone, PartialEq)]
pub enum Scores {
    Dataset(ScoreVector),
    PerExample(PerExampleScores),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScorePayload {
    Flat(Vec<f64>),
    Nested(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
struct ScoreFile {
    mode: NormalizationMode,
    per_example: bool,
    n_test: usize,
    n_pretrain: usize,
    scores: ScorePayload,
}

impl Scores {
    pub fn mode(&self) -> NormalizationMode {
        match self {
            Scores::Dataset(s) => s.mode,
            Scores::PerExample(s) => s.mode,
        }
    }

    pub fn prompts(&self) -> usize {
        match self {
            Scores::Dataset(s) => s.len(),
            Scores::PerExample(s) => s.prompts(),
        }
    }

    /// Dataset-level scores; per-example scores are averaged over images.
    pub fn dataset(&self) -> ScoreVector {
        match self {
            Scores::Dataset(s) => s.clone(),
            Scores::PerExample(s) => s.mean_over_images(),
        }
    }

    /// Serializes to the score JSON schema. Per-example scores are written as
    /// one array per prompt.
    pub fn to_json(&self) -> String {
        let file = match self {
            Scores::Dataset(s) => ScoreFile {
                mode: s.mode,
                per_example: false,
                n_test: s.n_test,
                n_pretrain: s.n_pretrain,
                scores: ScorePayload::Flat(s.scores.clone()),
            },
            Scores::PerExample(s) => ScoreFile {
                mode: s.mode,
                per_example: true,
                n_test: s.n_test,
                n_pretrain: s.n_pretrain,
                scores: ScorePayload::Nested(
                    (0..s.prompts()).map(|p| s.prompt_row(p).to_vec()).collect(),
                ),
            },
        };
        serde_json::to_string_pretty(&file).expect("scores serialize")
    }

    pub fn from_json(json: &str, origin: &Path) -> Result<Self> {
        let file: ScoreFile = serde_json::from_str(json).map_err(|e| Error::parse(origin, e))?;
        let bad = |msg: &str| Error::parse(origin, msg);
        match (file.per_example, file.scores) {
            (false, ScorePayload::Flat(scores)) => {
                if scores.is_empty() {
                    return Err(bad("scores are empty"));
                }
                if scores.iter().any(|s| !s.is_finite()) {
                    return Err(bad("scores must be finite"));
                }
                Ok(Scores::Dataset(ScoreVector {
                    mode: file.mode,
                    per_example: false,
                    n_test: file.n_test,
                    n_pretrain: file.n_pretrain,
                    scores,
                }))
            }
            (true, ScorePayload::Nested(rows)) => {
                if rows.iter().flatten().any(|s| !s.is_finite()) {
                    return Err(bad("scores must be finite"));
                }
                let mut s = PerExampleScores::new(file.mode, file.n_pretrain, rows)?;
                s.n_test = file.n_test;
                Ok(Scores::PerExample(s))
            }
            (true, ScorePayload::Flat(_)) => Err(bad("per-example scores must be nested arrays")),
            (false, ScorePayload::Nested(_)) => Err(bad("dataset scores must be a flat array")),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(prompts: usize, images: usize, classes: usize, data: Vec<f32>) -> LogitsCube {
        LogitsCube::new(
            CubeShape {
                prompts,
                images,
                classes,
            },
            data,
        )
        .unwrap()
    }

    /// Independent oracle: literal triple loop over (p, n, c).
    fn naive_scores(cube: &LogitsCube, offset: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let s = cube.shape();
        let mut out = Vec::new();
        for p in 0..s.prompts {
            let mut total = 0.0;
            for n in 0..s.images {
                let mut best = f64::NEG_INFINITY;
                for c in 0..s.classes {
                    let v = f64::from(cube.get(p, n, c)) - offset(p, c);
                    if v > best {
                        best = v;
                    }
                }
                total += best;
            }
            out.push(total / s.images as f64);
        }
        out
    }

    fn hand_cube() -> LogitsCube {
        cube(1, 2, 2, vec![1.0, 0.6, 0.0, 0.8])
    }

    #[test]
    fn max_logit_hand_example() {
        let c = hand_cube();
        let s = max_logit_score(&c);
        assert!((s.scores[0] - 0.9).abs() < 1e-7);
        assert!((naive_scores(&c, |_, _| 0.0)[0] - s.scores[0]).abs() < 1e-12);
        assert_eq!(s.mode, NormalizationMode::None);
    }

    #[test]
    fn single_image_and_constant_field() {
        let c = cube(2, 1, 3, vec![0.1, 0.7, 0.3, -0.2, -0.1, -0.5]);
        let s = max_logit_score(&c);
        assert!((s.scores[0] - 0.7).abs() < 1e-7);
        assert!((s.scores[1] + 0.1).abs() < 1e-7);

        let k = 0.25f32;
        let c = cube(3, 4, 2, vec![k; 24]);
        assert!(max_logit_score(&c)
            .scores
            .iter()
            .all(|&s| s == f64::from(k)));
    }

    #[test]
    fn test_mode_hand_example() {
        let c = hand_cube();
        let stats = reference_stats(&c, None, NormalizationMode::Test).unwrap();
        let e = stats.e_test(0);
        assert!((e[0] - 0.5).abs() < 1e-7 && (e[1] - 0.7).abs() < 1e-7);
        let s = normalized_max_logit_score(&c, &stats, NormalizationMode::Test).unwrap();
        assert!((s.scores[0] - 0.3).abs() < 1e-7);
        let pe = per_example_scores(&c, &stats, NormalizationMode::Test).unwrap();
        assert!((pe.get(0, 0) - 0.5).abs() < 1e-7);
        assert!((pe.get(0, 1) - 0.1).abs() < 1e-7);
    }

    #[test]
    fn self_reference_cancels() {
        let c = cube(2, 3, 2, vec![0.4; 12]);
        for mode in NormalizationMode::ALL {
            if mode == NormalizationMode::None {
                continue;
            }
            let stats = reference_stats(&c, Some(&c), mode).unwrap();
            let s = normalized_max_logit_score(&c, &stats, mode).unwrap();
            assert!(s.scores.iter().all(|&v| v.abs() < 1e-12), "{mode}");
            let pe = per_example_scores(&c, &stats, mode).unwrap();
            assert!((0..2).all(|p| pe.prompt_row(p).iter().all(|v| v.abs() < 1e-12)));
        }
    }

    #[test]
    fn none_mode_matches_raw_exactly() {
        let c = cube(
            2,
            3,
            2,
            vec![
                0.1, 0.9, -0.3, 0.2, 0.5, 0.5, 0.0, 0.7, 0.33, 0.31, -1.0, 0.4,
            ],
        );
        let stats = reference_stats(&c, None, NormalizationMode::None).unwrap();
        let a = normalized_max_logit_score(&c, &stats, NormalizationMode::None).unwrap();
        let b = max_logit_score(&c);
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn per_example_single_image_equals_dataset() {
        let c = cube(3, 1, 2, vec![0.1, 0.9, -0.3, 0.2, 0.5, 0.4]);
        let stats = reference_stats(&c, Some(&c), NormalizationMode::Both).unwrap();
        let ds = normalized_max_logit_score(&c, &stats, NormalizationMode::Both).unwrap();
        let pe = per_example_scores(&c, &stats, NormalizationMode::Both).unwrap();
        assert_eq!(pe.column(0), ds.scores);
    }

    #[test]
    fn mode_mismatch_rejected() {
        let c = hand_cube();
        let stats = reference_stats(&c, None, NormalizationMode::Test).unwrap();
        assert!(matches!(
            normalized_max_logit_score(&c, &stats, NormalizationMode::None),
            Err(Error::ModeMismatch { .. })
        ));
        let other = cube(2, 2, 2, vec![0.0; 8]);
        assert!(matches!(
            per_example_scores(&other, &stats, NormalizationMode::Test),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn score_json_round_trip() {
        let c = cube(2, 2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let stats = reference_stats(&c, None, NormalizationMode::Test).unwrap();
        let ds = Scores::Dataset(
            normalized_max_logit_score(&c, &stats, NormalizationMode::Test).unwrap(),
        );
        let json = ds.to_json();
        assert!(json.contains("\"mode\": \"test\""));
        assert_eq!(Scores::from_json(&json, Path::new("m")).unwrap(), ds);

        let pe =
            Scores::PerExample(per_example_scores(&c, &stats, NormalizationMode::Test).unwrap());
        assert_eq!(
            Scores::from_json(&pe.to_json(), Path::new("m")).unwrap(),
            pe
        );

        let bad = r#"{"mode":"both","per_example":true,"n_test":1,"n_pretrain":0,"scores":[1.0]}"#;
        assert!(Scores::from_json(bad, Path::new("m")).is_err());
    }

    #[test]
    fn nan_cube_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.zpt");
        let mut bytes = hand_cube().to_tensor().to_bytes();
        let at = bytes.len() - 4;
        bytes[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            score_from_logits(&path, None, NormalizationMode::None),
            Err(Error::NonFinitePayload { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_cube(prompts: usize) -> impl Strategy<Value = LogitsCube> {
            (1usize..6, 1usize..5).prop_flat_map(move |(images, classes)| {
                proptest::collection::vec(-1.0f32..1.0, prompts * images * classes)
                    .prop_map(move |data| cube(prompts, images, classes, data))
            })
        }

        fn shift_prompt(c: &LogitsCube, prompt: usize, by: f32) -> LogitsCube {
            let s = c.shape();
            let mut data = c.values().to_vec();
            for v in &mut data[prompt * s.slab_len()..(prompt + 1) * s.slab_len()] {
                *v += by;
            }
            cube(s.prompts, s.images, s.classes, data)
        }

        proptest! {
            #[test]
            fn oracle_agreement(c in arb_cube(3), pre in arb_cube(3)) {
                prop_assume!(c.shape().classes == pre.shape().classes);
                for mode in NormalizationMode::ALL {
                    let stats = reference_stats(&c, Some(&pre), mode).unwrap();
                    let got = normalized_max_logit_score(&c, &stats, mode).unwrap();
                    let want = naive_scores(&c, |p, k| stats.offset(p)[k]);
                    for (g, w) in got.scores.iter().zip(&want) {
                        prop_assert!((g - w).abs() < 1e-9);
                    }
                }
            }

            #[test]
            fn per_example_mean_matches_dataset(c in arb_cube(2), pre in arb_cube(2)) {
                prop_assume!(c.shape().classes == pre.shape().classes);
                for mode in NormalizationMode::ALL {
                    let stats = reference_stats(&c, Some(&pre), mode).unwrap();
                    let ds = normalized_max_logit_score(&c, &stats, mode).unwrap();
                    let pe = per_example_scores(&c, &stats, mode).unwrap();
                    for (a, b) in pe.mean_over_images().scores.iter().zip(&ds.scores) {
                        prop_assert!((a - b).abs() < 1e-6);
                    }
                }
            }

            #[test]
            fn shift_invariance(c in arb_cube(3), pre in arb_cube(3), shift in -0.5f32..2.0, prompt in 0usize..3) {
                prop_assume!(c.shape().classes == pre.shape().classes);
                let joint = [NormalizationMode::Both, NormalizationMode::Pretrain, NormalizationMode::PretrainStar];
                for mode in joint {
                    let before = score(&c, Some(&pre), mode).unwrap();
                    let after = score(&shift_prompt(&c, prompt, shift), Some(&shift_prompt(&pre, prompt, shift)), mode).unwrap();
                    prop_assert!((before.scores[prompt] - after.scores[prompt]).abs() < 1e-5);
                }
                let before = score(&c, None, NormalizationMode::Test).unwrap();
                let after = score(&shift_prompt(&c, prompt, shift), None, NormalizationMode::Test).unwrap();
                prop_assert!((before.scores[prompt] - after.scores[prompt]).abs() < 1e-5);
            }

            #[test]
            fn raw_score_monotone(c in arb_cube(2), eps in 0.01f32..0.5) {
                let before = max_logit_score(&c);
                let after = max_logit_score(&shift_prompt(&c, 1, eps));
                let diff = after.scores[1] - before.scores[1];
                // the shift itself is rounded to f32 per entry
                prop_assert!((diff - f64::from(eps)).abs() < 1e-6);
                prop_assert_eq!(after.scores[0], before.scores[0]);
            }
        }
    }
}
