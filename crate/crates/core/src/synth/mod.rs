//! Deterministic synthetic fixtures with planted biases.
//!
//! Coordinates: the first D - 2 dimensions carry class content, dimension
//! D - 2 is a neutral style direction used by ordinary prompts, and dimension
//! D - 1 is the bias direction. Every image, test and pretrain alike, has
//! component `bias_offset` along the bias direction. A biased prompt is a
//! copy of one good prompt (its twin) with its style component moved onto
//! the bias direction, so its logits equal the twin's plus the constant
//! `style_weight * bias_offset`.
//!
//! Randomness comes from ChaCha20 keyed by the seed (see [`SynthRng`]), drawn
//! in a fixed order so fixtures can be regenerated in other languages.

mod oracle;

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub use oracle::{oracle_pipeline, OracleOutput};

use crate::diagnostics::{FrequencyScale, FrequencyTable};
use crate::error::{Error, Result};
use crate::prompt::{ClassList, PromptPool};
use crate::scoring::{compute_logits, LogitsCube};
use crate::tensor::{write_tensor, EmbeddingMatrix, Tensor};

/// Largest bias coefficient of a word embedding; reached by the most frequent word.
pub const WORD_BIAS_MAX: f64 = 0.9;
/// Log-counts of synthetic words are uniform on [0, this].
pub const MAX_LOG_COUNT: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub prompts: usize,
    pub images: usize,
    pub classes: usize,
    pub dim: usize,
    pub pretrain_images: usize,
    pub n_biased_prompts: usize,
    pub bias_offset: f64,
    pub class_separation: f64,
    /// Jitter of the best good prompt; the weakest gets `jitter_max`.
    pub jitter_min: f64,
    pub jitter_max: f64,
    /// Weight of the style (or, for biased prompts, bias) direction in a prompt.
    pub style_weight: f64,
    /// Number of words in the frequency-bias fixture; 0 skips it.
    pub words: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            prompts: 8,
            images: 64,
            classes: 4,
            dim: 16,
            pretrain_images: 64,
            n_biased_prompts: 1,
            bias_offset: 0.3,
            class_separation: 1.0,
            jitter_min: 0.1,
            jitter_max: 0.6,
            style_weight: 0.5,
            words: 0,
        }
    }
}

impl SynthSpec {
    pub fn with_seed(seed: u64) -> Self {
        SynthSpec {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        for (name, v) in [
            ("prompts", self.prompts),
            ("images", self.images),
            ("classes", self.classes),
            ("pretrain_images", self.pretrain_images),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.dim < 3 {
            return bad(format!("dim must be at least 3, got {}", self.dim));
        }
        if self.n_biased_prompts >= self.prompts {
            return bad(format!(
                "n_biased_prompts ({}) must be less than prompts ({})",
                self.n_biased_prompts, self.prompts
            ));
        }
        if !(0.0..1.0).contains(&self.bias_offset) {
            return bad(format!(
                "bias_offset must be in [0, 1), got {}",
                self.bias_offset
            ));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad(format!(
                "class_separation must be positive, got {}",
                self.class_separation
            ));
        }
        if !(self.jitter_min >= 0.0
            && self.jitter_min <= self.jitter_max
            && self.jitter_max.is_finite())
        {
            return bad(format!(
                "jitter range must satisfy 0 <= min <= max, got {}..{}",
                self.jitter_min, self.jitter_max
            ));
        }
        if !(0.0..1.0).contains(&self.style_weight) {
            return bad(format!(
                "style_weight must be in [0, 1), got {}",
                self.style_weight
            ));
        }
        if self.words == 1 || self.words == 2 {
            return bad(format!("words must be 0 or at least 3, got {}", self.words));
        }
        Ok(())
    }

    fn good_prompts(&self) -> usize {
        self.prompts - self.n_biased_prompts
    }
}

/// ChaCha20 stream keyed by the seed (little-endian u64 in the first 8 key
/// bytes, rest zero, stream 0).
///
/// `uniform` = (next_u64 >> 11) · 2⁻⁵³; `gaussian` is Box–Muller on two
/// uniforms u1, u2: sqrt(-2 ln(1 - u1)) · cos(2π u2), one value per pair.
pub struct SynthRng(ChaCha20Rng);

impl SynthRng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        SynthRng(ChaCha20Rng::from_seed(key))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn gaussians(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Builds a D-vector: `a` times the content part plus `b` on one extra axis.
fn embed(content: &[f64], a: f64, axis: usize, b: f64, dim: usize) -> Vec<f64> {
    let mut v = vec![0f64; dim];
    for (slot, x) in v.iter_mut().zip(content) {
        *slot = a * x;
    }
    v[axis] += b;
    normalize(&mut v);
    v
}

fn to_f32(rows: &[Vec<f64>]) -> Vec<f32> {
    rows.iter().flatten().map(|&x| x as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SynthSpec,
    /// Indices of the planted prompts (the last `n_biased_prompts`).
    pub biased_prompts: Vec<usize>,
    /// `twins[k]` is the good prompt that `biased_prompts[k]` copies.
    pub twins: Vec<usize>,
    /// Jitter of every prompt; biased prompts inherit their twin's.
    pub prompt_jitter: Vec<f64>,
    pub style_dim: usize,
    pub bias_dim: usize,
    /// Constant added to every logit of a biased prompt.
    pub logit_shift: f64,
}

impl Truth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }
}

/// Words whose embeddings lean toward the bias direction in proportion to
/// their log-frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct WordFixture {
    pub frequencies: FrequencyTable,
    pub embeddings: EmbeddingMatrix,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: SynthSpec,
    pub images: EmbeddingMatrix,
    pub pretrain: EmbeddingMatrix,
    /// P×C×D.
    pub class_emb: Tensor,
    pub labels: Tensor,
    pub truth: Truth,
    pub words: Option<WordFixture>,
}

impl Fixture {
    pub fn labels(&self) -> &[u32] {
        self.labels.as_u32().expect("labels are u32")
    }

    pub fn logits(&self) -> LogitsCube {
        compute_logits(&self.images, &self.class_emb).expect("fixture is consistent")
    }

    pub fn pretrain_logits(&self) -> LogitsCube {
        compute_logits(&self.pretrain, &self.class_emb).expect("fixture is consistent")
    }

    pub fn pool(&self) -> PromptPool {
        let templates = (0..self.spec.prompts)
            .map(|p| {
                if self.truth.biased_prompts.contains(&p) {
                    format!("biased prompt {p}: a {{}}.")
                } else {
                    format!("prompt {p}: a {{}}.")
                }
            })
            .collect();
        PromptPool::new("synthetic", templates).expect("generated templates are valid")
    }

    pub fn class_list(&self) -> ClassList {
        ClassList::new(
            (0..self.spec.classes)
                .map(|c| format!("class{c}"))
                .collect(),
        )
        .expect("generated class names are valid")
    }

    /// Writes `images.zpt`, `pretrain.zpt`, `class_emb.zpt`, `labels.zpt`,
    /// `truth.json`, `pool.json`, `classes.json`, and with words,
    /// `word_emb.zpt` and `word_freq.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(self.images.tensor(), dir.join("images.zpt"))?;
        write_tensor(self.pretrain.tensor(), dir.join("pretrain.zpt"))?;
        write_tensor(&self.class_emb, dir.join("class_emb.zpt"))?;
        write_tensor(&self.labels, dir.join("labels.zpt"))?;
        let text = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))
        };
        text("truth.json", self.truth.to_json())?;
        text("pool.json", self.pool().to_json())?;
        text("classes.json", self.class_list().to_json())?;
        if let Some(words) = &self.words {
            write_tensor(words.embeddings.tensor(), dir.join("word_emb.zpt"))?;
            let path = dir.join("word_freq.csv");
            fs::write(&path, words.frequencies.to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Generates a fixture. Draw order: anchors (only when C > D - 2), prompt
/// jitter per good prompt and class, test image noise, pretrain image
/// directions, then per word its content direction and a uniform log-count.
pub fn generate(spec: &SynthSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = SynthRng::new(spec.seed);
    let d = spec.dim;
    let k = d - 2;
    let (style_dim, bias_dim) = (d - 2, d - 1);

    let anchors: Vec<Vec<f64>> = if spec.classes <= k {
        (0..spec.classes)
            .map(|c| {
                let mut a = vec![0f64; k];
                a[c] = 1.0;
                a
            })
            .collect()
    } else {
        (0..spec.classes)
            .map(|_| {
                let mut a = rng.gaussians(k);
                normalize(&mut a);
                a
            })
            .collect()
    };

    let good = spec.good_prompts();
    let jitter: Vec<f64> = (0..good)
        .map(|p| {
            if good == 1 {
                spec.jitter_min
            } else {
                spec.jitter_min + (spec.jitter_max - spec.jitter_min) * p as f64 / (good - 1) as f64
            }
        })
        .collect();
    // content direction of every good prompt's class embeddings
    let content: Vec<Vec<Vec<f64>>> = jitter
        .iter()
        .map(|&sigma| {
            anchors
                .iter()
                .map(|a| {
                    let mut j = rng.gaussians(k);
                    normalize(&mut j);
                    let mut v: Vec<f64> = a.iter().zip(&j).map(|(x, y)| x + sigma * y).collect();
                    normalize(&mut v);
                    v
                })
                .collect()
        })
        .collect();
    let twins: Vec<usize> = (0..spec.n_biased_prompts)
        .map(|b| good - 1 - b % good)
        .collect();
    let biased_prompts: Vec<usize> = (good..spec.prompts).collect();

    let g = spec.style_weight;
    let gc = (1.0 - g * g).sqrt();
    let mut class_rows = Vec::with_capacity(spec.prompts * spec.classes);
    for p in 0..spec.prompts {
        let (source, axis) = if p < good {
            (p, style_dim)
        } else {
            (twins[p - good], bias_dim)
        };
        for v in &content[source] {
            class_rows.push(embed(v, gc, axis, g, d));
        }
    }

    let o = spec.bias_offset;
    let oc = (1.0 - o * o).sqrt();
    let noise_scale = 1.0 / (k as f64).sqrt();
    let labels: Vec<u32> = (0..spec.images)
        .map(|n| (n % spec.classes) as u32)
        .collect();
    let image_rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            let noise = rng.gaussians(k);
            let mut u: Vec<f64> = anchors[y as usize]
                .iter()
                .zip(&noise)
                .map(|(a, e)| spec.class_separation * a + noise_scale * e)
                .collect();
            normalize(&mut u);
            embed(&u, oc, bias_dim, o, d)
        })
        .collect();
    let pretrain_rows: Vec<Vec<f64>> = (0..spec.pretrain_images)
        .map(|_| {
            let mut u = rng.gaussians(k);
            normalize(&mut u);
            embed(&u, oc, bias_dim, o, d)
        })
        .collect();

    let words = if spec.words > 0 {
        let mut rows = Vec::with_capacity(spec.words);
        let mut counts = Vec::with_capacity(spec.words);
        for _ in 0..spec.words {
            let mut v = rng.gaussians(k);
            normalize(&mut v);
            let log_count = MAX_LOG_COUNT * rng.uniform();
            let h = WORD_BIAS_MAX * log_count / MAX_LOG_COUNT;
            rows.push(embed(&v, (1.0 - h * h).sqrt(), bias_dim, h, d));
            counts.push(log_count);
        }
        let names = (0..spec.words).map(|w| format!("word{w}")).collect();
        Some(WordFixture {
            frequencies: FrequencyTable::new(names, counts, FrequencyScale::Log)?,
            embeddings: EmbeddingMatrix::from_rows(spec.words, d, to_f32(&rows))?,
        })
    } else {
        None
    };

    let mut prompt_jitter = jitter.clone();
    prompt_jitter.extend(twins.iter().map(|&t| jitter[t]));
    Ok(Fixture {
        spec: spec.clone(),
        images: EmbeddingMatrix::from_rows(spec.images, d, to_f32(&image_rows))?,
        pretrain: EmbeddingMatrix::from_rows(spec.pretrain_images, d, to_f32(&pretrain_rows))?,
        class_emb: Tensor::from_f32(vec![spec.prompts, spec.classes, d], to_f32(&class_rows))?,
        labels: Tensor::from_u32(vec![spec.images], labels)?,
        truth: Truth {
            spec: spec.clone(),
            biased_prompts,
            twins,
            prompt_jitter,
            style_dim,
            bias_dim,
            logit_shift: g * o,
        },
        words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::EmbeddingMatrix;

    fn max_norm_error(m: &EmbeddingMatrix) -> f64 {
        (0..m.rows())
            .map(|i| (crate::tensor::row_norm(m.row(i)) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec {
            words: 50,
            ..SynthSpec::with_seed(7)
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.images.tensor().to_bytes(), b.images.tensor().to_bytes());
        assert_eq!(
            a.pretrain.tensor().to_bytes(),
            b.pretrain.tensor().to_bytes()
        );
        assert_eq!(a.class_emb.to_bytes(), b.class_emb.to_bytes());
        assert_eq!(a.words, b.words);
        let c = generate(&SynthSpec::with_seed(8)).unwrap();
        assert_ne!(a.images.tensor().to_bytes(), c.images.tensor().to_bytes());
    }

    #[test]
    fn rows_are_unit_norm() {
        for spec in [
            SynthSpec {
                words: 20,
                ..SynthSpec::with_seed(1)
            },
            SynthSpec {
                classes: 9,
                dim: 5,
                ..SynthSpec::with_seed(2)
            },
        ] {
            let f = generate(&spec).unwrap();
            assert!(max_norm_error(&f.images) < 1e-6);
            assert!(max_norm_error(&f.pretrain) < 1e-6);
            assert!(
                max_norm_error(
                    &f.words
                        .as_ref()
                        .map_or(f.images.clone(), |w| w.embeddings.clone())
                ) < 1e-6
            );
            let d = spec.dim;
            let class = EmbeddingMatrix::from_rows(
                spec.prompts * spec.classes,
                d,
                f.class_emb.as_f32().unwrap().to_vec(),
            )
            .unwrap();
            assert!(max_norm_error(&class) < 1e-6);
        }
    }

    #[test]
    fn biased_logits_are_shifted_twin() {
        let f = generate(&SynthSpec::with_seed(3)).unwrap();
        let cube = f.logits();
        let (b, t) = (f.truth.biased_prompts[0], f.truth.twins[0]);
        assert_eq!((b, t), (7, 6));
        for n in 0..f.spec.images {
            for c in 0..f.spec.classes {
                let diff = f64::from(cube.get(b, n, c)) - f64::from(cube.get(t, n, c));
                assert!((diff - f.truth.logit_shift).abs() < 1e-6, "{diff}");
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let base = SynthSpec::default();
        for spec in [
            SynthSpec {
                prompts: 0,
                ..base.clone()
            },
            SynthSpec {
                dim: 2,
                ..base.clone()
            },
            SynthSpec {
                n_biased_prompts: 8,
                ..base.clone()
            },
            SynthSpec {
                bias_offset: -0.1,
                ..base.clone()
            },
            SynthSpec {
                bias_offset: 1.0,
                ..base.clone()
            },
            SynthSpec {
                class_separation: 0.0,
                ..base.clone()
            },
            SynthSpec {
                jitter_min: 0.5,
                jitter_max: 0.1,
                ..base.clone()
            },
            SynthSpec {
                words: 2,
                ..base.clone()
            },
        ] {
            assert!(
                matches!(generate(&spec), Err(Error::InvalidSpec(_))),
                "{spec:?}"
            );
        }
    }

    #[test]
    fn uniform_stream_is_stable() {
        let mut a = SynthRng::new(42);
        let mut b = SynthRng::new(42);
        let xs: Vec<f64> = (0..100).map(|_| a.uniform()).collect();
        assert!(xs.iter().all(|x| (0.0..1.0).contains(x)));
        assert_eq!(xs, (0..100).map(|_| b.uniform()).collect::<Vec<_>>());
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let f = generate(&SynthSpec {
            words: 10,
            ..SynthSpec::with_seed(5)
        })
        .unwrap();
        f.write(dir.path()).unwrap();
        for name in [
            "images.zpt",
            "pretrain.zpt",
            "class_emb.zpt",
            "labels.zpt",
            "truth.json",
            "pool.json",
            "classes.json",
            "word_emb.zpt",
            "word_freq.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let back = crate::tensor::read_tensor(dir.path().join("class_emb.zpt")).unwrap();
        assert_eq!(back, f.class_emb);
    }
}
