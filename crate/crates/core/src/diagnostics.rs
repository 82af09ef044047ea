//! Word-frequency bias check and ranked prompt listings.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::prompt::PromptPool;
use crate::scoring::dot;
use crate::tensor::EmbeddingMatrix;

/// Whether the frequency column holds raw counts or log-counts. The
/// correlation is computed on whatever was supplied; this is only echoed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyScale {
    #[default]
    Raw,
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    pub words: Vec<String>,
    pub counts: Vec<f64>,
    pub scale: FrequencyScale,
}

#[derive(Deserialize)]
struct FrequencyRow {
    word: String,
    count: f64,
}

impl FrequencyTable {
    pub fn new(words: Vec<String>, counts: Vec<f64>, scale: FrequencyScale) -> Result<Self> {
        if words.len() != counts.len() {
            return Err(Error::LengthMismatch {
                left: words.len(),
                right: counts.len(),
            });
        }
        if let Some(i) = counts.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "count for {:?} is not finite",
                words[i]
            )));
        }
        if scale == FrequencyScale::Raw {
            if let Some(i) = counts.iter().position(|&c| c < 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "raw count for {:?} is negative",
                    words[i]
                )));
            }
        }
        Ok(FrequencyTable {
            words,
            counts,
            scale,
        })
    }

    /// Reads a `word,count` CSV with a header row.
    pub fn read_csv(path: impl AsRef<Path>, scale: FrequencyScale) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
        let headers = reader.headers().map_err(|e| Error::parse(path, e))?;
        if headers.iter().collect::<Vec<_>>() != ["word", "count"] {
            return Err(Error::parse(path, "expected header `word,count`"));
        }
        let mut words = Vec::new();
        let mut counts = Vec::new();
        for row in reader.deserialize::<FrequencyRow>() {
            let row = row.map_err(|e| Error::parse(path, e))?;
            words.push(row.word);
            counts.push(row.count);
        }
        Self::new(words, counts, scale)
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["word", "count"])
            .expect("in-memory csv");
        for (w, c) in self.words.iter().zip(&self.counts) {
            writer
                .write_record([w.as_str(), &c.to_string()])
                .expect("in-memory csv");
        }
        String::from_utf8(writer.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub r: f64,
    /// Two-sided p-value under a Student-t with n - 2 degrees of freedom.
    pub p: f64,
    pub n: usize,
    pub two_sided: bool,
}

/// Two-sided p-value of a sample correlation `r` over `n` pairs.
///
/// With t = r·sqrt(df / (1 - r²)), P(|T| > |t|) = I_x(df/2, 1/2) where
/// x = df / (df + t²) simplifies to 1 - r².
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let r = r.clamp(-1.0, 1.0);
    let x = (1.0 - r) * (1.0 + r);
    if x <= 0.0 {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationReport> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0f64, 0f64, 0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(CorrelationReport {
        r,
        p: correlation_p_value(r, n),
        n,
        two_sided: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordBiasReport {
    pub scale: FrequencyScale,
    /// Frequency vs mean logit over the images.
    pub raw: CorrelationReport,
    /// Frequency vs mean logit minus the pretrain expected logit.
    pub normalized: Option<CorrelationReport>,
}

impl WordBiasReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean_logits(words: &EmbeddingMatrix, images: &EmbeddingMatrix) -> Vec<f64> {
    (0..words.rows())
        .map(|w| {
            let word = words.row(w);
            let total: f64 = (0..images.rows()).map(|n| dot(images.row(n), word)).sum();
            total / images.rows() as f64
        })
        .collect()
}

/// Correlates word frequency with the mean image-word logit, before and
/// after subtracting the mean logit over pretrain images.
pub fn word_bias_report(
    freq: &FrequencyTable,
    word_emb: &EmbeddingMatrix,
    images: &EmbeddingMatrix,
    pretrain: Option<&EmbeddingMatrix>,
) -> Result<WordBiasReport> {
    if freq.len() != word_emb.rows() {
        return Err(Error::dims(format!(
            "{} frequency rows vs {} word embeddings",
            freq.len(),
            word_emb.rows()
        )));
    }
    for (what, m) in [Some(("images", images)), pretrain.map(|p| ("pretrain", p))]
        .into_iter()
        .flatten()
    {
        if m.dim() != word_emb.dim() {
            return Err(Error::dims(format!(
                "{what} have D = {}, word embeddings have D = {}",
                m.dim(),
                word_emb.dim()
            )));
        }
    }
    if freq.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: freq.len(),
        });
    }
    let avg = mean_logits(word_emb, images);
    let raw = pearson(&freq.counts, &avg)?;
    let normalized = match pretrain {
        Some(pre) => {
            let expected = mean_logits(word_emb, pre);
            let diff: Vec<f64> = avg.iter().zip(&expected).map(|(a, e)| a - e).collect();
            Some(pearson(&freq.counts, &diff)?)
        }
        None => None,
    };
    Ok(WordBiasReport {
        scale: freq.scale,
        raw,
        normalized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrompt {
    /// 1-based position in the descending order.
    pub rank: usize,
    pub index: usize,
    pub template: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreListing {
    pub pool: String,
    pub total: usize,
    /// Highest first.
    pub top: Vec<RankedPrompt>,
    /// Lowest first.
    pub bottom: Vec<RankedPrompt>,
}

impl ScoreListing {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("listing serializes")
    }
}

/// Top-k and bottom-k prompts by score; ties go to the lower prompt index.
pub fn score_report(pool: &PromptPool, values: &[f64], k: usize) -> Result<ScoreListing> {
    if values.len() != pool.len() {
        return Err(Error::LengthMismatch {
            left: pool.len(),
            right: values.len(),
        });
    }
    if k == 0 || k > pool.len() {
        return Err(Error::InvalidConfig(format!(
            "k must be in 1..={}, got {k}",
            pool.len()
        )));
    }
    let mut descending: Vec<usize> = (0..values.len()).collect();
    descending.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut rank_of = vec![0; values.len()];
    for (pos, &i) in descending.iter().enumerate() {
        rank_of[i] = pos + 1;
    }
    let mut ascending: Vec<usize> = (0..values.len()).collect();
    ascending.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let entry = |i: usize| RankedPrompt {
        rank: rank_of[i],
        index: i,
        template: pool.templates()[i].as_str().to_string(),
        score: values[i],
    };
    Ok(ScoreListing {
        pool: pool.name().to_string(),
        total: pool.len(),
        top: descending[..k].iter().map(|&i| entry(i)).collect(),
        bottom: ascending[..k].iter().map(|&i| entry(i)).collect(),
    })
}

impl fmt::Display for ScoreListing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.total.to_string().len().max(4);
        let section = |f: &mut fmt::Formatter<'_>, title: &str, rows: &[RankedPrompt]| {
            writeln!(f, "{title}")?;
            writeln!(f, "{:>width$}  {:>8}  template", "rank", "score")?;
            for r in rows {
                writeln!(f, "{:>width$}  {:>8.4}  {}", r.rank, r.score, r.template)?;
            }
            Ok(())
        };
        section(
            f,
            &format!("top {} of {} ({})", self.top.len(), self.total, self.pool),
            &self.top,
        )?;
        writeln!(f)?;
        section(
            f,
            &format!("bottom {} of {}", self.bottom.len(), self.total),
            &self.bottom,
        )
    }
}

pub fn write_json(path: impl AsRef<Path>, json: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format!("{json}\n")).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_line() {
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r.r - 1.0).abs() < 1e-12);
        assert!(r.p < 1e-12);
    }

    #[test]
    fn small_hand_example() {
        // cov = 4, var = 5 each -> r = 0.6; t = 1.0607 with df = 2 has
        // closed-form two-sided p = 1 - t / sqrt(2 + t^2) = 0.4
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((r.r - 0.6).abs() < 1e-12);
        let t = 0.6 * (2.0f64 / 0.64).sqrt();
        let closed = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((r.p - closed).abs() < 1e-10);
        assert!((r.p - 0.4).abs() < 1e-10);
    }

    #[test]
    fn df_one_closed_form() {
        // n = 3: t-distribution with one dof is Cauchy, p = 1 - 2 atan(|t|) / pi
        let r = 0.3f64;
        let t = r * (1.0 / (1.0 - r * r)).sqrt();
        let closed = 1.0 - 2.0 * t.atan() / std::f64::consts::PI;
        assert!((correlation_p_value(r, 3) - closed).abs() < 1e-10);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::TooFewSamples { .. })
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::ConstantInput)
        ));
    }

    #[test]
    fn p_value_decreases_with_r() {
        let mut last = 1.0;
        for i in 1..20 {
            let p = correlation_p_value(i as f64 / 20.0, 30);
            assert!(p < last);
            last = p;
        }
    }

    fn words(n: usize) -> (FrequencyTable, EmbeddingMatrix) {
        let counts: Vec<f64> = (0..n).map(|i| (i * 7 % 5) as f64 + 1.0).collect();
        let table = FrequencyTable::new(
            (0..n).map(|i| format!("w{i}")).collect(),
            counts,
            FrequencyScale::Raw,
        )
        .unwrap();
        let mut data = Vec::new();
        for i in 0..n {
            let a = i as f32 * 0.7;
            data.extend([a.cos(), a.sin()]);
        }
        (table, EmbeddingMatrix::from_rows(n, 2, data).unwrap())
    }

    #[test]
    fn self_reference_is_constant() {
        let (table, emb) = words(5);
        let images = EmbeddingMatrix::from_rows(2, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        let report = word_bias_report(&table, &emb, &images, None).unwrap();
        assert!(report.normalized.is_none());
        assert!(matches!(
            word_bias_report(&table, &emb, &images, Some(&images)),
            Err(Error::ConstantInput)
        ));
        let (one, one_emb) = words(1);
        assert!(matches!(
            word_bias_report(&one, &one_emb, &images, None),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn frequency_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, "word,count\nperson,120\ndog,7\n").unwrap();
        let t = FrequencyTable::read_csv(&path, FrequencyScale::Raw).unwrap();
        assert_eq!(t.words, ["person", "dog"]);
        assert_eq!(t.counts, [120.0, 7.0]);
        assert_eq!(
            FrequencyTable::read_csv(&path, FrequencyScale::Log)
                .unwrap()
                .scale,
            FrequencyScale::Log
        );

        fs::write(&path, "person,120\n").unwrap();
        assert!(FrequencyTable::read_csv(&path, FrequencyScale::Raw).is_err());
        fs::write(&path, "word,count\nperson,-1\n").unwrap();
        assert!(FrequencyTable::read_csv(&path, FrequencyScale::Raw).is_err());
    }

    fn pool(n: usize) -> PromptPool {
        PromptPool::new("p", (0..n).map(|i| format!("t{i} {{}}")).collect()).unwrap()
    }

    #[test]
    fn listing_order() {
        let values = [0.2, 0.9, 0.2, -0.1, 0.5];
        let l = score_report(&pool(5), &values, 2).unwrap();
        assert_eq!(l.top.iter().map(|r| r.index).collect::<Vec<_>>(), [1, 4]);
        assert_eq!(l.bottom.iter().map(|r| r.index).collect::<Vec<_>>(), [3, 0]);
        assert_eq!(l.bottom[0].rank, 5);
        assert_eq!(l.bottom[1].rank, 3);

        let text = l.to_string();
        assert!(text.contains("  0.9000  t1 {}"), "{text}");
        assert!(text.contains(" -0.1000  t3 {}"), "{text}");

        assert!(score_report(&pool(5), &values[..4], 2).is_err());
        assert!(score_report(&pool(5), &values, 0).is_err());
        assert!(score_report(&pool(5), &values, 6).is_err());
    }

    proptest! {
        #[test]
        fn pearson_symmetric_and_affine_invariant(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
            a in 0.1f64..10.0, b in -10.0f64..10.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let xy = pearson(&x, &y);
            prop_assume!(xy.is_ok());
            let xy = xy.unwrap();
            prop_assert!((xy.r - pearson(&y, &x).unwrap().r).abs() < 1e-12);
            let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((xy.r - pearson(&moved, &y).unwrap().r).abs() < 1e-9);
            prop_assert!(xy.r.abs() <= 1.0 && (0.0..=1.0).contains(&xy.p));
        }

        #[test]
        fn full_listing_is_permutation(values in proptest::collection::vec(-1.0f64..1.0, 1..30)) {
            let k = values.len();
            let l = score_report(&pool(k), &values, k).unwrap();
            let mut seen: Vec<usize> = l.top.iter().map(|r| r.index).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..k).collect::<Vec<_>>());
            prop_assert!(l.top.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
