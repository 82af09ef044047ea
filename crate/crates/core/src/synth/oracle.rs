//! Brute-force reference pipeline. Deliberately naive and self-contained:
//! plain nested loops over raw slices, nothing borrowed from the production
//! scoring, weighting or ensemble code.

use crate::ensemble::EnsembleConfig;
use crate::scoring::NormalizationMode;
use crate::weighting::WeightingScheme;

use super::Fixture;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    /// Dataset-level score per prompt.
    pub scores: Vec<f64>,
    /// [prompt][image] scores; filled in per-example mode only.
    pub per_example: Option<Vec<Vec<f64>>>,
    /// [image][prompt] weights; every row is identical outside per-example mode.
    pub weights: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub predictions: Vec<u32>,
    pub accuracy: f64,
}

fn logits_of(
    rows: &[f32],
    n: usize,
    d: usize,
    text: &[f32],
    p: usize,
    c: usize,
) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![vec![vec![0f64; c]; n]; p];
    for pi in 0..p {
        for ni in 0..n {
            for ci in 0..c {
                let mut s = 0f64;
                for di in 0..d {
                    s += rows[ni * d + di] as f64 * text[(pi * c + ci) * d + di] as f64;
                }
                // logits are stored in f32
                out[pi][ni][ci] = s as f32 as f64;
            }
        }
    }
    out
}

fn class_means(logits: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for per_image in logits {
        let n = per_image.len();
        let c = per_image[0].len();
        let mut m = vec![0f64; c];
        for row in per_image {
            for ci in 0..c {
                m[ci] += row[ci];
            }
        }
        for v in m.iter_mut() {
            *v /= n as f64;
        }
        out.push(m);
    }
    out
}

fn naive_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    // insertion sort
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn naive_mask(scores: &[f64], tau: f64) -> Vec<bool> {
    let med = naive_median(scores);
    let dev: Vec<f64> = scores.iter().map(|s| (s - med).abs()).collect();
    let mad = naive_median(&dev);
    if mad < 1e-12 {
        return vec![true; scores.len()];
    }
    let keep: Vec<bool> = scores.iter().map(|s| (s - med) / mad > tau).collect();
    if keep.contains(&true) {
        return keep;
    }
    let mut best = 0;
    for i in 0..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    let mut one = vec![false; scores.len()];
    one[best] = true;
    one
}

fn naive_weights(scores: &[f64], mask: &[bool], scheme: WeightingScheme) -> Vec<f64> {
    let mut w = vec![0f64; scores.len()];
    match scheme {
        WeightingScheme::Raw => {
            for i in 0..scores.len() {
                if mask[i] {
                    w[i] = scores[i];
                }
            }
        }
        WeightingScheme::Power { exponent } => {
            for i in 0..scores.len() {
                if mask[i] && scores[i] > 0.0 {
                    w[i] = scores[i].powi(exponent as i32);
                }
            }
        }
        WeightingScheme::Softmax { temperature } => {
            // shifted by the largest surviving score, as exp overflows otherwise
            let mut top = f64::NEG_INFINITY;
            for i in 0..scores.len() {
                if mask[i] && scores[i] / temperature > top {
                    top = scores[i] / temperature;
                }
            }
            let mut total = 0.0;
            for i in 0..scores.len() {
                if mask[i] {
                    w[i] = (scores[i] / temperature - top).exp();
                    total += w[i];
                }
            }
            for v in w.iter_mut() {
                *v /= total;
            }
        }
    }
    w
}

/// Runs scoring, selection, weighting, ensembling and evaluation for one
/// configuration directly from the fixture's embeddings.
pub fn oracle_pipeline(fixture: &Fixture, config: &EnsembleConfig) -> OracleOutput {
    let s = &fixture.spec;
    let (p, n, c, d) = (s.prompts, s.images, s.classes, s.dim);
    let text = fixture.class_emb.as_f32().unwrap();
    let test = logits_of(fixture.images.values(), n, d, text, p, c);
    let pre = logits_of(fixture.pretrain.values(), s.pretrain_images, d, text, p, c);
    let e_test = class_means(&test);
    let e_pre = class_means(&pre);

    let mut offsets = vec![vec![0f64; c]; p];
    for pi in 0..p {
        let star = e_pre[pi].iter().sum::<f64>() / c as f64;
        for ci in 0..c {
            offsets[pi][ci] = match config.normalization {
                NormalizationMode::None => 0.0,
                NormalizationMode::Pretrain => e_pre[pi][ci],
                NormalizationMode::PretrainStar => star,
                NormalizationMode::Test => e_test[pi][ci],
                NormalizationMode::Both => (e_pre[pi][ci] + e_test[pi][ci]) / 2.0,
            };
        }
    }

    let mut per_image = vec![vec![0f64; n]; p];
    let mut scores = vec![0f64; p];
    for pi in 0..p {
        for ni in 0..n {
            let mut best = f64::NEG_INFINITY;
            for ci in 0..c {
                let v = test[pi][ni][ci] - offsets[pi][ci];
                if v > best {
                    best = v;
                }
            }
            per_image[pi][ni] = best;
            scores[pi] += best;
        }
        scores[pi] /= n as f64;
    }

    let mask = match config.selection {
        Some(sel) => naive_mask(&scores, sel.tau),
        None => vec![true; p],
    };

    let weights: Vec<Vec<f64>> = if config.per_example {
        (0..n)
            .map(|ni| {
                let column: Vec<f64> = (0..p).map(|pi| per_image[pi][ni]).collect();
                naive_weights(&column, &mask, config.weighting)
            })
            .collect()
    } else {
        vec![naive_weights(&scores, &mask, config.weighting); n]
    };

    let labels = fixture.labels();
    let mut predictions = Vec::with_capacity(n);
    let mut correct = 0;
    for ni in 0..n {
        let mut out = vec![0f64; c];
        for pi in 0..p {
            if !mask[pi] {
                continue;
            }
            for ci in 0..c {
                out[ci] += weights[ni][pi] * test[pi][ni][ci];
            }
        }
        let mut best = 0;
        for ci in 0..c {
            out[ci] /= p as f64;
            if out[ci] > out[best] {
                best = ci;
            }
        }
        if best as u32 == labels[ni] {
            correct += 1;
        }
        predictions.push(best as u32);
    }

    OracleOutput {
        scores,
        per_example: config.per_example.then_some(per_image),
        weights,
        mask,
        predictions,
        accuracy: correct as f64 / n as f64,
    }
}
