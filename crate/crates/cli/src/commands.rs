use std::borrow::Cow;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use zpe::diagnostics::{score_report, word_bias_report, FrequencyTable};
use zpe::ensemble::{
    ablation_csv, ensemble_logits, evaluate_labels, per_example_ensemble, predict,
    run_ablation_grid, EnsembleConfig, PredictionResult, Selection,
};
use zpe::prompt::{compose_pool, load_classes, load_pool, PromptPool};
use zpe::scoring::{
    materialize, normalized_max_logit_score, per_example_scores, reference_stats, CubeShape,
    EmbeddingLogits, LogitsCube, LogitsSource, NormalizationMode, Scores,
};
use zpe::synth::{generate, SynthSpec};
use zpe::tensor::{read_tensor, write_tensor, EmbeddingMatrix, Tensor};
use zpe::weighting::{
    apply_weighting, apply_weighting_masked, select_prompts, SelectionMask, WeightVector,
};

use crate::{
    scheme, AblateArgs, Cli, Command, ComposeArgs, DiagnoseBiasArgs, EvalArgs, LogitsInput,
    PredictArgs, PretrainInput, ReportArgs, ScoreArgs, SelectArgs, SynthArgs, UsageError,
};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Compose(a) => compose(a),
        Command::Score(a) => score(a),
        Command::Select(a) => select(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::DiagnoseBias(a) => diagnose_bias(a),
        Command::Synth(a) => synth(a),
        Command::Report(a) => report(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, format!("{text}\n"))
            .with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn pool_from(spec: &str) -> Result<PromptPool> {
    match PromptPool::builtin(spec) {
        Some(pool) => Ok(pool),
        None => Ok(load_pool(spec)?),
    }
}

fn embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let m = EmbeddingMatrix::from_tensor(read_tensor(path)?)
        .with_context(|| format!("loading {}", path.display()))?;
    m.require_normalized()
        .with_context(|| format!("checking {}", path.display()))?;
    Ok(m)
}

/// Loaded test inputs; embeddings stay lazy so the cube is never materialized.
enum Inputs {
    Cube(LogitsCube),
    Embeddings {
        images: EmbeddingMatrix,
        class_emb: Tensor,
    },
}

impl Inputs {
    fn load(input: &LogitsInput) -> Result<Self> {
        match (&input.images, &input.class_emb, &input.logits) {
            (Some(images), Some(class_emb), None) => Ok(Inputs::Embeddings {
                images: embeddings(images)?,
                class_emb: read_tensor(class_emb)?,
            }),
            (None, _, Some(logits)) => Ok(Inputs::Cube(zpe::scoring::load_logits_cube(logits)?)),
            _ => Err(usage("give either --images with --class-emb, or --logits")),
        }
    }

    fn source(&self) -> Result<Box<dyn LogitsSource + '_>> {
        Ok(match self {
            Inputs::Cube(cube) => Box::new(Borrowed(cube)),
            Inputs::Embeddings { images, class_emb } => {
                Box::new(EmbeddingLogits::new(images, class_emb)?)
            }
        })
    }

    fn class_emb(&self) -> Option<&Tensor> {
        match self {
            Inputs::Cube(_) => None,
            Inputs::Embeddings { class_emb, .. } => Some(class_emb),
        }
    }
}

struct Borrowed<'a>(&'a LogitsCube);

impl LogitsSource for Borrowed<'_> {
    fn shape(&self) -> CubeShape {
        self.0.shape()
    }

    fn prompt_logits(&self, prompt: usize) -> Cow<'_, [f32]> {
        self.0.prompt_logits(prompt)
    }
}

/// Pretrain logits, capped to the leading `pretrain_cap` rows.
fn pretrain_cube(
    args: &PretrainInput,
    class_emb: Option<&Tensor>,
    class_emb_flag: Option<&Path>,
) -> Result<Option<LogitsCube>> {
    if args.pretrain_cap == 0 {
        return Err(usage("--pretrain-cap must be at least 1"));
    }
    if let Some(path) = &args.pretrain {
        let loaded;
        let class_emb = match (class_emb, class_emb_flag) {
            (Some(t), _) => t,
            (None, Some(p)) => {
                loaded = read_tensor(p)?;
                &loaded
            }
            (None, None) => return Err(usage("--pretrain embeddings need --class-emb")),
        };
        let pre = embeddings(path)?.head(args.pretrain_cap)?;
        return Ok(Some(materialize(&EmbeddingLogits::new(&pre, class_emb)?)));
    }
    if let Some(path) = &args.pretrain_logits {
        return Ok(Some(
            zpe::scoring::load_logits_cube(path)?.head_images(args.pretrain_cap)?,
        ));
    }
    Ok(None)
}

fn compose(a: ComposeArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Composed<'a> {
        pool: &'a str,
        classes: &'a [String],
        prompts: Vec<Vec<String>>,
    }
    let pool = pool_from(&a.pool)?;
    let classes = load_classes(&a.classes)?;
    let composed = Composed {
        pool: pool.name(),
        classes: classes.names(),
        prompts: compose_pool(&pool, &classes),
    };
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&composed)?)
}

fn score(a: ScoreArgs) -> Result<()> {
    let inputs = Inputs::load(&a.input)?;
    let cube = inputs.source()?;
    let pretrain = if a.norm.needs_pretrain() {
        let pre = pretrain_cube(
            &a.pretrain,
            inputs.class_emb(),
            a.input.class_emb.as_deref(),
        )?;
        if pre.is_none() {
            return Err(usage(format!(
                "--norm {} needs --pretrain or --pretrain-logits",
                a.norm
            )));
        }
        pre
    } else {
        None
    };
    let stats = reference_stats(
        cube.as_ref(),
        pretrain.as_ref().map(|p| p as &dyn LogitsSource),
        a.norm,
    )?;
    let scores = if a.per_example {
        Scores::PerExample(per_example_scores(cube.as_ref(), &stats, a.norm)?)
    } else {
        Scores::Dataset(normalized_max_logit_score(cube.as_ref(), &stats, a.norm)?)
    };
    emit(a.out.as_deref(), &scores.to_json())
}

fn select(a: SelectArgs) -> Result<()> {
    if !a.tau.is_finite() {
        return Err(usage("--tau must be finite"));
    }
    let scores = Scores::read(&a.scores)?;
    let mask = select_prompts(&scores.dataset().scores, a.tau)?;
    emit(a.out.as_deref(), &mask.to_json())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let w = &a.weighting;
    let scheme = scheme(w.weighting, w.power_exp, w.temperature);
    scheme.validate().map_err(|e| usage(e.to_string()))?;
    let inputs = Inputs::load(&a.input)?;
    let cube = inputs.source()?;
    let prompts = cube.shape().prompts;
    let scores = a.scores.as_deref().map(Scores::read).transpose()?;
    let mask = a.mask.as_deref().map(SelectionMask::read).transpose()?;
    if let Some(s) = &scores {
        if s.prompts() != prompts {
            anyhow::bail!(
                "scores cover {} prompts, logits have {prompts}",
                s.prompts()
            );
        }
    }

    let mut result = match &scores {
        Some(Scores::PerExample(pe)) => {
            per_example_ensemble(cube.as_ref(), pe, scheme, mask.as_ref())?
        }
        Some(Scores::Dataset(s)) => {
            let weights = match &mask {
                Some(m) => apply_weighting_masked(&s.scores, scheme, &m.selected)?,
                None => apply_weighting(&s.scores, scheme),
            };
            with_logits(ensemble_logits(cube.as_ref(), &weights, mask.as_ref())?)
        }
        None => with_logits(ensemble_logits(
            cube.as_ref(),
            &WeightVector::uniform(prompts),
            mask.as_ref(),
        )?),
    };
    result.selected_count = mask.as_ref().map(|m| m.count());
    result.config = scores.as_ref().map(|s| EnsembleConfig {
        normalization: s.mode(),
        weighting: scheme,
        selection: mask.as_ref().map(|m| Selection { tau: m.tau }),
        per_example: matches!(s, Scores::PerExample(_)),
    });

    write_tensor(&result.to_tensor()?, &a.out)?;
    if let Some(path) = &a.logits_out {
        let logits = result
            .ensembled_logits
            .as_ref()
            .expect("ensemble keeps its logits");
        write_tensor(&logits.to_tensor()?, path)?;
    }
    if let (Some(labels), Some(report)) = (&a.labels, &a.report) {
        let labels = read_tensor(labels)?;
        let eval = evaluate_labels(&result, labels.expect_u32(1, "labels")?)?;
        emit(Some(report), &eval.to_json())?;
    }
    Ok(())
}

fn with_logits(ensembled: zpe::ensemble::EnsembledLogits) -> PredictionResult {
    let mut r = predict(&ensembled);
    r.ensembled_logits = Some(ensembled);
    r
}

fn eval(a: EvalArgs) -> Result<()> {
    let predicted = read_tensor(&a.predictions)?
        .expect_u32(1, "predictions")?
        .to_vec();
    let labels_tensor = read_tensor(&a.labels)?;
    let labels = labels_tensor.expect_u32(1, "labels")?;
    let seen = predicted
        .iter()
        .chain(labels)
        .copied()
        .max()
        .map_or(1, |m| m as usize + 1);
    let classes = match a.classes {
        Some(0) => return Err(usage("--classes must be at least 1")),
        Some(c) => c,
        None => seen,
    };
    if let Some((i, &p)) = predicted
        .iter()
        .enumerate()
        .find(|(_, &p)| p as usize >= classes)
    {
        anyhow::bail!("prediction {i} is class {p}, but there are only {classes} classes");
    }
    let result = PredictionResult {
        predicted,
        classes,
        ensembled_logits: None,
        config: None,
        selected_count: None,
    };
    emit(
        a.out.as_deref(),
        &evaluate_labels(&result, labels)?.to_json(),
    )
}

fn ablate(a: AblateArgs) -> Result<()> {
    let schemes: Vec<_> = a
        .weightings
        .iter()
        .map(|&kind| scheme(kind, a.weighting.power_exp, a.weighting.temperature))
        .collect();
    for s in &schemes {
        s.validate().map_err(|e| usage(e.to_string()))?;
    }
    let inputs = Inputs::load(&a.input)?;
    let cube = inputs.source()?;
    let pretrain = pretrain_cube(
        &a.pretrain,
        inputs.class_emb(),
        a.input.class_emb.as_deref(),
    )?;
    let norms = if !a.norms.is_empty() {
        a.norms.clone()
    } else if pretrain.is_some() {
        NormalizationMode::ALL.to_vec()
    } else {
        vec![NormalizationMode::None, NormalizationMode::Test]
    };
    if pretrain.is_none() {
        if let Some(m) = norms.iter().find(|m| m.needs_pretrain()) {
            return Err(usage(format!(
                "--norms {m} needs --pretrain or --pretrain-logits"
            )));
        }
    }
    let taus: Vec<Option<f64>> = a.taus.iter().map(|t| t.0).collect();
    let per_example: &[bool] = if a.per_example {
        &[false, true]
    } else {
        &[false]
    };
    let grid = EnsembleConfig::grid(&norms, &schemes, &taus, per_example);
    let labels = read_tensor(&a.labels)?;
    let reports = run_ablation_grid(
        cube.as_ref(),
        pretrain.as_ref().map(|p| p as &dyn LogitsSource),
        &labels,
        &grid,
    )?;
    let csv = ablation_csv(&reports)?;
    match &a.out {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn diagnose_bias(a: DiagnoseBiasArgs) -> Result<()> {
    if a.pretrain_cap == 0 {
        return Err(usage("--pretrain-cap must be at least 1"));
    }
    let freq = FrequencyTable::read_csv(&a.freq, a.counts.into())?;
    let words = embeddings(&a.word_emb)?;
    let images = embeddings(&a.images)?;
    let pretrain = a
        .pretrain
        .as_deref()
        .map(|p| embeddings(p).and_then(|m| Ok(m.head(a.pretrain_cap)?)))
        .transpose()?;
    let report = word_bias_report(&freq, &words, &images, pretrain.as_ref())?;
    emit(a.out.as_deref(), &report.to_json())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        prompts: a.p,
        images: a.n,
        classes: a.c,
        dim: a.d,
        pretrain_images: a.n_pretrain,
        n_biased_prompts: a.biased,
        bias_offset: a.offset,
        class_separation: a.separation,
        words: a.words,
        ..SynthSpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    generate(&spec)?.write(&a.out)?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let pool = pool_from(&a.pool)?;
    let scores = Scores::read(&a.scores)?.dataset();
    let listing = score_report(&pool, &scores.scores, a.k.min(pool.len()))?;
    if let Some(path) = &a.json {
        emit(Some(path), &listing.to_json())?;
    }
    let text = listing.to_string();
    emit(a.out.as_deref(), text.trim_end())
}
