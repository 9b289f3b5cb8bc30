//! Whole runs: train, evaluate and analyze one configuration, and the module
//! ablation grid built on top of it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accounting::{count_params, training_flops};
use crate::analysis::{average_attention_maps, entropy_report, write_analysis, EntropyReport};
use crate::config::{ExperimentConfig, SeedPurpose};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{EncoderInput, Model, ModelConfig, ModuleKind, NormPolicy};
use crate::tensor::Precision;
use crate::train::{evaluate_mlm, special, train_loop, Example, Mode, TrainReport};

/// Padded, unmasked inputs for attention analysis.
pub fn example_batches(examples: &[Example], seq_len: usize, batch_size: usize) -> Result<Vec<EncoderInput>> {
    let mut batches = Vec::new();
    for chunk in examples.chunks(batch_size.max(1)) {
        let n = chunk.len();
        let mut tokens = vec![special::PAD; n * seq_len];
        let mut segments = vec![0; n * seq_len];
        let mut mask = vec![false; n * seq_len];
        for (b, ex) in chunk.iter().enumerate() {
            let len = ex.tokens.len();
            if len > seq_len {
                return Err(Error::Data(format!("sequence of length {len} exceeds {seq_len}")));
            }
            let row = b * seq_len;
            tokens[row..row + len].copy_from_slice(&ex.tokens);
            segments[row..row + len].copy_from_slice(&ex.segments);
            mask[row..row + len].fill(true);
        }
        batches.push(EncoderInput::new(n, seq_len, tokens, segments, mask)?);
    }
    Ok(batches)
}

/// Wrap single sentences as `[CLS] s [SEP]`, truncated to `seq_len`.
pub fn sentence_examples(sentences: &[Vec<usize>], seq_len: usize) -> Result<Vec<Example>> {
    if seq_len < 3 {
        return Err(Error::Config(format!("sequence length {seq_len} cannot hold a sentence")));
    }
    Ok(sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let body = &s[..s.len().min(seq_len - 2)];
            let mut tokens = Vec::with_capacity(body.len() + 2);
            tokens.push(special::CLS);
            tokens.extend_from_slice(body);
            tokens.push(special::SEP);
            Example {
                segments: vec![0; tokens.len()],
                tokens,
                is_next: true,
            }
        })
        .collect())
}

/// Headline numbers of one run, written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub precision: Precision,
    pub params: usize,
    pub steps: u64,
    pub initial_loss: f64,
    pub initial_mlm_loss: f64,
    pub final_loss: f64,
    pub final_mlm_loss: f64,
    pub eval_mlm_loss: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub skipped_sequences: usize,
}

pub struct RunOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub entropy: Option<EntropyReport>,
    pub summary: RunSummary,
}

/// Train `config` from scratch, then evaluate on the held-out split and, if
/// enabled, analyze attention on it.
///
/// With `out`, the directory receives `config.json`, `metrics.csv`,
/// `model.ckpt`, `summary.json` and optionally `analysis/`.
pub fn run(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let (train, eval) = config.load_data()?;
    let mut model = Model::build(&config.model, config.derived_seed(SeedPurpose::Init), config.precision)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("config.json"), &serde_json::to_vec_pretty(config)?)?;
    }
    let seed = config.derived_seed(SeedPurpose::Training);
    let report = train_loop(&mut model, &train, &config.training, seed, out)?;
    let t = &config.training;
    let eval_mlm_loss = if eval.is_empty() {
        None
    } else {
        Some(evaluate_mlm(&model, &eval, &t.masking, t.seq_len, t.batch_size)?)
    };
    let entropy = if config.analysis.enabled {
        let source = if eval.is_empty() { &train } else { &eval };
        let batches = example_batches(source, t.seq_len, t.batch_size)?;
        let maps = average_attention_maps(&model, &batches, config.analysis.max_sequences)?;
        let entropy = entropy_report(&maps)?;
        if let Some(dir) = out {
            let dir = dir.join("analysis");
            if config.analysis.heatmaps {
                write_analysis(&dir, &maps, &entropy)?;
            } else {
                fs::create_dir_all(&dir)?;
                write_atomic(&dir.join("entropy.json"), &serde_json::to_vec_pretty(&entropy)?)?;
            }
        }
        Some(entropy)
    } else {
        None
    };
    let (first, last) = match (report.initial(), report.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Data("training ran no steps".into())),
    };
    let summary = RunSummary {
        name: config.name.clone(),
        mode: t.mode,
        seed: config.seed,
        precision: config.precision,
        params: model.param_count(),
        steps: last.step,
        initial_loss: first.loss,
        initial_mlm_loss: first.mlm_loss,
        final_loss: last.loss,
        final_mlm_loss: last.mlm_loss,
        eval_mlm_loss,
        mean_entropy: entropy.as_ref().map(|e| e.mean),
        skipped_sequences: report.skipped_sequences,
    };
    if let Some(dir) = out {
        write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(RunOutcome {
        model,
        report,
        entropy,
        summary,
    })
}

// ---------------------------------------------------------------------------
// ablation grid

/// Row labels of the ablation grid, baseline first.
pub const ABLATION_LABELS: [&str; 7] = [
    "BERT Base",
    "Prenorm",
    "No Dropout",
    "Convolution",
    "2 GFFNs",
    "2 GFFNs + Conv",
    "GroupBERT Base",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub label: &'static str,
    pub model: ModelConfig,
    /// Applied to the baseline peak learning rate.
    pub lr_multiplier: f64,
}

/// The seven grid rows derived from a postnorm BERT baseline.
pub fn ablation_variants(base: &ModelConfig) -> Vec<AblationVariant> {
    use ModuleKind::{Attention, Conv, Ffn, Gffn};
    let bert = ModelConfig {
        family: crate::model::Family::Bert,
        layout: Some(vec![Attention, Ffn]),
        ..base.clone()
    };
    let with_layout = |layout: Vec<ModuleKind>| ModelConfig {
        layout: Some(layout),
        ..bert.clone()
    };
    let row = |label, model, lr_multiplier| AblationVariant {
        label,
        model,
        lr_multiplier,
    };
    vec![
        row(ABLATION_LABELS[0], bert.clone(), 1.0),
        row(
            ABLATION_LABELS[1],
            ModelConfig {
                norm_policy: NormPolicy::Prenorm,
                ..bert.clone()
            },
            8.0,
        ),
        row(
            ABLATION_LABELS[2],
            ModelConfig {
                dropout_rate: 0.0,
                ..bert.clone()
            },
            1.0,
        ),
        row(ABLATION_LABELS[3], with_layout(vec![Attention, Conv, Ffn]), 1.0),
        row(ABLATION_LABELS[4], with_layout(vec![Attention, Gffn, Gffn]), 1.0),
        row(ABLATION_LABELS[5], with_layout(vec![Attention, Gffn, Conv, Gffn]), 1.0),
        row(
            ABLATION_LABELS[6],
            ModelConfig {
                family: crate::model::Family::GroupBert,
                layout: None,
                norm_policy: NormPolicy::Prenorm,
                dropout_rate: 0.0,
                ..bert
            },
            8.0,
        ),
    ]
}

/// A grid row as a runnable experiment.
///
/// Rows with dropout train in finetune mode so the dropout is applied. Every
/// row uses bias correction so that only the row's own change differs.
pub fn ablation_experiment(base: &ExperimentConfig, variant: &AblationVariant) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.name = slug(variant.label);
    cfg.model = variant.model.clone();
    cfg.training.mode = if variant.model.dropout_rate > 0.0 {
        Mode::Finetune
    } else {
        Mode::Pretrain
    };
    cfg.training.optimizer.peak_lr = base.training.optimizer.peak_lr * variant.lr_multiplier;
    cfg.training.optimizer.bias_correction = true;
    cfg
}

pub fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('-') && !s.is_empty() {
            s.push('-');
        }
    }
    s.trim_end_matches('-').to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    /// Parameters of the full-size reference variant.
    pub params: u64,
    /// Training FLOPs of the full-size reference variant over its schedule.
    pub training_flops: f64,
    /// Peak learning rate of the toy run.
    pub peak_lr: f64,
    pub mode: Mode,
    pub toy_params: u64,
    pub eval_mlm_loss: Option<f64>,
    /// Baseline loss minus this row's loss.
    pub improvement: Option<f64>,
    pub mean_entropy: Option<f64>,
    /// Failure message when the toy run did not finish.
    pub failure: Option<String>,
}

/// Run the grid at toy scale, filling size columns from `reference`.
///
/// Each row trains into `out/<slug>/`. A row that diverges is reported
/// with its diagnostic instead of aborting the grid.
pub fn compare(toy: &ExperimentConfig, reference: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<CompareRow>> {
    toy.validate()?;
    reference.validate()?;
    let toy_rows = ablation_variants(&toy.model);
    let full_rows = ablation_variants(&reference.model);
    let mut rows: Vec<CompareRow> = Vec::with_capacity(toy_rows.len());
    for (variant, full) in toy_rows.iter().zip(&full_rows) {
        let cfg = ablation_experiment(toy, variant);
        let dir = out.map(|o| o.join(&cfg.name));
        let (eval_mlm_loss, mean_entropy, failure) = match run(&cfg, dir.as_deref()) {
            Ok(o) => (o.summary.eval_mlm_loss, o.summary.mean_entropy, None),
            Err(e @ (Error::Diverged { .. } | Error::NanGradient { .. })) => (None, None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        let baseline = rows.first().map_or(eval_mlm_loss, |b| b.eval_mlm_loss);
        rows.push(CompareRow {
            label: variant.label.to_string(),
            params: count_params(&full.model)?.total_params,
            training_flops: training_flops(&full.model, &reference.schedule)?.total,
            peak_lr: cfg.training.optimizer.peak_lr,
            mode: cfg.training.mode,
            toy_params: count_params(&variant.model)?.total_params,
            eval_mlm_loss,
            improvement: match (rows.is_empty(), baseline, eval_mlm_loss) {
                (false, Some(b), Some(l)) => Some(b - l),
                _ => None,
            },
            mean_entropy,
            failure,
        });
    }
    Ok(rows)
}

/// Human table laid out like the published ablation table.
pub fn render_compare_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18}  {:>10}  {:>14}  {:>8}  {:>9}  {:>11}  {:>7}",
        "Model", "Parameters", "Training FLOPs", "LR", "MLM loss", "Improvement", "Entropy"
    );
    for (i, r) in rows.iter().enumerate() {
        let indent = if i == 0 || i + 1 == rows.len() { "" } else { "  " };
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let loss = match &r.failure {
            Some(_) => "diverged".to_string(),
            None => opt(r.eval_mlm_loss, 3),
        };
        let _ = writeln!(
            out,
            "{:<18}  {:>10}  {:>14}  {:>8}  {:>9}  {:>11}  {:>7}",
            format!("{indent}{}", r.label),
            format!("{:.1}M", r.params as f64 / 1e6),
            format!("{:.1e}", r.training_flops),
            format!("{:.0e}", r.peak_lr),
            loss,
            opt(r.improvement, 3),
            opt(r.mean_entropy, 2),
        );
    }
    out
}
