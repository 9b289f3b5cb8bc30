//! MLM and NSP training: masking, AdamW, the warmup and decay schedule, the
//! data-parallel step, and evaluation.

mod data;
mod masking;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{pair_sentences, read_sequences, read_text, Batch, Example, SyntheticCorpus, Vocabulary};
pub use masking::{mask_mlm, maskable_count, masking_rng, special, MaskedSequence, MaskingConfig};
pub use optim::{adamw_step, lr_schedule, warmup_steps, OptimizerConfig, TrainState};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Gradients, Graph};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "GROUPBERT_KIT_THREADS";

/// Masking seed used by [`evaluate_mlm`].
pub const EVAL_SEED: u64 = 0x6576_616c;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Dropout off; bias correction as configured.
    #[default]
    Pretrain,
    /// Configured dropout; bias correction on.
    Finetune,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub seq_len: usize,
    pub nsp: bool,
    /// Fixed split of each batch; results do not depend on the thread count.
    pub shards: usize,
    pub checkpoint_every: Option<u64>,
    pub divergence_factor: f64,
    pub divergence_window: usize,
    pub optimizer: OptimizerConfig,
    pub masking: MaskingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Pretrain,
            batch_size: 16,
            seq_len: 32,
            nsp: true,
            shards: 1,
            checkpoint_every: None,
            divergence_factor: 10.0,
            divergence_window: 50,
            optimizer: OptimizerConfig::default(),
            masking: MaskingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("training.batch_size must be positive".to_string());
        }
        if self.shards == 0 || self.shards > self.batch_size.max(1) {
            problems.push(format!(
                "training.shards must lie in [1, batch_size], got {}",
                self.shards
            ));
        }
        if self.seq_len < 5 {
            problems.push(format!("training.seq_len must be at least 5, got {}", self.seq_len));
        }
        if self.checkpoint_every == Some(0) {
            problems.push("training.checkpoint_every must be positive".into());
        }
        if !(self.divergence_factor > 1.0) {
            problems.push(format!(
                "training.divergence_factor must exceed 1, got {}",
                self.divergence_factor
            ));
        }
        if self.divergence_window == 0 {
            problems.push("training.divergence_window must be positive".into());
        }
        for r in [self.optimizer.validate(), self.masking.validate()] {
            if let Err(Error::Config(m)) = r {
                problems.push(m);
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Optimizer settings after the mode overrides.
    pub fn effective_optimizer(&self) -> OptimizerConfig {
        let mut opt = self.optimizer.clone();
        if self.mode == Mode::Finetune {
            opt.bias_correction = true;
        }
        opt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mlm_loss: f64,
    pub nsp_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    /// Sequences without maskable tokens, summed over all steps.
    pub skipped_sequences: usize,
    pub state: TrainState,
}

impl TrainReport {
    pub fn initial(&self) -> Option<&StepMetrics> {
        self.metrics.first()
    }

    pub fn last(&self) -> Option<&StepMetrics> {
        self.metrics.last()
    }
}

/// Worker count from [`THREADS_ENV`], defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct ShardResult {
    grads: Gradients,
    mlm: f64,
    nsp: f64,
}

fn shard_step(
    model: &Model,
    batch: &Batch,
    mlm_norm: f64,
    nsp_norm: f64,
    nsp: bool,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ShardResult> {
    let mut g = Graph::new(model.precision());
    let out = model.encoder_forward(&mut g, &batch.input, dropout, rng)?;
    let logits = model.mlm_logits(&mut g, out.hidden)?;
    let mlm = g.cross_entropy(logits, &batch.mlm_targets, mlm_norm)?;
    let (loss, nsp_var) = if nsp {
        let nsp_logits = model
            .nsp_logits(&mut g, out.hidden, &batch.input)?
            .ok_or_else(|| Error::Config("next-sentence loss needs include_pooler = true".into()))?;
        let n = g.cross_entropy(nsp_logits, &batch.nsp_targets, nsp_norm)?;
        (g.add(mlm, n)?, Some(n))
    } else {
        (mlm, None)
    };
    g.backward(loss)?;
    Ok(ShardResult {
        grads: g.param_gradients(model.store()),
        mlm: g.value(mlm).data()[0],
        nsp: nsp_var.map_or(0.0, |v| g.value(v).data()[0]),
    })
}

/// Run every shard, at most `threads` at a time, and sum in shard order.
fn batch_gradients(
    model: &Model,
    shards: &[Batch],
    nsp: bool,
    dropout: f64,
    rngs: &mut [ChaCha8Rng],
    threads: usize,
) -> Result<ShardResult> {
    let mlm_norm = shards.iter().map(Batch::masked_count).sum::<usize>().max(1) as f64;
    let nsp_norm = shards.iter().map(|b| b.input.batch).sum::<usize>() as f64;
    let mut results: Vec<Option<Result<ShardResult>>> = (0..shards.len()).map(|_| None).collect();
    for (chunk, (batches, rngs)) in shards
        .chunks(threads)
        .zip(rngs.chunks_mut(threads))
        .enumerate()
    {
        if batches.len() == 1 {
            results[chunk * threads] = Some(shard_step(model, &batches[0], mlm_norm, nsp_norm, nsp, dropout, &mut rngs[0]));
            continue;
        }
        let done: Vec<Result<ShardResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = batches
                .iter()
                .zip(rngs.iter_mut())
                .map(|(b, r)| s.spawn(move || shard_step(model, b, mlm_norm, nsp_norm, nsp, dropout, r)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training worker panicked"))
                .collect()
        });
        for (i, r) in done.into_iter().enumerate() {
            results[chunk * threads + i] = Some(r);
        }
    }
    let mut iter = results.into_iter().map(|r| r.expect("every shard ran"));
    let mut total = iter.next().expect("at least one shard")?;
    for r in iter {
        let r = r?;
        total.grads.accumulate(&r.grads);
        total.mlm += r.mlm;
        total.nsp += r.nsp;
    }
    Ok(total)
}

struct MetricsLog {
    path: PathBuf,
    partial: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl MetricsLog {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("metrics.csv");
        let partial = dir.join("metrics.csv.partial");
        let mut writer = csv::Writer::from_path(&partial)?;
        writer.write_record(["step", "lr", "loss", "mlm_loss", "nsp_loss"])?;
        Ok(MetricsLog { path, partial, writer })
    }

    fn append(&mut self, m: &StepMetrics) -> Result<()> {
        self.writer.write_record([
            m.step.to_string(),
            m.lr.to_string(),
            m.loss.to_string(),
            m.mlm_loss.to_string(),
            m.nsp_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        self.writer.get_ref().sync_all()?;
        drop(self.writer);
        fs::rename(&self.partial, &self.path)?;
        Ok(())
    }
}

/// Train `model` on `data` for `optimizer.total_steps` steps.
///
/// Each step samples `batch_size` examples with replacement, masks example
/// `k` of the run with generator `k` of the masking seed, and applies one
/// AdamW update. With `out`, metrics go to `out/metrics.csv`, periodic
/// checkpoints to `out/checkpoints/` and the final weights to
/// `out/model.ckpt`.
pub fn train_loop(
    model: &mut Model,
    data: &[Example],
    config: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training data is empty".into()));
    }
    if config.nsp && !model.config().include_pooler {
        return Err(Error::Config("next-sentence loss needs include_pooler = true".into()));
    }
    let optimizer = config.effective_optimizer();
    let dropout = match config.mode {
        Mode::Pretrain => 0.0,
        Mode::Finetune => model.config().dropout_rate,
    };
    let masking_seed = config.masking.seed.unwrap_or(seed.wrapping_add(1));
    let mut sampler = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout_rngs: Vec<ChaCha8Rng> = (0..config.shards)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
            r.set_stream(i as u64);
            r
        })
        .collect();
    let threads = worker_threads();
    let mut log = out.map(MetricsLog::create).transpose()?;
    let mut state = TrainState::new(model.store());
    let mut metrics = Vec::with_capacity(optimizer.total_steps as usize);
    let mut skipped = 0;
    let mut initial = None;
    let mut above = 0;

    let result = (|| -> Result<()> {
        for step in 1..=optimizer.total_steps {
            if config.mode == Mode::Pretrain {
                assert_eq!(dropout, 0.0, "pretraining runs without dropout");
            }
            let picks: Vec<&Example> = (0..config.batch_size)
                .map(|_| &data[sampler.random_range(0..data.len())])
                .collect();
            let first = (step - 1) * config.batch_size as u64;
            let per = config.batch_size.div_ceil(config.shards);
            let shards = picks
                .chunks(per)
                .enumerate()
                .map(|(i, chunk)| {
                    Batch::build(
                        chunk,
                        config.seq_len,
                        model.config().vocab_size,
                        &config.masking,
                        masking_seed,
                        first + (i * per) as u64,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            skipped += shards.iter().map(|b| b.skipped).sum::<usize>();
            let r = batch_gradients(model, &shards, config.nsp, dropout, &mut dropout_rngs, threads)?;
            let loss = r.mlm + r.nsp;
            let lr = lr_schedule(step, optimizer.peak_lr, optimizer.total_steps);
            let m = StepMetrics {
                step,
                lr,
                loss,
                mlm_loss: r.mlm,
                nsp_loss: config.nsp.then_some(r.nsp),
            };
            if let Some(log) = log.as_mut() {
                log.append(&m)?;
            }
            metrics.push(m);

            let initial = *initial.get_or_insert(loss);
            let threshold = config.divergence_factor * initial;
            if !loss.is_finite() || loss > threshold {
                above += 1;
            } else {
                above = 0;
            }
            if above >= config.divergence_window || !loss.is_finite() {
                return Err(Error::Diverged {
                    step: step as usize,
                    loss,
                    initial,
                    threshold,
                    window: config.divergence_window,
                });
            }

            adamw_step(model.store_mut(), &r.grads, &mut state, &optimizer, lr)?;
            if let (Some(dir), Some(every)) = (out, config.checkpoint_every) {
                if step % every == 0 {
                    let ckpt = dir.join("checkpoints");
                    fs::create_dir_all(&ckpt)?;
                    model.save_at_step(ckpt.join(format!("step{step:06}.ckpt")), Some(step))?;
                }
            }
        }
        Ok(())
    })();

    if let Some(log) = log {
        log.finish()?;
    }
    result?;
    if let Some(dir) = out {
        model.save_at_step(dir.join("model.ckpt"), Some(optimizer.total_steps))?;
    }
    Ok(TrainReport {
        metrics,
        skipped_sequences: skipped,
        state,
    })
}

/// Mean cross-entropy over masked positions, masking with [`EVAL_SEED`].
pub fn evaluate_mlm(
    model: &Model,
    data: &[Example],
    masking: &MaskingConfig,
    seq_len: usize,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation data is empty".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (i, chunk) in data.chunks(batch_size.max(1)).enumerate() {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::build(
            &refs,
            seq_len,
            model.config().vocab_size,
            masking,
            EVAL_SEED,
            (i * batch_size.max(1)) as u64,
        )?;
        if batch.masked_count() == 0 {
            continue;
        }
        let mut g = Graph::new(model.precision());
        let out = model.encode(&mut g, &batch.input)?;
        let logits = model.mlm_logits(&mut g, out.hidden)?;
        let sum = g.cross_entropy(logits, &batch.mlm_targets, 1.0)?;
        total += g.value(sum).data()[0];
        count += batch.masked_count();
    }
    if count == 0 {
        return Err(Error::Data("evaluation data has no masked positions".into()));
    }
    Ok(total / count as f64)
}
