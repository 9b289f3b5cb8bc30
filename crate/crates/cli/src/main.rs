use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use groupbert_core::accounting::{
    cost_report, count_params, global_batch, render_table, solve_accumulation, write_csv, CostReport, PipelinePlan,
};
use groupbert_core::analysis::{average_attention_maps, entropy_report, write_analysis, EntropyReport};
use groupbert_core::config::ExperimentConfig;
use groupbert_core::experiment::{self, example_batches, render_compare_table, sentence_examples, CompareRow, RunSummary};
use groupbert_core::io::write_atomic;
use groupbert_core::model::Model;
use groupbert_core::tensor::Precision;
use groupbert_core::train::{read_sequences, Mode};

#[derive(Parser)]
#[command(name = "groupbert-kit", version, about = "GroupBERT cost accounting, toy training and attention analysis")]
struct Cli {
    /// Format of what is printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Arithmetic used for training and analysis; defaults to the config's.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Oracle64,
    Run32,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Oracle64 => Precision::Oracle64,
            PrecisionArg::Run32 => Precision::Run32,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Pretrain,
    Finetune,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter counts of one or more configs, side by side.
    CountParams {
        /// Config files or bundled preset names.
        #[arg(required = true)]
        configs: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter, forward and training FLOP counts under each config's schedule.
    CountFlops {
        #[arg(required = true)]
        configs: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Global batch arithmetic for pipelined data-parallel training.
    PipelinePlan {
        #[arg(long)]
        replicas: u64,
        #[arg(long)]
        depth: u64,
        /// Micro-batch per pipeline stage.
        #[arg(long)]
        compute: u64,
        /// Global batch to solve the accumulation factor for.
        #[arg(long, conflicts_with = "accumulation", required_unless_present = "accumulation")]
        target: Option<u64>,
        #[arg(long)]
        accumulation: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        config: String,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to the config's output_dir, then to runs/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average attention maps of a checkpoint and score head entropy.
    AnalyzeAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One sentence of token ids per line.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        #[arg(long, default_value_t = 1000)]
        max_sequences: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Train the ablation grid at toy scale next to full-size costs.
    Compare {
        /// Toy-scale baseline; must describe a postnorm BERT.
        #[arg(long, default_value = "toy-bert")]
        config: String,
        /// Full-size baseline for the parameter and FLOP columns.
        #[arg(long, default_value = "bert-base")]
        reference: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .filter_map(|c| c.downcast_ref::<groupbert_core::Error>())
                .any(|c| c.is_config());
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let precision = cli.precision.map(Precision::from);
    match cli.command {
        Command::CountParams { configs, out } => {
            let reports = configs
                .iter()
                .map(|c| {
                    let cfg = ExperimentConfig::load(c, &["model"])?;
                    let mut r = count_params(&cfg.model)?;
                    r.label = cfg.name;
                    Ok(r)
                })
                .collect::<groupbert_core::Result<Vec<_>>>()?;
            emit_reports(&reports, cli.format, out.as_deref(), "params")
        }
        Command::CountFlops { configs, out } => {
            let reports = configs
                .iter()
                .map(|c| {
                    let cfg = ExperimentConfig::load(c, &["model"])?;
                    cost_report(&cfg.name, &cfg.model, &cfg.schedule)
                })
                .collect::<groupbert_core::Result<Vec<_>>>()?;
            emit_reports(&reports, cli.format, out.as_deref(), "flops")
        }
        Command::PipelinePlan {
            replicas,
            depth,
            compute,
            target,
            accumulation,
            out,
        } => {
            let plan = match (target, accumulation) {
                (Some(t), _) => solve_accumulation(t, replicas, depth, compute)?,
                (None, Some(a)) => PipelinePlan {
                    replicas,
                    accumulation_factor: a,
                    pipeline_depth: depth,
                    compute_batch_size: compute,
                },
                (None, None) => unreachable!("clap requires one of them"),
            };
            let global = global_batch(&plan)?;
            let json = serde_json::json!({ "plan": plan, "global_batch": global });
            let mut csv = String::from("replicas,accumulation_factor,pipeline_depth,compute_batch_size,global_batch\n");
            let _ = writeln!(
                csv,
                "{},{},{},{},{global}",
                plan.replicas, plan.accumulation_factor, plan.pipeline_depth, plan.compute_batch_size
            );
            let table = format!(
                "replicas             {}\naccumulation factor  {}\npipeline depth       {}\ncompute batch size   {}\nglobal batch         {global}\n",
                plan.replicas, plan.accumulation_factor, plan.pipeline_depth, plan.compute_batch_size
            );
            emit(cli.format, &table, &json, &csv, out.as_deref(), "plan")
        }
        Command::Train { config, mode, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config, &["model", "training"])?;
            if let Some(m) = mode {
                cfg.training.mode = match m {
                    ModeArg::Pretrain => Mode::Pretrain,
                    ModeArg::Finetune => Mode::Finetune,
                };
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = precision {
                cfg.precision = p;
            }
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| Path::new("runs").join(&cfg.name));
            let outcome = experiment::run(&cfg, Some(&out))?;
            let s = &outcome.summary;
            let json = serde_json::to_value(s)?;
            emit(cli.format, &summary_table(s, &out), &json, &summary_csv(s), None, "summary")
        }
        Command::AnalyzeAttention {
            checkpoint,
            data,
            out,
            seq_len,
            max_sequences,
            batch_size,
        } => {
            let (model, step) = Model::load(&checkpoint, precision.unwrap_or_default())?;
            let seq_len = seq_len.min(model.config().max_positions);
            let sentences = read_sequences(&data, model.config().vocab_size)?;
            let examples = sentence_examples(&sentences, seq_len)?;
            let batches = example_batches(&examples, seq_len, batch_size)?;
            let maps = average_attention_maps(&model, &batches, max_sequences)?;
            let report = entropy_report(&maps)?;
            write_analysis(&out, &maps, &report)?;
            let table = entropy_table(&report, step);
            let json = serde_json::to_value(&report)?;
            emit(cli.format, &table, &json, &entropy_csv(&report), None, "entropy")
        }
        Command::Compare {
            config,
            reference,
            seed,
            out,
        } => {
            let mut toy = ExperimentConfig::load(&config, &["model", "training"])?;
            if let Some(s) = seed {
                toy.seed = s;
            }
            if let Some(p) = precision {
                toy.precision = p;
            }
            let reference = ExperimentConfig::load(&reference, &["model"])?;
            let out = out.unwrap_or_else(|| Path::new("runs").join("compare"));
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let rows = experiment::compare(&toy, &reference, Some(&out))?;
            let json = serde_json::to_value(&rows)?;
            let csv = compare_csv(&rows)?;
            emit(cli.format, &render_compare_table(&rows), &json, &csv, Some(&out), "compare")
        }
    }
}

/// Print in the chosen format; with `out`, also write `<stem>.json` and `<stem>.csv`.
fn emit(
    format: Format,
    table: &str,
    json: &serde_json::Value,
    csv: &str,
    out: Option<&Path>,
    stem: &str,
) -> Result<()> {
    let pretty = serde_json::to_string_pretty(json)? + "\n";
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_atomic(&dir.join(format!("{stem}.json")), pretty.as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.csv")), csv.as_bytes())?;
    }
    match format {
        Format::Table => print!("{table}"),
        Format::Json => print!("{pretty}"),
        Format::Csv => print!("{csv}"),
    }
    Ok(())
}

fn emit_reports(reports: &[CostReport], format: Format, out: Option<&Path>, stem: &str) -> Result<()> {
    let mut csv = Vec::new();
    write_csv(reports, &mut csv)?;
    let csv = String::from_utf8(csv)?;
    let json = serde_json::to_value(reports)?;
    emit(format, &render_table(reports), &json, &csv, out, stem)
}

fn summary_table(s: &RunSummary, out: &Path) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut t = String::new();
    let _ = writeln!(t, "run                {}", s.name);
    let _ = writeln!(t, "mode               {}", s.mode.as_str());
    let _ = writeln!(t, "seed               {}", s.seed);
    let _ = writeln!(t, "parameters         {}", s.params);
    let _ = writeln!(t, "steps              {}", s.steps);
    let _ = writeln!(t, "initial MLM loss   {:.4}", s.initial_mlm_loss);
    let _ = writeln!(t, "final MLM loss     {:.4}", s.final_mlm_loss);
    let _ = writeln!(t, "eval MLM loss      {}", opt(s.eval_mlm_loss));
    let _ = writeln!(t, "mean entropy       {}", opt(s.mean_entropy));
    let _ = writeln!(t, "output             {}", out.display());
    t
}

fn summary_csv(s: &RunSummary) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    format!(
        "name,mode,seed,params,steps,initial_mlm_loss,final_mlm_loss,eval_mlm_loss,mean_entropy\n{},{},{},{},{},{},{},{},{}\n",
        s.name,
        s.mode.as_str(),
        s.seed,
        s.params,
        s.steps,
        s.initial_mlm_loss,
        s.final_mlm_loss,
        opt(s.eval_mlm_loss),
        opt(s.mean_entropy)
    )
}

fn entropy_table(r: &EntropyReport, step: Option<u64>) -> String {
    let mut t = String::new();
    if let Some(step) = step {
        let _ = writeln!(t, "checkpoint step {step}");
    }
    let _ = writeln!(t, "sequences {}  length buckets {}", r.sequences, r.buckets.len());
    for (layer, heads) in r.layers.iter().enumerate() {
        let cells: Vec<String> = heads.iter().map(|h| format!("h{}={:.3}", h.head, h.entropy)).collect();
        let _ = writeln!(t, "layer {layer:>2}  {}", cells.join("  "));
    }
    let _ = writeln!(t, "mean normalized entropy {:.4}", r.mean);
    t
}

fn entropy_csv(r: &EntropyReport) -> String {
    let mut t = String::from("layer,head,entropy\n");
    for (layer, heads) in r.layers.iter().enumerate() {
        for h in heads {
            let _ = writeln!(t, "{layer},{},{}", h.head, h.entropy);
        }
    }
    t
}

fn compare_csv(rows: &[CompareRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "label",
        "params",
        "training_flops",
        "peak_lr",
        "mode",
        "toy_params",
        "eval_mlm_loss",
        "improvement",
        "mean_entropy",
        "failure",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.params.to_string(),
            r.training_flops.to_string(),
            r.peak_lr.to_string(),
            r.mode.as_str().to_string(),
            r.toy_params.to_string(),
            opt(r.eval_mlm_loss),
            opt(r.improvement),
            opt(r.mean_entropy),
            r.failure.clone().unwrap_or_default(),
        ])?;
    }
    match w.into_inner() {
        Ok(bytes) => Ok(String::from_utf8(bytes)?),
        Err(e) => bail!("writing compare csv: {e}"),
    }
}
