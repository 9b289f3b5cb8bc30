//! Closed-form parameter and FLOP counts, and pipeline batch arithmetic.
//!
//! Parameter counts are written out from the architecture description rather
//! than derived from [`crate::model::layout`], so the two can be cross-checked.
//!
//! FLOP convention: one multiply-accumulate is two FLOPs, a training step costs
//! three forward passes, embedding lookups are free, and the MLM vocabulary
//! projection is counted over every position. Elementwise work is counted at
//! leading order using [`FLOP_CONSTANTS`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModuleKind, NormPolicy};

/// FLOPs charged per element for non-matmul work.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopConstants {
    pub layernorm: u64,
    pub softmax: u64,
    pub gelu: u64,
    pub swish: u64,
    pub glu: u64,
    pub tanh: u64,
    /// Bias additions, residual additions and score scaling.
    pub add: u64,
}

pub const FLOP_CONSTANTS: FlopConstants = FlopConstants {
    layernorm: 5,
    softmax: 3,
    gelu: 8,
    swish: 4,
    glu: 5,
    tanh: 4,
    add: 1,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamComponent {
    pub component: String,
    pub instances: u64,
    pub params_each: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopComponent {
    pub component: String,
    pub instances: u64,
    pub flops_each: u64,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub seq_len: usize,
    pub steps: u64,
    pub global_batch: u64,
}

/// Pre-training phases, run in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSchedule {
    pub phases: Vec<Phase>,
}

impl TrainingSchedule {
    /// 8e5 steps at length 128 then 2e5 steps at length 384, global batch 480.
    pub fn two_phase() -> Self {
        TrainingSchedule {
            phases: vec![
                Phase {
                    seq_len: 128,
                    steps: 800_000,
                    global_batch: 480,
                },
                Phase {
                    seq_len: 384,
                    steps: 200_000,
                    global_batch: 480,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("schedule has no phases".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.steps == 0 || p.seq_len == 0 || p.global_batch == 0 {
                return Err(Error::Config(format!(
                    "phase {i}: seq_len, steps and global_batch must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.steps).sum()
    }
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self::two_phase()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseFlops {
    pub seq_len: usize,
    pub steps: u64,
    pub global_batch: u64,
    pub forward_flops_per_sequence: u64,
    pub training_flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingFlops {
    pub phases: Vec<PhaseFlops>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardFlops {
    pub seq_len: usize,
    pub batch: u64,
    pub components: Vec<FlopComponent>,
    /// One encoder layer, single sequence.
    pub per_layer: u64,
    pub total: u64,
}

/// Parameter and FLOP summary for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub components: Vec<ParamComponent>,
    pub total_params: u64,
    pub forward: Option<ForwardFlops>,
    pub training: Option<TrainingFlops>,
}

fn component(name: &str, instances: u64, each: u64) -> ParamComponent {
    ParamComponent {
        component: name.to_string(),
        instances,
        params_each: each,
        params: instances * each,
    }
}

fn module_count(config: &ModelConfig, kind: ModuleKind) -> u64 {
    config.layout().iter().filter(|&&k| k == kind).count() as u64 * config.layers as u64
}

/// Parameters of one module, including the layer norm of its residual wrapper.
fn module_params(config: &ModelConfig, kind: ModuleKind) -> u64 {
    let d = config.hidden as u64;
    let inner = config.ffn_inner() as u64;
    let norm = 2 * d;
    norm + match kind {
        ModuleKind::Attention => 4 * (d * d + d),
        ModuleKind::Ffn => (d * inner + inner) + (inner * d + d),
        ModuleKind::Gffn => {
            let g = config.ffn_groups as u64;
            (d * inner + inner) + (inner * d / g + d) + (d * d + d)
        }
        ModuleKind::Conv => {
            let (k, s) = (config.conv_kernel as u64, config.conv_group_size as u64);
            (d * 2 * d + 2 * d) + (d * k * s + d) + norm + (d * d + d)
        }
    }
}

/// Exact parameter counts by component.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let d = config.hidden as u64;
    let v = config.vocab_size as u64;
    let mut components = vec![component(
        "embeddings",
        1,
        (v + config.max_positions as u64 + config.segment_types as u64) * d + 2 * d,
    )];
    for kind in [ModuleKind::Attention, ModuleKind::Ffn, ModuleKind::Gffn, ModuleKind::Conv] {
        let n = module_count(config, kind);
        if n > 0 {
            components.push(component(kind.as_str(), n, module_params(config, kind)));
        }
    }
    if config.norm_policy == NormPolicy::Prenorm {
        components.push(component("final_norm", 1, 2 * d));
    }
    let decoder = if config.tie_mlm_embedding { 0 } else { d * v };
    components.push(component("mlm_head", 1, d * d + d + 2 * d + decoder + v));
    if config.include_pooler {
        components.push(component("pooler", 1, d * d + d));
        components.push(component("nsp_head", 1, 2 * d + 2));
    }
    let total_params = components.iter().map(|c| c.params).sum();
    Ok(CostReport {
        label: String::new(),
        components,
        total_params,
        forward: None,
        training: None,
    })
}

fn module_flops(config: &ModelConfig, kind: ModuleKind, l: u64) -> u64 {
    let c = FLOP_CONSTANTS;
    let d = config.hidden as u64;
    let inner = config.ffn_inner() as u64;
    let h = config.heads as u64;
    let dense = |i: u64, o: u64| 2 * l * i * o + c.add * l * o;
    let residual = c.layernorm * l * d + c.add * l * d;
    residual
        + match kind {
            ModuleKind::Attention => {
                let scores = 2 * l * l * d + c.add * h * l * l;
                let softmax = c.softmax * h * l * l;
                let mix = 2 * l * l * d;
                4 * dense(d, d) + scores + softmax + mix
            }
            ModuleKind::Ffn => dense(d, inner) + c.gelu * l * inner + dense(inner, d),
            ModuleKind::Gffn => {
                let g = config.ffn_groups as u64;
                dense(d, inner) + c.gelu * l * inner + 2 * l * inner * d / g + c.add * l * d + dense(d, d)
            }
            ModuleKind::Conv => {
                let (k, s) = (config.conv_kernel as u64, config.conv_group_size as u64);
                dense(d, 2 * d)
                    + c.glu * l * d
                    + 2 * l * k * s * d
                    + c.add * l * d
                    + c.layernorm * l * d
                    + c.swish * l * d
                    + dense(d, d)
            }
        }
}

/// Forward FLOPs for `batch` sequences of length `seq_len`.
pub fn count_flops(config: &ModelConfig, seq_len: usize, batch: u64) -> Result<ForwardFlops> {
    config.validate()?;
    if seq_len == 0 || seq_len > config.max_positions {
        return Err(Error::Config(format!(
            "sequence length {seq_len} outside 1..={}",
            config.max_positions
        )));
    }
    let c = FLOP_CONSTANTS;
    let l = seq_len as u64;
    let d = config.hidden as u64;
    let v = config.vocab_size as u64;
    let mut components = vec![FlopComponent {
        component: "embeddings".into(),
        instances: 1,
        flops_each: 2 * c.add * l * d + c.layernorm * l * d,
        flops: 0,
    }];
    let mut per_layer = 0;
    for kind in [ModuleKind::Attention, ModuleKind::Ffn, ModuleKind::Gffn, ModuleKind::Conv] {
        let n = module_count(config, kind);
        if n > 0 {
            let each = module_flops(config, kind, l);
            per_layer += each * n / config.layers as u64;
            components.push(FlopComponent {
                component: kind.as_str().into(),
                instances: n,
                flops_each: each,
                flops: 0,
            });
        }
    }
    if config.norm_policy == NormPolicy::Prenorm {
        components.push(FlopComponent {
            component: "final_norm".into(),
            instances: 1,
            flops_each: c.layernorm * l * d,
            flops: 0,
        });
    }
    components.push(FlopComponent {
        component: "mlm_head".into(),
        instances: 1,
        flops_each: 2 * l * d * d + c.add * l * d + c.gelu * l * d + c.layernorm * l * d + 2 * l * d * v + c.add * l * v,
        flops: 0,
    });
    if config.include_pooler {
        components.push(FlopComponent {
            component: "pooler".into(),
            instances: 1,
            flops_each: 2 * d * d + c.add * d + c.tanh * d,
            flops: 0,
        });
        components.push(FlopComponent {
            component: "nsp_head".into(),
            instances: 1,
            flops_each: 2 * d * 2 + 2 * c.add,
            flops: 0,
        });
    }
    for comp in &mut components {
        comp.flops = comp.instances * comp.flops_each * batch;
    }
    let total = components.iter().map(|c| c.flops).sum();
    Ok(ForwardFlops {
        seq_len,
        batch,
        components,
        per_layer,
        total,
    })
}

/// Σ over phases of 3 × forward FLOPs × global batch × steps.
pub fn training_flops(config: &ModelConfig, schedule: &TrainingSchedule) -> Result<TrainingFlops> {
    schedule.validate()?;
    let mut phases = Vec::with_capacity(schedule.phases.len());
    for p in &schedule.phases {
        let fwd = count_flops(config, p.seq_len, 1)?.total;
        phases.push(PhaseFlops {
            seq_len: p.seq_len,
            steps: p.steps,
            global_batch: p.global_batch,
            forward_flops_per_sequence: fwd,
            training_flops: 3.0 * fwd as f64 * p.global_batch as f64 * p.steps as f64,
        });
    }
    let total = phases.iter().map(|p| p.training_flops).sum();
    Ok(TrainingFlops { phases, total })
}

/// Full cost report: parameters, forward FLOPs at the first phase's length and training FLOPs.
pub fn cost_report(label: &str, config: &ModelConfig, schedule: &TrainingSchedule) -> Result<CostReport> {
    let mut report = count_params(config)?;
    report.label = label.to_string();
    let first = schedule
        .phases
        .first()
        .ok_or_else(|| Error::Config("schedule has no phases".into()))?;
    report.forward = Some(count_flops(config, first.seq_len, 1)?);
    report.training = Some(training_flops(config, schedule)?);
    Ok(report)
}

// ---------------------------------------------------------------------------
// rendering

fn millions(n: u64) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

/// Aligned side-by-side table of several reports.
pub fn render_table(reports: &[CostReport]) -> String {
    let mut rows: Vec<String> = Vec::new();
    for r in reports {
        for c in &r.components {
            if !rows.contains(&c.component) {
                rows.push(c.component.clone());
            }
        }
    }
    let label_width = rows.iter().map(String::len).max().unwrap_or(0).max(24);
    let col = reports
        .iter()
        .map(|r| r.label.len().max(16))
        .collect::<Vec<_>>();
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "component");
    for (r, w) in reports.iter().zip(&col) {
        let _ = write!(out, "  {:>w$}", r.label);
    }
    out.push('\n');
    let line = |out: &mut String, name: &str, cells: Vec<String>| {
        let _ = write!(out, "{name:<label_width$}");
        for (cell, w) in cells.iter().zip(&col) {
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    };
    for name in &rows {
        let cells = reports
            .iter()
            .map(|r| {
                r.components
                    .iter()
                    .find(|c| &c.component == name)
                    .map(|c| c.params.to_string())
                    .unwrap_or_else(|| "-".into())
            })
            .collect();
        line(&mut out, name, cells);
    }
    line(&mut out, "total parameters", reports.iter().map(|r| r.total_params.to_string()).collect());
    line(&mut out, "total (millions)", reports.iter().map(|r| millions(r.total_params)).collect());
    if reports.iter().any(|r| r.forward.is_some()) {
        line(
            &mut out,
            "forward FLOPs / sequence",
            reports
                .iter()
                .map(|r| r.forward.as_ref().map_or("-".into(), |f| format!("{:.3e}", f.total as f64)))
                .collect(),
        );
        line(
            &mut out,
            "forward FLOPs / layer",
            reports
                .iter()
                .map(|r| r.forward.as_ref().map_or("-".into(), |f| format!("{:.3e}", f.per_layer as f64)))
                .collect(),
        );
    }
    if reports.iter().any(|r| r.training.is_some()) {
        let phases = reports
            .iter()
            .filter_map(|r| r.training.as_ref().map(|t| t.phases.len()))
            .max()
            .unwrap_or(0);
        for i in 0..phases {
            line(
                &mut out,
                &format!("training FLOPs, phase {}", i + 1),
                reports
                    .iter()
                    .map(|r| {
                        r.training
                            .as_ref()
                            .and_then(|t| t.phases.get(i))
                            .map_or("-".into(), |p| format!("{:.2e}", p.training_flops))
                    })
                    .collect(),
            );
        }
        line(
            &mut out,
            "training FLOPs",
            reports
                .iter()
                .map(|r| r.training.as_ref().map_or("-".into(), |t| format!("{:.2e}", t.total)))
                .collect(),
        );
    }
    if let [base, rest @ ..] = reports {
        for r in rest {
            if let (Some(fb), Some(fr)) = (&base.forward, &r.forward) {
                let _ = writeln!(
                    out,
                    "per-layer forward FLOP increase, {} vs {}: {:+.1}%",
                    r.label,
                    base.label,
                    100.0 * (fr.per_layer as f64 / fb.per_layer as f64 - 1.0)
                );
            }
            if let (Some(tb), Some(tr)) = (&base.training, &r.training) {
                let _ = writeln!(
                    out,
                    "end-to-end training FLOP ratio, {} / {}: {:.3}",
                    r.label,
                    base.label,
                    tr.total / tb.total
                );
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    label: String,
    component: String,
    instances: u64,
    params_each: u64,
    params: u64,
}

/// One row per (report, component) plus a `total` row per report.
pub fn write_csv<W: std::io::Write>(reports: &[CostReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in reports {
        for c in &r.components {
            w.serialize(CsvRow {
                label: r.label.clone(),
                component: c.component.clone(),
                instances: c.instances,
                params_each: c.params_each,
                params: c.params,
            })?;
        }
        w.serialize(CsvRow {
            label: r.label.clone(),
            component: "total".into(),
            instances: 1,
            params_each: r.total_params,
            params: r.total_params,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Parse CSV written by [`write_csv`] back into parameter-only reports,
/// checking that every total equals the sum of its components.
pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<CostReport>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut reports: Vec<CostReport> = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row?;
        if row.params != row.instances * row.params_each {
            return Err(Error::Data(format!(
                "{}/{}: params != instances x params_each",
                row.label, row.component
            )));
        }
        if reports.last().map(|r| r.label != row.label).unwrap_or(true) {
            reports.push(CostReport {
                label: row.label.clone(),
                components: Vec::new(),
                total_params: 0,
                forward: None,
                training: None,
            });
        }
        let report = reports.last_mut().expect("pushed above");
        if row.component == "total" {
            let sum: u64 = report.components.iter().map(|c| c.params).sum();
            if sum != row.params {
                return Err(Error::Data(format!(
                    "{}: total {} differs from component sum {sum}",
                    row.label, row.params
                )));
            }
            report.total_params = row.params;
        } else {
            report.components.push(ParamComponent {
                component: row.component,
                instances: row.instances,
                params_each: row.params_each,
                params: row.params,
            });
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// pipeline arithmetic

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub replicas: u64,
    pub accumulation_factor: u64,
    pub pipeline_depth: u64,
    pub compute_batch_size: u64,
}

impl PipelinePlan {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("replicas", self.replicas),
            ("accumulation_factor", self.accumulation_factor),
            ("pipeline_depth", self.pipeline_depth),
            ("compute_batch_size", self.compute_batch_size),
        ];
        let zero: Vec<&str> = fields.iter().filter(|(_, v)| *v == 0).map(|(n, _)| *n).collect();
        if zero.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{} must be positive", zero.join(", "))))
        }
    }
}

/// Replicas × accumulation factor × pipeline depth × compute batch size.
pub fn global_batch(plan: &PipelinePlan) -> Result<u64> {
    plan.validate()?;
    Ok(plan.replicas * plan.accumulation_factor * plan.pipeline_depth * plan.compute_batch_size)
}

/// Accumulation factor giving exactly `target` global batch, if one exists.
pub fn solve_accumulation(
    target: u64,
    replicas: u64,
    pipeline_depth: u64,
    compute_batch_size: u64,
) -> Result<PipelinePlan> {
    let per_step = replicas * pipeline_depth * compute_batch_size;
    if per_step == 0 || target == 0 {
        return Err(Error::Config(
            "target, replicas, pipeline_depth and compute_batch_size must be positive".into(),
        ));
    }
    if target % per_step != 0 {
        return Err(Error::Config(format!(
            "global batch {target} is not a multiple of replicas x depth x compute batch = {per_step}"
        )));
    }
    Ok(PipelinePlan {
        replicas,
        accumulation_factor: target / per_step,
        pipeline_depth,
        compute_batch_size,
    })
}
