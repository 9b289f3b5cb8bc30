use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model family. The family fixes the default per-layer module layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bert,
    #[serde(rename = "groupbert")]
    GroupBert,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Bert => "bert",
            Family::GroupBert => "groupbert",
        }
    }
}

/// One residual-wrapped module inside an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    /// Multi-head self-attention.
    Attention,
    /// Dense feed-forward network `d → 4d → d`.
    Ffn,
    /// Grouped feed-forward network `d → 4d → (grouped) d → d`.
    Gffn,
    /// Gated grouped convolution module.
    Conv,
}

impl ModuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Attention => "attention",
            ModuleKind::Ffn => "ffn",
            ModuleKind::Gffn => "gffn",
            ModuleKind::Conv => "conv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPolicy {
    /// `x + f(LN(x))`, with a final layer norm after the stack.
    Prenorm,
    /// `LN(x + f(x))`.
    Postnorm,
}

/// Architectural description of an encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Number of groups `G` in the GFFN's grouped projection.
    pub ffn_groups: usize,
    pub conv_kernel: usize,
    /// Channels per convolution group.
    pub conv_group_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub segment_types: usize,
    pub norm_policy: NormPolicy,
    pub dropout_rate: f64,
    pub tie_mlm_embedding: bool,
    pub include_pooler: bool,
    pub init_std: f64,
    pub layernorm_eps: f64,
    /// Overrides the family's module order (used by the ablation presets).
    pub layout: Option<Vec<ModuleKind>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::Bert,
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn_groups: 4,
            conv_kernel: 7,
            conv_group_size: 16,
            vocab_size: 30522,
            max_positions: 512,
            segment_types: 2,
            norm_policy: NormPolicy::Postnorm,
            dropout_rate: 0.1,
            tie_mlm_embedding: true,
            include_pooler: true,
            init_std: 0.02,
            layernorm_eps: 1e-6,
            layout: None,
        }
    }
}

impl ModelConfig {
    pub fn bert(layers: usize, hidden: usize) -> Self {
        ModelConfig {
            layers,
            hidden,
            heads: hidden / 64,
            ..Default::default()
        }
    }

    pub fn groupbert(layers: usize, hidden: usize) -> Self {
        ModelConfig {
            family: Family::GroupBert,
            norm_policy: NormPolicy::Prenorm,
            dropout_rate: 0.0,
            ..Self::bert(layers, hidden)
        }
    }

    pub fn ffn_inner(&self) -> usize {
        4 * self.hidden
    }

    pub fn layout(&self) -> Vec<ModuleKind> {
        if let Some(l) = &self.layout {
            return l.clone();
        }
        match self.family {
            Family::Bert => vec![ModuleKind::Attention, ModuleKind::Ffn],
            Family::GroupBert => vec![
                ModuleKind::Attention,
                ModuleKind::Gffn,
                ModuleKind::Conv,
                ModuleKind::Gffn,
            ],
        }
    }

    pub fn has_module(&self, kind: ModuleKind) -> bool {
        self.layout().contains(&kind)
    }

    /// Check every structural invariant, reporting all offending fields at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("hidden", self.hidden),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("segment_types", self.segment_types),
            ("heads", self.heads),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.heads > 0 && self.hidden % self.heads != 0 {
            problems.push(format!("heads ({}) must divide hidden ({})", self.heads, self.hidden));
        }
        if self.has_module(ModuleKind::Gffn)
            && (self.ffn_groups == 0
                || self.hidden % self.ffn_groups != 0
                || self.ffn_inner() % self.ffn_groups != 0)
        {
            problems.push(format!(
                "ffn_groups ({}) must divide hidden ({}) and 4*hidden ({})",
                self.ffn_groups,
                self.hidden,
                self.ffn_inner()
            ));
        }
        if self.has_module(ModuleKind::Conv) {
            if self.conv_group_size == 0 || self.hidden % self.conv_group_size != 0 {
                problems.push(format!(
                    "conv_group_size ({}) must divide hidden ({})",
                    self.conv_group_size, self.hidden
                ));
            }
            if self.conv_kernel % 2 == 0 {
                problems.push(format!("conv_kernel ({}) must be odd", self.conv_kernel));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate ({}) must lie in [0, 1)", self.dropout_rate));
        }
        if self.init_std.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            problems.push(format!("init_std ({}) must be positive", self.init_std));
        }
        if self.layernorm_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            problems.push(format!("layernorm_eps ({}) must be positive", self.layernorm_eps));
        }
        if matches!(&self.layout, Some(l) if l.is_empty()) {
            problems.push("layout must list at least one module".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
