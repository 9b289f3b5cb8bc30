//! BERT and GroupBERT encoder stacks with masked-LM and next-sentence heads.

mod checkpoint;
mod config;
mod layers;
mod weights;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Precision, Var};

pub use checkpoint::{read_header, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC};
pub use config::{Family, ModelConfig, ModuleKind, NormPolicy};
pub use layers::{
    conv_module_forward, dense, embed, ffn_forward, gffn_forward, mha_forward, mlm_head, norm,
    nsp_head, residual_apply, AttentionOutput, EncoderInput,
};
pub use weights::{
    layout, materialize, ConvModuleWeights, Dense, EmbeddingWeights, FfnWeights, GffnWeights,
    Init, LayerWeights, MhaWeights, MlmHeadWeights, ModelWeights, ModuleWeights, Norm,
    NspHeadWeights, ParamSpec, ResidualModule,
};

/// Encoder output together with every attention node, in layer order.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub attention: Vec<AttentionOutput>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[batch, L, V]`.
    pub mlm_logits: Var,
    /// `[batch, 2]`, present when the pooler is included.
    pub nsp_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    weights: ModelWeights,
}

/// Build `config` with weights drawn deterministically from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(config, seed, Precision::Oracle64)
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64, precision: Precision) -> Result<Self> {
        let (specs, weights) = layout(config)?;
        let store = materialize(&specs, config.init_std, seed, precision);
        Ok(Model {
            config: config.clone(),
            store,
            weights,
        })
    }

    /// Wrap an existing parameter store, checking names and shapes against `config`.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let (specs, weights) = layout(config)?;
        if specs.len() != store.len() {
            return Err(Error::Config(format!(
                "parameter store holds {} tensors, configuration needs {}",
                store.len(),
                specs.len()
            )));
        }
        for (spec, (_, p)) in specs.iter().zip(store.iter()) {
            if spec.name != p.name || spec.shape != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(Model {
            config: config.clone(),
            store,
            weights,
        })
    }

    /// Parameter layout of `config`, computed without allocating weights.
    pub fn param_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
        Ok(layout(config)?.0)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    pub fn precision(&self) -> Precision {
        self.store.precision()
    }

    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        input: &EncoderInput,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let eps = cfg.layernorm_eps;
        let store = &self.store;
        let mut x = embed(g, store, &self.weights.embeddings, input, eps, dropout, rng)?;
        let mut attention = Vec::new();
        for layer in &self.weights.layers {
            for module in &layer.modules {
                let mut att = None;
                x = residual_apply(
                    g,
                    store,
                    &module.norm,
                    eps,
                    cfg.norm_policy,
                    dropout,
                    rng,
                    x,
                    |g, h| match &module.weights {
                        ModuleWeights::Attention(w) => {
                            let out = mha_forward(g, store, w, h, cfg.heads, Some(&input.mask))?;
                            att = Some(out);
                            Ok(out.context)
                        }
                        ModuleWeights::Ffn(w) => ffn_forward(g, store, w, h),
                        ModuleWeights::Gffn(w) => gffn_forward(g, store, w, h),
                        ModuleWeights::Conv(w) => {
                            conv_module_forward(g, store, w, h, Some(&input.mask), eps)
                        }
                    },
                )?;
                attention.extend(att);
            }
        }
        if let Some(n) = &self.weights.final_norm {
            x = norm(g, store, n, x, eps)?;
        }
        Ok(EncoderOutput {
            hidden: x,
            attention,
        })
    }

    /// Masked-LM logits for `[.., d]` hidden rows.
    pub fn mlm_logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let table = g.param(&self.store, self.weights.embeddings.token);
        mlm_head(g, &self.store, &self.weights.mlm, table, hidden, self.config.layernorm_eps)
    }

    pub fn nsp_logits(&self, g: &mut Graph, hidden: Var, input: &EncoderInput) -> Result<Option<Var>> {
        match &self.weights.nsp {
            Some(w) => nsp_head(g, &self.store, w, hidden, input.batch, input.seq_len).map(Some),
            None => Ok(None),
        }
    }

    pub fn heads_forward(&self, g: &mut Graph, hidden: Var, input: &EncoderInput) -> Result<HeadOutput> {
        Ok(HeadOutput {
            mlm_logits: self.mlm_logits(g, hidden)?,
            nsp_logits: self.nsp_logits(g, hidden, input)?,
        })
    }

    /// Dropout-free encoder pass.
    pub fn encode(&self, g: &mut Graph, input: &EncoderInput) -> Result<EncoderOutput> {
        self.encoder_forward(g, input, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }
}
