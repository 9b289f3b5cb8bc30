use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Precision, Tensor};

use super::config::{ModelConfig, ModuleKind, NormPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Truncated normal at two standard deviations.
    Normal,
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter, known before allocation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct EmbeddingWeights {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct MhaWeights {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
}

#[derive(Clone, Debug)]
pub struct FfnWeights {
    pub fan_out: Dense,
    pub fan_in: Dense,
}

#[derive(Clone, Debug)]
pub struct GffnWeights {
    pub fan_out: Dense,
    /// Block-diagonal fan-in, `[G, 4d/G, d/G]`.
    pub grouped: ParamId,
    pub grouped_bias: ParamId,
    pub output: Dense,
}

#[derive(Clone, Debug)]
pub struct ConvModuleWeights {
    pub pointwise_in: Dense,
    /// `[d/s, k, s, s]`.
    pub conv: ParamId,
    pub conv_bias: ParamId,
    pub norm: Norm,
    pub pointwise_out: Dense,
}

#[derive(Clone, Debug)]
pub enum ModuleWeights {
    Attention(MhaWeights),
    Ffn(FfnWeights),
    Gffn(GffnWeights),
    Conv(ConvModuleWeights),
}

impl ModuleWeights {
    pub fn kind(&self) -> ModuleKind {
        match self {
            ModuleWeights::Attention(_) => ModuleKind::Attention,
            ModuleWeights::Ffn(_) => ModuleKind::Ffn,
            ModuleWeights::Gffn(_) => ModuleKind::Gffn,
            ModuleWeights::Conv(_) => ModuleKind::Conv,
        }
    }
}

/// A module together with the layer norm of its residual wrapper.
#[derive(Clone, Debug)]
pub struct ResidualModule {
    pub norm: Norm,
    pub weights: ModuleWeights,
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub modules: Vec<ResidualModule>,
}

#[derive(Clone, Debug)]
pub struct MlmHeadWeights {
    pub transform: Dense,
    pub norm: Norm,
    /// Separate `[d, V]` projection, absent when tied to the token embedding.
    pub decoder: Option<ParamId>,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct NspHeadWeights {
    pub pooler: Dense,
    pub classifier: Dense,
}

#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub embeddings: EmbeddingWeights,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Option<Norm>,
    pub mlm: MlmHeadWeights,
    pub nsp: Option<NspHeadWeights>,
}

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            weight: self.add(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Normal),
            bias: self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.gamma"), vec![d], Init::Ones),
            beta: self.add(format!("{prefix}.beta"), vec![d], Init::Zeros),
        }
    }
}

/// Lay out every parameter of `config` without allocating any storage.
pub fn layout(config: &ModelConfig) -> Result<(Vec<ParamSpec>, ModelWeights)> {
    config.validate()?;
    let d = config.hidden;
    let mut b = Builder::default();

    let embeddings = EmbeddingWeights {
        token: b.add("embeddings.token".into(), vec![config.vocab_size, d], Init::Normal),
        position: b.add("embeddings.position".into(), vec![config.max_positions, d], Init::Normal),
        segment: b.add("embeddings.segment".into(), vec![config.segment_types, d], Init::Normal),
        norm: b.norm("embeddings.norm", d),
    };

    let kinds = config.layout();
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let mut modules = Vec::with_capacity(kinds.len());
        for (m, kind) in kinds.iter().enumerate() {
            let p = format!("encoder.{l}.{m}.{}", kind.as_str());
            let weights = match kind {
                ModuleKind::Attention => ModuleWeights::Attention(MhaWeights {
                    query: b.dense(&format!("{p}.query"), d, d),
                    key: b.dense(&format!("{p}.key"), d, d),
                    value: b.dense(&format!("{p}.value"), d, d),
                    output: b.dense(&format!("{p}.output"), d, d),
                }),
                ModuleKind::Ffn => ModuleWeights::Ffn(FfnWeights {
                    fan_out: b.dense(&format!("{p}.fan_out"), d, config.ffn_inner()),
                    fan_in: b.dense(&format!("{p}.fan_in"), config.ffn_inner(), d),
                }),
                ModuleKind::Gffn => {
                    let g = config.ffn_groups;
                    ModuleWeights::Gffn(GffnWeights {
                        fan_out: b.dense(&format!("{p}.fan_out"), d, config.ffn_inner()),
                        grouped: b.add(
                            format!("{p}.grouped.weight"),
                            vec![g, config.ffn_inner() / g, d / g],
                            Init::Normal,
                        ),
                        grouped_bias: b.add(format!("{p}.grouped.bias"), vec![d], Init::Zeros),
                        output: b.dense(&format!("{p}.output"), d, d),
                    })
                }
                ModuleKind::Conv => {
                    let s = config.conv_group_size;
                    ModuleWeights::Conv(ConvModuleWeights {
                        pointwise_in: b.dense(&format!("{p}.pointwise_in"), d, 2 * d),
                        conv: b.add(
                            format!("{p}.conv.weight"),
                            vec![d / s, config.conv_kernel, s, s],
                            Init::Normal,
                        ),
                        conv_bias: b.add(format!("{p}.conv.bias"), vec![d], Init::Zeros),
                        norm: b.norm(&format!("{p}.conv_norm"), d),
                        pointwise_out: b.dense(&format!("{p}.pointwise_out"), d, d),
                    })
                }
            };
            let norm = b.norm(&format!("{p}.residual_norm"), d);
            modules.push(ResidualModule { norm, weights });
        }
        layers.push(LayerWeights { modules });
    }

    let final_norm = (config.norm_policy == NormPolicy::Prenorm).then(|| b.norm("encoder.final_norm", d));

    let mlm = MlmHeadWeights {
        transform: b.dense("heads.mlm.transform", d, d),
        norm: b.norm("heads.mlm.norm", d),
        decoder: (!config.tie_mlm_embedding)
            .then(|| b.add("heads.mlm.decoder".into(), vec![d, config.vocab_size], Init::Normal)),
        bias: b.add("heads.mlm.bias".into(), vec![config.vocab_size], Init::Zeros),
    };
    let nsp = config.include_pooler.then(|| NspHeadWeights {
        pooler: b.dense("heads.pooler", d, d),
        classifier: b.dense("heads.nsp", d, 2),
    });

    Ok((
        b.specs,
        ModelWeights {
            embeddings,
            layers,
            final_norm,
            mlm,
            nsp,
        },
    ))
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Allocate and initialize every parameter in `specs`, in order.
pub fn materialize(specs: &[ParamSpec], std: f64, seed: u64, precision: Precision) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(precision);
    for spec in specs {
        let t = match spec.init {
            Init::Normal => Tensor::from_fn(&spec.shape, |_| truncated_normal(&mut rng, std)),
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
        };
        store.add(spec.name.clone(), t);
    }
    store
}
