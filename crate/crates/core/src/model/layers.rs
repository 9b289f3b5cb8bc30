//! Graph-building forward functions for each encoder component.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

use super::config::NormPolicy;
use super::weights::{
    ConvModuleWeights, Dense, EmbeddingWeights, FfnWeights, GffnWeights, MhaWeights,
    MlmHeadWeights, Norm, NspHeadWeights,
};

/// Token, segment and padding layout of a batch of equal-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub batch: usize,
    pub seq_len: usize,
    /// Row-major `[batch, seq_len]` token ids.
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl EncoderInput {
    pub fn new(
        batch: usize,
        seq_len: usize,
        tokens: Vec<usize>,
        segments: Vec<usize>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = batch * seq_len;
        if tokens.len() != n || segments.len() != n || mask.len() != n {
            return Err(Error::shape(
                "encoder input",
                &[batch, seq_len],
                &[tokens.len(), segments.len(), mask.len()],
            ));
        }
        Ok(EncoderInput {
            batch,
            seq_len,
            tokens,
            segments,
            mask,
        })
    }

    /// One unpadded sequence, all in segment 0.
    pub fn single(tokens: &[usize]) -> Self {
        EncoderInput {
            batch: 1,
            seq_len: tokens.len(),
            tokens: tokens.to_vec(),
            segments: vec![0; tokens.len()],
            mask: vec![true; tokens.len()],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn unpadded_len(&self, b: usize) -> usize {
        self.mask[b * self.seq_len..(b + 1) * self.seq_len]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    pub(crate) fn check(&self, vocab: usize, segments: usize, positions: usize) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Data("sequence length must be at least 1".into()));
        }
        if self.seq_len > positions {
            return Err(Error::Index {
                what: "position",
                id: self.seq_len - 1,
                position: self.seq_len - 1,
                size: positions,
            });
        }
        for (what, ids, size) in [("token", &self.tokens, vocab), ("segment", &self.segments, segments)] {
            if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &t)| t >= size) {
                return Err(Error::Index {
                    what,
                    id,
                    position,
                    size,
                });
            }
        }
        Ok(())
    }
}

pub fn dense(g: &mut Graph, store: &ParamStore, w: &Dense, x: Var) -> Result<Var> {
    let weight = g.param(store, w.weight);
    let bias = g.param(store, w.bias);
    g.linear(x, weight, Some(bias))
}

pub fn norm(g: &mut Graph, store: &ParamStore, n: &Norm, x: Var, eps: f64) -> Result<Var> {
    let gamma = g.param(store, n.gamma);
    let beta = g.param(store, n.beta);
    g.layernorm(x, gamma, beta, eps)
}

/// Sum of token, position and segment embeddings, layer-normalized, then dropout.
#[allow(clippy::too_many_arguments)]
pub fn embed(
    g: &mut Graph,
    store: &ParamStore,
    w: &EmbeddingWeights,
    input: &EncoderInput,
    eps: f64,
    dropout: f64,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let vocab = store.get(w.token).shape()[0];
    let positions = store.get(w.position).shape()[0];
    let segments = store.get(w.segment).shape()[0];
    input.check(vocab, segments, positions)?;
    let ids_shape = [input.batch, input.seq_len];
    let pos_ids: Vec<usize> = (0..input.rows()).map(|r| r % input.seq_len).collect();

    let tok_table = g.param(store, w.token);
    let pos_table = g.param(store, w.position);
    let seg_table = g.param(store, w.segment);
    let tok = g.embedding(tok_table, &input.tokens, &ids_shape)?;
    let pos = g.embedding(pos_table, &pos_ids, &ids_shape)?;
    let seg = g.embedding(seg_table, &input.segments, &ids_shape)?;
    let sum = g.add(tok, pos)?;
    let sum = g.add(sum, seg)?;
    let normed = norm(g, store, &w.norm, sum, eps)?;
    g.dropout(normed, dropout, rng)
}

/// Output of a self-attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Contextualized representation `[batch, L, d]`.
    pub context: Var,
    /// Node holding the attention weights; read them with [`AttentionOutput::maps`].
    pub attention: Var,
}

impl AttentionOutput {
    /// Attention weights `[batch, heads, L, L]`.
    pub fn maps(&self, g: &Graph) -> Tensor {
        g.attention_probs(self.attention)
            .expect("attention node retains its weights")
    }
}

pub fn mha_forward(
    g: &mut Graph,
    store: &ParamStore,
    w: &MhaWeights,
    x: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let q = dense(g, store, &w.query, x)?;
    let k = dense(g, store, &w.key, x)?;
    let v = dense(g, store, &w.value, x)?;
    let attention = g.attention(q, k, v, heads, mask)?;
    let context = dense(g, store, &w.output, attention)?;
    Ok(AttentionOutput { context, attention })
}

pub fn ffn_forward(g: &mut Graph, store: &ParamStore, w: &FfnWeights, x: Var) -> Result<Var> {
    let h = dense(g, store, &w.fan_out, x)?;
    let h = g.gelu(h)?;
    dense(g, store, &w.fan_in, h)
}

pub fn gffn_forward(g: &mut Graph, store: &ParamStore, w: &GffnWeights, x: Var) -> Result<Var> {
    let h = dense(g, store, &w.fan_out, x)?;
    let h = g.gelu(h)?;
    let blocks = g.param(store, w.grouped);
    let h = g.grouped_linear(h, blocks)?;
    let bias = g.param(store, w.grouped_bias);
    let h = g.bias_add(h, bias)?;
    dense(g, store, &w.output, h)
}

pub fn conv_module_forward(
    g: &mut Graph,
    store: &ParamStore,
    w: &ConvModuleWeights,
    x: Var,
    mask: Option<&[bool]>,
    eps: f64,
) -> Result<Var> {
    if g.shape(x).len() != 3 || g.shape(x)[1] == 0 {
        return Err(Error::Data(format!(
            "convolution module needs a [batch, L >= 1, d] input, got {:?}",
            g.shape(x)
        )));
    }
    let h = dense(g, store, &w.pointwise_in, x)?;
    let h = g.glu(h)?;
    let kernel = g.param(store, w.conv);
    let h = g.grouped_conv1d(h, kernel, mask)?;
    let bias = g.param(store, w.conv_bias);
    let mut h = g.bias_add(h, bias)?;
    if let Some(m) = mask {
        h = g.mask_rows(h, m)?;
    }
    let h = norm(g, store, &w.norm, h, eps)?;
    let h = g.swish(h)?;
    dense(g, store, &w.pointwise_out, h)
}

/// Wrap `module_fn` in a residual connection under the given norm placement.
#[allow(clippy::too_many_arguments)]
pub fn residual_apply<F>(
    g: &mut Graph,
    store: &ParamStore,
    n: &Norm,
    eps: f64,
    policy: NormPolicy,
    dropout: f64,
    rng: &mut dyn RngCore,
    x: Var,
    module_fn: F,
) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    match policy {
        NormPolicy::Prenorm => {
            let normed = norm(g, store, n, x, eps)?;
            let y = module_fn(g, normed)?;
            let y = g.dropout(y, dropout, rng)?;
            g.add(x, y)
        }
        NormPolicy::Postnorm => {
            let y = module_fn(g, x)?;
            let y = g.dropout(y, dropout, rng)?;
            let s = g.add(x, y)?;
            norm(g, store, n, s, eps)
        }
    }
}

/// Dense transform, GELU, layer norm and vocabulary projection over `[.., d]` rows.
pub fn mlm_head(
    g: &mut Graph,
    store: &ParamStore,
    w: &MlmHeadWeights,
    token_table: Var,
    hidden: Var,
    eps: f64,
) -> Result<Var> {
    let h = dense(g, store, &w.transform, hidden)?;
    let h = g.gelu(h)?;
    let h = norm(g, store, &w.norm, h, eps)?;
    let projection = match w.decoder {
        Some(id) => g.param(store, id),
        None => g.transpose(token_table)?,
    };
    let bias = g.param(store, w.bias);
    g.linear(h, projection, Some(bias))
}

/// Pooler over each sequence's first position followed by the two-way classifier.
pub fn nsp_head(
    g: &mut Graph,
    store: &ParamStore,
    w: &NspHeadWeights,
    hidden: Var,
    batch: usize,
    seq_len: usize,
) -> Result<Var> {
    let firsts: Vec<usize> = (0..batch).map(|b| b * seq_len).collect();
    let cls = g.select_rows(hidden, &firsts)?;
    let pooled = dense(g, store, &w.pooler, cls)?;
    let pooled = g.tanh(pooled)?;
    dense(g, store, &w.classifier, pooled)
}
