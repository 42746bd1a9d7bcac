//! Frame-embedding network: a linear input projection followed by stacked
//! post-norm Transformer encoder blocks without positional encoding, plus
//! the fixed-size linear classification head used by the conventional
//! (attractor-free) model.

use rand_chacha::ChaCha8Rng;

use crate::activity::PosteriorMatrix;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    init_attention, init_layer_norm, layer_norm, linear, multi_head_self_attention,
    AttentionWeights,
};
use crate::params::{init_linear, Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl EncoderConfig {
    /// Four blocks, four heads, 256-dimensional embeddings.
    pub fn standard(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            dim: 256,
            blocks: 4,
            heads: 4,
            ff_dim: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dim {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        if self.input_dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config("input and feed-forward dims must be positive".into()));
        }
        Ok(())
    }
}

/// `T x D` frame embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub embeddings: Tensor,
}

pub fn init_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) {
    init_linear(store, rng, "encoder.input", cfg.input_dim, cfg.dim);
    for b in 0..cfg.blocks {
        let p = format!("encoder.block{b}");
        init_attention(store, rng, &format!("{p}.attn"), cfg.dim);
        init_layer_norm(store, &format!("{p}.norm1"), cfg.dim);
        init_linear(store, rng, &format!("{p}.ff1"), cfg.dim, cfg.ff_dim);
        init_linear(store, rng, &format!("{p}.ff2"), cfg.ff_dim, cfg.dim);
        init_layer_norm(store, &format!("{p}.norm2"), cfg.dim);
    }
}

/// Records the encoder on `g` for the `[T, F]` input `x`; returns the
/// `[T, D]` embeddings.
pub fn embed(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let (_, f) = g.value(x).dims2()?;
    if f != cfg.input_dim {
        return Err(Error::Config(format!(
            "features have {f} dims but the encoder expects {}",
            cfg.input_dim
        )));
    }
    let mut e = linear(g, p, "encoder.input", x)?;
    for b in 0..cfg.blocks {
        let pre = format!("encoder.block{b}");
        let attn = AttentionWeights::bind(p, &format!("{pre}.attn"))?;
        let a = multi_head_self_attention(g, &attn, e, cfg.heads)?;
        let h = g.add(e, a)?;
        let h = layer_norm(g, p, &format!("{pre}.norm1"), h)?;
        let ff = linear(g, p, &format!("{pre}.ff1"), h)?;
        let ff = g.relu(ff);
        let ff = linear(g, p, &format!("{pre}.ff2"), ff)?;
        let o = g.add(h, ff)?;
        e = layer_norm(g, p, &format!("{pre}.norm2"), o)?;
    }
    Ok(e)
}

/// Embeddings for a feature matrix without recording gradients.
pub fn embed_frames(params: &ParamStore, cfg: &EncoderConfig, x: &Tensor) -> Result<EmbeddingSequence> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let e = embed(&mut g, &p, cfg, xv)?;
    Ok(EmbeddingSequence {
        embeddings: g.value(e).clone(),
    })
}

/// Fixed classifier head: `head.weight` is `[D, S]`, `head.bias` is `[1, S]`.
pub fn init_fixed_head(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize, speakers: usize) {
    init_linear(store, rng, "head", dim, speakers);
}

/// `sigmoid(e W + b)` as a `[T, S]` node.
pub fn fixed_head_logits(g: &mut Graph, p: &Bound, e: Var) -> Result<Var> {
    let w = p.get("head.weight")?;
    let d = g.value(w).rows();
    let (_, ed) = g.value(e).dims2()?;
    if d != ed {
        return Err(Error::dim("fixed_head", format!("head expects {d} dims, embeddings have {ed}")));
    }
    linear(g, p, "head", e)
}

/// Posteriors of the fixed head for precomputed embeddings.
pub fn fixed_head_posteriors(e: &EmbeddingSequence, params: &ParamStore) -> Result<PosteriorMatrix> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let ev = g.constant(e.embeddings.clone());
    let logits = fixed_head_logits(&mut g, &p, ev)?;
    let post = g.sigmoid(logits);
    PosteriorMatrix::from_frame_major(g.value(post))
}
