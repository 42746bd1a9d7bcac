//! Layers assembled from graph primitives: linear maps, the LSTM cell and
//! multi-head self-attention.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_linear, uniform, Bound, ParamStore};

/// Variance guard inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x W + b` with parameters `{prefix}.weight` and `{prefix}.bias`.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.gain"))?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    use crate::tensor::Tensor;
    store.insert(format!("{prefix}.gain"), Tensor::full(1, dim, 1.0));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(1, dim));
}

/// Bound LSTM weights. Gate columns are ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[input, 4 * hidden]`
    pub w_ih: Var,
    /// `[hidden, 4 * hidden]`
    pub w_hh: Var,
    /// `[1, 4 * hidden]`
    pub bias: Var,
    pub hidden: usize,
}

impl LstmWeights {
    pub fn bind(g: &Graph, p: &Bound, prefix: &str) -> Result<Self> {
        let w_hh = p.get(&format!("{prefix}.w_hh"))?;
        let hidden = g.value(w_hh).rows();
        Ok(LstmWeights {
            w_ih: p.get(&format!("{prefix}.w_ih"))?,
            w_hh,
            bias: p.get(&format!("{prefix}.bias"))?,
            hidden,
        })
    }
}

pub(crate) fn init_lstm(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
) {
    let bound = 1.0 / (hidden as f64).sqrt();
    store.insert(format!("{prefix}.w_ih"), uniform(rng, input, 4 * hidden, bound));
    store.insert(format!("{prefix}.w_hh"), uniform(rng, hidden, 4 * hidden, bound));
    store.insert(format!("{prefix}.bias"), uniform(rng, 1, 4 * hidden, bound));
}

/// One LSTM step on a `[1, input]` row. Returns `(h', c')`.
pub fn lstm_cell(g: &mut Graph, w: &LstmWeights, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let projected = g.matmul(x, w.w_ih)?;
    lstm_cell_projected(g, w, Some(projected), h, c)
}

/// LSTM step where the input has already been multiplied by `w_ih`
/// (`None` for an all-zero input).
pub fn lstm_cell_projected(
    g: &mut Graph,
    w: &LstmWeights,
    x_proj: Option<Var>,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let hd = w.hidden;
    if g.value(h).shape() != [1, hd] || g.value(c).shape() != [1, hd] {
        return Err(Error::dim(
            "lstm_cell",
            format!(
                "state {:?}/{:?} for hidden size {hd}",
                g.value(h).shape(),
                g.value(c).shape()
            ),
        ));
    }
    let mut z = g.matmul(h, w.w_hh)?;
    if let Some(xp) = x_proj {
        z = g.add(z, xp)?;
    }
    let z = g.add(z, w.bias)?;
    let zi = g.slice_cols(z, 0, hd)?;
    let zf = g.slice_cols(z, hd, 2 * hd)?;
    let zg = g.slice_cols(z, 2 * hd, 3 * hd)?;
    let zo = g.slice_cols(z, 3 * hd, 4 * hd)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Bound attention projections; each is a `[dim, dim]` weight with a
/// `[1, dim]` bias.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionWeights {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        let get = |n: &str| p.get(&format!("{prefix}.{n}"));
        Ok(AttentionWeights {
            wq: get("q.weight")?,
            bq: get("q.bias")?,
            wk: get("k.weight")?,
            bk: get("k.bias")?,
            wv: get("v.weight")?,
            bv: get("v.bias")?,
            wo: get("out.weight")?,
            bo: get("out.bias")?,
        })
    }
}

pub(crate) fn init_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize) {
    for n in ["q", "k", "v", "out"] {
        init_linear(store, rng, &format!("{prefix}.{n}"), dim, dim);
    }
}

/// Scaled dot-product self-attention over the rows of `x` (`[T, D]`),
/// split into `num_heads` heads, concatenated and projected back to `D`.
/// No positional information is used, so the map is equivariant to row
/// permutations.
pub fn multi_head_self_attention(
    g: &mut Graph,
    w: &AttentionWeights,
    x: Var,
    num_heads: usize,
) -> Result<Var> {
    let (_, d) = g.value(x).dims2()?;
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "embedding dim {d} is not divisible into {num_heads} heads"
        )));
    }
    let dh = d / num_heads;
    let q = g.matmul(x, w.wq)?;
    let q = g.add_row(q, w.bq)?;
    let k = g.matmul(x, w.wk)?;
    let k = g.add_row(k, w.bk)?;
    let v = g.matmul(x, w.wv)?;
    let v = g.add_row(v, w.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = g.matmul(cat, w.wo)?;
    g.add_row(out, w.bo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn lstm_store(input: usize, hidden: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_lstm(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), "lstm", input, hidden);
        s
    }

    #[test]
    fn zero_lstm_gives_zero_state() {
        let mut s = lstm_store(3, 4, 0);
        for (_, t) in s.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let w = LstmWeights::bind(&g, &p, "lstm").unwrap();
        let x = g.constant(Tensor::row(vec![5.0, -3.0, 100.0]));
        let h = g.constant(Tensor::zeros(1, 4));
        let c = g.constant(Tensor::zeros(1, 4));
        let (h2, c2) = lstm_cell(&mut g, &w, x, h, c).unwrap();
        assert!(g.value(h2).data().iter().all(|v| *v == 0.0));
        assert!(g.value(c2).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_hidden_is_bounded() {
        let s = lstm_store(3, 4, 1);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let w = LstmWeights::bind(&g, &p, "lstm").unwrap();
        let mut h = g.constant(Tensor::zeros(1, 4));
        let mut c = g.constant(Tensor::zeros(1, 4));
        for step in 0..20 {
            let x = g.constant(Tensor::row(vec![1e3 * step as f64, -1e4, 7.0]));
            (h, c) = lstm_cell(&mut g, &w, x, h, c).unwrap();
            assert!(g.value(h).data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn lstm_rejects_bad_state() {
        let s = lstm_store(3, 4, 1);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let w = LstmWeights::bind(&g, &p, "lstm").unwrap();
        let x = g.constant(Tensor::zeros(1, 3));
        let h = g.constant(Tensor::zeros(1, 5));
        let c = g.constant(Tensor::zeros(1, 4));
        assert!(lstm_cell(&mut g, &w, x, h, c).is_err());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut s = ParamStore::new();
        init_attention(&mut s, &mut ChaCha8Rng::seed_from_u64(0), "att", 6);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let w = AttentionWeights::bind(&p, "att").unwrap();
        let x = g.constant(Tensor::zeros(2, 6));
        assert!(matches!(
            multi_head_self_attention(&mut g, &w, x, 4),
            Err(Error::Config(_))
        ));
        assert!(multi_head_self_attention(&mut g, &w, x, 3).is_ok());
    }

    #[test]
    fn single_frame_attention_is_value_projection() {
        let mut s = ParamStore::new();
        init_attention(&mut s, &mut ChaCha8Rng::seed_from_u64(4), "att", 8);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let w = AttentionWeights::bind(&p, "att").unwrap();
        let x = g.constant(Tensor::row((0..8).map(|i| i as f64 * 0.3 - 1.0).collect()));
        let y = multi_head_self_attention(&mut g, &w, x, 2).unwrap();
        let v = g.matmul(x, w.wv).unwrap();
        let v = g.add_row(v, w.bv).unwrap();
        let o = g.matmul(v, w.wo).unwrap();
        let o = g.add_row(o, w.bo).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(o)) < 1e-12);
    }
}
