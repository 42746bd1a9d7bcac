//! Encoder-decoder attractor calculation.
//!
//! An LSTM encoder reads the frame embeddings (optionally in a shuffled
//! order); its final hidden and cell states seed an LSTM decoder that is
//! fed zero vectors. Each decoder hidden state is one speaker attractor,
//! and a linear layer with a sigmoid turns each attractor into the
//! probability that it belongs to a real speaker.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activity::PosteriorMatrix;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_lstm, lstm_cell_projected, LstmWeights};
use crate::params::{init_linear, Bound, ParamStore};
use crate::tensor::Tensor;

/// Decoding limit at inference when no attractor falls below the threshold.
pub const DEFAULT_MAX_ATTRACTORS: usize = 20;

/// Attractors (`S x D`, each entry in (-1, 1)) and their existence
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AttractorSet {
    pub attractors: Tensor,
    pub existence: Vec<f64>,
}

/// Order in which embeddings are fed to the attractor encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleOrder {
    perm: Vec<usize>,
    seed: Option<u64>,
}

impl ShuffleOrder {
    pub fn chronological(len: usize) -> Self {
        ShuffleOrder {
            perm: (0..len).collect(),
            seed: None,
        }
    }

    /// Uniformly random permutation drawn from `seed`.
    pub fn random(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(len, &mut rng, Some(seed))
    }

    pub(crate) fn random_with(len: usize, rng: &mut ChaCha8Rng, seed: Option<u64>) -> Self {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(rng);
        ShuffleOrder { perm, seed }
    }

    pub fn from_permutation(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &i in &perm {
            if i >= perm.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Input(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(ShuffleOrder { perm, seed: None })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

pub fn init_eda(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize) {
    init_lstm(store, rng, "eda.encoder", dim, dim);
    init_lstm(store, rng, "eda.decoder", dim, dim);
    init_linear(store, rng, "eda.exist", dim, 1);
}

/// Runs the attractor encoder over `e` (`[T, D]`) in `order`, from zero
/// state. Returns the final `(h, c)`.
pub fn encode_embeddings(g: &mut Graph, p: &Bound, e: Var, order: &ShuffleOrder) -> Result<(Var, Var)> {
    let (t, _) = g.value(e).dims2()?;
    if t == 0 {
        return Err(Error::Input("cannot encode an empty embedding sequence".into()));
    }
    if order.len() != t {
        return Err(Error::Input(format!(
            "order covers {} frames, embeddings have {t}",
            order.len()
        )));
    }
    let w = LstmWeights::bind(g, p, "eda.encoder")?;
    // Project every frame at once, then walk the rows in the chosen order.
    let proj = g.matmul(e, w.w_ih)?;
    let proj = g.gather_rows(proj, order.as_slice())?;
    let mut h = g.constant(Tensor::zeros(1, w.hidden));
    let mut c = g.constant(Tensor::zeros(1, w.hidden));
    for step in 0..t {
        let x = g.slice_rows(proj, step, step + 1)?;
        (h, c) = lstm_cell_projected(g, &w, Some(x), h, c)?;
    }
    Ok((h, c))
}

/// Decodes `count` attractors from the encoder state, feeding zeros.
/// Returns a `[count, D]` node.
pub fn decode_attractors(g: &mut Graph, p: &Bound, init: (Var, Var), count: usize) -> Result<Var> {
    if count == 0 {
        return Err(Error::Input("must decode at least one attractor".into()));
    }
    let w = LstmWeights::bind(g, p, "eda.decoder")?;
    let (mut h, mut c) = init;
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        (h, c) = lstm_cell_projected(g, &w, None, h, c)?;
        rows.push(h);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(&rows)
    }
}

/// `[S, 1]` existence probabilities. With `stop_gradient` the attractors
/// are detached first so only the existence layer learns from this output.
pub fn existence_probs(g: &mut Graph, p: &Bound, attractors: Var, stop_gradient: bool) -> Result<Var> {
    let a = if stop_gradient {
        g.stop_gradient(attractors)
    } else {
        attractors
    };
    let w = p.get("eda.exist.weight")?;
    let b = p.get("eda.exist.bias")?;
    let z = g.matmul(a, w)?;
    let z = g.add_row(z, b)?;
    Ok(g.sigmoid(z))
}

/// Logits `e A^T` as a `[T, S]` node (no bias).
pub fn attractor_logits(g: &mut Graph, e: Var, attractors: Var) -> Result<Var> {
    let ed = g.value(e).dims2()?.1;
    let ad = g.value(attractors).dims2()?.1;
    if ed != ad {
        return Err(Error::dim(
            "attractor_posteriors",
            format!("attractors have {ad} dims, embeddings {ed}"),
        ));
    }
    g.matmul_nt(e, attractors)
}

/// `sigmoid(A^T e_t)` for every frame.
pub fn attractor_posteriors(e: &Tensor, attractors: &Tensor) -> Result<PosteriorMatrix> {
    let mut g = Graph::new();
    let ev = g.constant(e.clone());
    let av = g.constant(attractors.clone());
    let logits = attractor_logits(&mut g, ev, av)?;
    let post = g.sigmoid(logits);
    PosteriorMatrix::from_frame_major(g.value(post))
}

/// Estimated number of speakers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpeakerCount {
    pub count: usize,
    /// No probability fell below the threshold; `count` is the cap.
    pub capped: bool,
}

/// Number of probabilities before the first one below `tau`.
pub fn estimate_speaker_count(existence: &[f64], tau: f64) -> SpeakerCount {
    match existence.iter().position(|&q| q < tau) {
        Some(n) => SpeakerCount {
            count: n,
            capped: false,
        },
        None => SpeakerCount {
            count: existence.len(),
            capped: true,
        },
    }
}

/// Decodes attractors one at a time until an existence probability drops
/// below `tau` or `max_attractors` have been produced. Every decoded
/// attractor is returned (including the one below threshold).
pub fn decode_until_silent(
    g: &mut Graph,
    p: &Bound,
    init: (Var, Var),
    tau: f64,
    max_attractors: usize,
) -> Result<(AttractorSet, SpeakerCount)> {
    let w = LstmWeights::bind(g, p, "eda.decoder")?;
    let wx = p.get("eda.exist.weight")?;
    let bx = p.get("eda.exist.bias")?;
    let (mut h, mut c) = init;
    let mut rows: Vec<f64> = Vec::new();
    let mut existence = Vec::new();
    for _ in 0..max_attractors.max(1) {
        (h, c) = lstm_cell_projected(g, &w, None, h, c)?;
        let z = g.matmul(h, wx)?;
        let z = g.add_row(z, bx)?;
        let q = g.sigmoid(z);
        rows.extend_from_slice(g.value(h).data());
        existence.push(g.scalar(q));
        if g.scalar(q) < tau {
            break;
        }
    }
    let dim = w.hidden;
    let count = estimate_speaker_count(&existence, tau);
    if count.capped {
        log::warn!("attractor decoding hit the cap of {max_attractors} without a sub-threshold probability");
    }
    let attractors = Tensor::matrix(existence.len(), dim, rows)?;
    Ok((
        AttractorSet {
            attractors,
            existence,
        },
        count,
    ))
}
