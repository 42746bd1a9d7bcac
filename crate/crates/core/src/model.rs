//! The complete diarization network: encoder plus either the attractor
//! module or a fixed classification head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activity::PosteriorMatrix;
use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::FlatConfig;
use crate::eda::{
    attractor_logits, decode_attractors, decode_until_silent, encode_embeddings, existence_probs,
    init_eda, AttractorSet, ShuffleOrder, SpeakerCount, DEFAULT_MAX_ATTRACTORS,
};
use crate::encoder::{embed, fixed_head_logits, init_encoder, init_fixed_head, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::objective::{existence_loss_graph, pit_loss_graph, ExistenceRouting, PermutationAssignment};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Attractors from the LSTM encoder-decoder.
    Eda,
    /// Linear layer with a fixed number of outputs.
    Fixed { speakers: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    /// Subtract the per-recording feature mean before the network.
    pub mean_norm: bool,
}

pub const MODEL_KEYS: &[&str] = &[
    "model.input_dim",
    "model.dim",
    "model.blocks",
    "model.heads",
    "model.ff_dim",
    "model.mean_norm",
    "model.head",
    "model.fixed_speakers",
];

impl ModelConfig {
    pub fn eda(encoder: EncoderConfig) -> Self {
        ModelConfig {
            encoder,
            head: HeadKind::Eda,
            mean_norm: true,
        }
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut c = FlatConfig::new();
        let e = &self.encoder;
        c.set("model.input_dim", e.input_dim);
        c.set("model.dim", e.dim);
        c.set("model.blocks", e.blocks);
        c.set("model.heads", e.heads);
        c.set("model.ff_dim", e.ff_dim);
        c.set("model.mean_norm", self.mean_norm);
        match self.head {
            HeadKind::Eda => c.set("model.head", "eda"),
            HeadKind::Fixed { speakers } => {
                c.set("model.head", "fixed");
                c.set("model.fixed_speakers", speakers);
            }
        }
        c
    }

    pub fn from_flat(c: &FlatConfig) -> Result<Self> {
        let need = |k: &str| -> Result<usize> {
            c.get(k)?
                .ok_or_else(|| Error::Config(format!("model setting `{k}` is missing")))
        };
        let encoder = EncoderConfig {
            input_dim: need("model.input_dim")?,
            dim: need("model.dim")?,
            blocks: need("model.blocks")?,
            heads: need("model.heads")?,
            ff_dim: need("model.ff_dim")?,
        };
        encoder.validate()?;
        let head = match c.get_str("model.head").unwrap_or("eda") {
            "eda" => HeadKind::Eda,
            "fixed" => HeadKind::Fixed {
                speakers: need("model.fixed_speakers")?,
            },
            other => return Err(Error::Config(format!("unknown head `{other}`"))),
        };
        Ok(ModelConfig {
            encoder,
            head,
            mean_norm: c.get_or("model.mean_norm", true)?,
        })
    }
}

/// Inference-time knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct InferOptions {
    /// Existence-probability threshold for counting speakers.
    pub tau: f64,
    /// `Some(seed)` shuffles the attractor-encoder input; `None` keeps
    /// chronological order.
    pub shuffle_seed: Option<u64>,
    pub max_attractors: usize,
    /// Use exactly this many attractors instead of estimating the count.
    pub num_speakers: Option<usize>,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            tau: 0.5,
            shuffle_seed: Some(0),
            max_attractors: DEFAULT_MAX_ATTRACTORS,
            num_speakers: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub posteriors: PosteriorMatrix,
    /// Present for the attractor head.
    pub attractors: Option<AttractorSet>,
    pub count: SpeakerCount,
}

/// Loss nodes of one training example.
#[derive(Clone, Debug)]
pub struct TrainLoss {
    pub total: Var,
    pub diar: Var,
    pub exist: Option<Var>,
    pub assignment: PermutationAssignment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EendModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl EendModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, &mut rng, &config.encoder);
        match config.head {
            HeadKind::Eda => init_eda(&mut params, &mut rng, config.encoder.dim),
            HeadKind::Fixed { speakers } => {
                init_fixed_head(&mut params, &mut rng, config.encoder.dim, speakers)
            }
        }
        Ok(EendModel { config, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: self.config.to_flat().to_text(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_flat(&FlatConfig::parse(&ck.meta, "checkpoint")?)?;
        let reference = EendModel::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = ck.params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(EendModel {
            config,
            params: ck.params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Network input for a recording: the frame matrix, mean-normalised
    /// when configured.
    pub fn prepare(&self, features: &FeatureSequence) -> Result<Tensor> {
        if features.dim() != self.config.encoder.input_dim {
            return Err(Error::Config(format!(
                "features have {} dims, model expects {}",
                features.dim(),
                self.config.encoder.input_dim
            )));
        }
        let mut f = features.clone();
        if self.config.mean_norm {
            f.mean_normalize();
        }
        Ok(f.frames)
    }

    /// Records the training loss for prepared frames `x` (`[T, F]`) and
    /// `S x T` labels. The attractor head decodes `S + 1` attractors: the
    /// first `S` produce posteriors, all `S + 1` feed the existence loss.
    #[allow(clippy::too_many_arguments)]
    pub fn train_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: &Tensor,
        labels: &Tensor,
        order: &ShuffleOrder,
        routing: ExistenceRouting,
        alpha: f64,
    ) -> Result<TrainLoss> {
        let (s, t) = labels.dims2()?;
        if t != x.rows() {
            return Err(Error::Input(format!(
                "labels cover {t} frames, features {}",
                x.rows()
            )));
        }
        let xv = g.constant(x.clone());
        let e = embed(g, p, &self.config.encoder, xv)?;
        match self.config.head {
            HeadKind::Eda => {
                let init = encode_embeddings(g, p, e, order)?;
                let attractors = decode_attractors(g, p, init, s + 1)?;
                let (diar, assignment) = if s > 0 {
                    let active = g.slice_rows(attractors, 0, s)?;
                    let logits = attractor_logits(g, e, active)?;
                    let post = g.sigmoid(logits);
                    pit_loss_graph(g, post, labels)?
                } else {
                    let empty = g.constant(Tensor::zeros(t, 0));
                    pit_loss_graph(g, empty, labels)?
                };
                let q = existence_probs(g, p, attractors, routing == ExistenceRouting::StopGradient)?;
                let exist = existence_loss_graph(g, q)?;
                let weighted = g.scale(exist, alpha);
                let total = g.add(diar, weighted)?;
                Ok(TrainLoss {
                    total,
                    diar,
                    exist: Some(exist),
                    assignment,
                })
            }
            HeadKind::Fixed { speakers } => {
                if s > speakers {
                    return Err(Error::Input(format!(
                        "{s} speakers in labels, fixed head has {speakers}"
                    )));
                }
                let mut padded = Tensor::zeros(speakers, t);
                padded.data_mut()[..s * t].copy_from_slice(labels.data());
                let logits = fixed_head_logits(g, p, e)?;
                let post = g.sigmoid(logits);
                let (diar, assignment) = pit_loss_graph(g, post, &padded)?;
                Ok(TrainLoss {
                    total: diar,
                    diar,
                    exist: None,
                    assignment,
                })
            }
        }
    }

    /// Posteriors for prepared frames `x`.
    pub fn infer(&self, x: &Tensor, opts: &InferOptions) -> Result<ModelOutput> {
        let frames = x.rows();
        if frames == 0 {
            return Err(Error::Input("cannot diarize an empty recording".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let e = embed(&mut g, &p, &self.config.encoder, xv)?;
        match self.config.head {
            HeadKind::Eda => {
                let order = match opts.shuffle_seed {
                    Some(seed) => ShuffleOrder::random(frames, seed),
                    None => ShuffleOrder::chronological(frames),
                };
                let init = encode_embeddings(&mut g, &p, e, &order)?;
                let (set, count) = match opts.num_speakers {
                    Some(0) => {
                        let set = AttractorSet {
                            attractors: Tensor::zeros(0, self.config.encoder.dim),
                            existence: Vec::new(),
                        };
                        (set, SpeakerCount { count: 0, capped: false })
                    }
                    Some(n) => {
                        let a = decode_attractors(&mut g, &p, init, n)?;
                        let q = existence_probs(&mut g, &p, a, false)?;
                        let set = AttractorSet {
                            attractors: g.value(a).clone(),
                            existence: g.value(q).data().to_vec(),
                        };
                        (set, SpeakerCount { count: n, capped: false })
                    }
                    None => decode_until_silent(&mut g, &p, init, opts.tau, opts.max_attractors)?,
                };
                let posteriors = if count.count == 0 {
                    PosteriorMatrix::empty(frames)
                } else {
                    let used = set.attractors.gather_rows(&(0..count.count).collect::<Vec<_>>())?;
                    let av = g.constant(used);
                    let logits = attractor_logits(&mut g, e, av)?;
                    let post = g.sigmoid(logits);
                    PosteriorMatrix::from_frame_major(g.value(post))?
                };
                Ok(ModelOutput {
                    posteriors,
                    attractors: Some(set),
                    count,
                })
            }
            HeadKind::Fixed { speakers } => {
                let logits = fixed_head_logits(&mut g, &p, e)?;
                let post = g.sigmoid(logits);
                Ok(ModelOutput {
                    posteriors: PosteriorMatrix::from_frame_major(g.value(post))?,
                    attractors: None,
                    count: SpeakerCount {
                        count: speakers,
                        capped: false,
                    },
                })
            }
        }
    }

    pub fn diarizer(&self, opts: InferOptions) -> ModelDiarizer<'_> {
        ModelDiarizer { model: self, opts }
    }
}

/// Anything that maps prepared frames to per-speaker posteriors, with the
/// number of rows being the number of speakers it found.
pub trait Diarizer {
    fn posteriors(&self, frames: &Tensor) -> Result<PosteriorMatrix>;
}

pub struct ModelDiarizer<'a> {
    model: &'a EendModel,
    opts: InferOptions,
}

impl Diarizer for ModelDiarizer<'_> {
    fn posteriors(&self, frames: &Tensor) -> Result<PosteriorMatrix> {
        Ok(self.model.infer(frames, &self.opts)?.posteriors)
    }
}
