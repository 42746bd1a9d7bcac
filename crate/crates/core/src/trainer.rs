//! Training loop: Adam with the Noam warm-up schedule over fixed-length
//! chunks of the training recordings.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::config::FlatConfig;
use crate::eda::ShuffleOrder;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::model::EendModel;
use crate::objective::ExistenceRouting;
use crate::params::ParamStore;
use crate::rttm::FrameLabels;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Largest fraction of manifest items that may be skipped before loading
/// fails.
pub const MAX_SKIP_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub chunk_frames: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup: usize,
    /// Multiplier on the Noam rate.
    pub lr_scale: f64,
    /// Constant learning rate instead of the Noam schedule (adaptation).
    pub fixed_lr: Option<f64>,
    pub seed: u64,
    pub routing: ExistenceRouting,
    pub alpha: f64,
    /// Shuffle the attractor-encoder input order.
    pub shuffle: bool,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            chunk_frames: 500,
            batch_size: 8,
            epochs: 10,
            warmup: 1000,
            lr_scale: 1.0,
            fixed_lr: None,
            seed: 0,
            routing: ExistenceRouting::Full,
            alpha: 1.0,
            shuffle: true,
            jobs: 1,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "train.chunk_frames",
    "train.batch_size",
    "train.epochs",
    "train.warmup",
    "train.lr_scale",
    "train.fixed_lr",
    "train.seed",
    "train.routing",
    "train.alpha",
    "train.shuffle",
    "train.jobs",
];

impl TrainConfig {
    pub fn from_flat(c: &FlatConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let fixed_lr = match c.get_str("train.fixed_lr") {
            None | Some("none") | Some("") => None,
            Some(_) => c.get("train.fixed_lr")?,
        };
        let cfg = TrainConfig {
            chunk_frames: c.get_or("train.chunk_frames", d.chunk_frames)?,
            batch_size: c.get_or("train.batch_size", d.batch_size)?,
            epochs: c.get_or("train.epochs", d.epochs)?,
            warmup: c.get_or("train.warmup", d.warmup)?,
            lr_scale: c.get_or("train.lr_scale", d.lr_scale)?,
            fixed_lr,
            seed: c.get_or("train.seed", d.seed)?,
            routing: c.get_or("train.routing", d.routing)?,
            alpha: c.get_or("train.alpha", d.alpha)?,
            shuffle: c.get_or("train.shuffle", d.shuffle)?,
            jobs: c.get_or("train.jobs", d.jobs)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut c = FlatConfig::new();
        c.set("train.chunk_frames", self.chunk_frames);
        c.set("train.batch_size", self.batch_size);
        c.set("train.epochs", self.epochs);
        c.set("train.warmup", self.warmup);
        c.set("train.lr_scale", self.lr_scale);
        c.set(
            "train.fixed_lr",
            self.fixed_lr.map_or("none".to_string(), |v| v.to_string()),
        );
        c.set("train.seed", self.seed);
        c.set("train.routing", self.routing);
        c.set("train.alpha", self.alpha);
        c.set("train.shuffle", self.shuffle);
        c.set("train.jobs", self.jobs);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames == 0 || self.batch_size == 0 || self.warmup == 0 || self.jobs == 0 {
            return Err(Error::Config(
                "chunk_frames, batch_size, warmup and jobs must be at least 1".into(),
            ));
        }
        if !(self.alpha >= 0.0) || !(self.lr_scale > 0.0) {
            return Err(Error::Config("alpha must be >= 0 and lr_scale > 0".into()));
        }
        if let Some(lr) = self.fixed_lr {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("fixed learning rate {lr} must be positive")));
            }
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` (1-based).
    pub fn learning_rate(&self, step: u64, dim: usize) -> Result<f64> {
        match self.fixed_lr {
            Some(lr) => Ok(lr),
            None => Ok(self.lr_scale * noam_lr(step, dim, self.warmup)?),
        }
    }
}

/// `D^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: u64, dim: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Input("learning-rate schedule starts at step 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort with the
/// offending parameter name and leave everything untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("gradient for `{name}` is {:?}, parameter {:?}", g.shape(), p.shape()),
            ));
        }
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at `{name}`[{bad}] (step {})",
                g.data()[bad],
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?.data();
        let m = state.m.get_mut(name).ok_or_else(|| Error::Config(format!("no moment for `{name}`")))?;
        for (mi, gi) in m.data_mut().iter_mut().zip(g) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        }
        let m = m.data().to_vec();
        let v = state.v.get_mut(name).ok_or_else(|| Error::Config(format!("no moment for `{name}`")))?;
        for (vi, gi) in v.data_mut().iter_mut().zip(g) {
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        }
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(&m).zip(v.data()) {
            let mh = mi / c1;
            let vh = vi / c2;
            *pi -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `(start, end)` frame ranges of consecutive chunks; the last may be
/// shorter.
pub fn chunk_ranges(frames: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..frames)
        .step_by(chunk.max(1))
        .map(|s| (s, (s + chunk).min(frames)))
        .collect()
}

/// One line of a corpus manifest: `features labels recording-id`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub features: PathBuf,
    pub labels: PathBuf,
    pub recording_id: String,
}

/// Reads a manifest. Relative paths resolve against the manifest's
/// directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected `features labels recording-id`, got {} fields", f.len()),
            });
        }
        out.push(ManifestEntry {
            features: base.join(f[0]),
            labels: base.join(f[1]),
            recording_id: f[2].to_string(),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let text: String = entries
        .iter()
        .map(|e| {
            format!(
                "{} {} {}\n",
                e.features.display(),
                e.labels.display(),
                e.recording_id
            )
        })
        .collect();
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// A training example: prepared frames and `S x T` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainChunk {
    pub recording_id: String,
    pub x: Tensor,
    pub labels: Tensor,
}

/// Splits a prepared recording into chunks. Speakers silent within a
/// chunk are dropped from its labels.
pub fn make_chunks(recording_id: &str, x: &Tensor, labels: &FrameLabels, chunk: usize) -> Result<Vec<TrainChunk>> {
    let y = &labels.activity;
    if y.frames() != x.rows() {
        return Err(Error::Input(format!(
            "{recording_id}: labels cover {} frames, features {}",
            y.frames(),
            x.rows()
        )));
    }
    let mut out = Vec::new();
    for (start, end) in chunk_ranges(x.rows(), chunk) {
        let idx: Vec<usize> = (start..end).collect();
        let part = y.slice_frames(start, end);
        let present: Vec<usize> = (0..part.speakers()).filter(|&s| part.speaker_frames(s) > 0).collect();
        out.push(TrainChunk {
            recording_id: recording_id.to_string(),
            x: x.gather_rows(&idx)?,
            labels: part.select_speakers(&present).to_tensor(),
        });
    }
    Ok(out)
}

/// Loads and chunks a manifest's recordings. Unreadable or mismatched
/// items are skipped with a warning; more than [`MAX_SKIP_FRACTION`]
/// skipped is an error.
pub fn load_corpus(model: &EendModel, entries: &[ManifestEntry], chunk: usize) -> Result<Vec<TrainChunk>> {
    let mut chunks = Vec::new();
    let mut skipped = 0;
    for e in entries {
        let loaded = FeatureSequence::load(&e.features).and_then(|f| {
            let labels = FrameLabels::load(&e.labels)?;
            let x = model.prepare(&f)?;
            make_chunks(&e.recording_id, &x, &labels, chunk)
        });
        match loaded {
            Ok(c) => chunks.extend(c),
            Err(err) => {
                warn!("skipping {}: {err}", e.recording_id);
                skipped += 1;
            }
        }
    }
    if !entries.is_empty() && skipped as f64 > MAX_SKIP_FRACTION * entries.len() as f64 {
        return Err(Error::Input(format!(
            "{skipped} of {} corpus items could not be used",
            entries.len()
        )));
    }
    if chunks.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    Ok(chunks)
}

/// Mean losses over one epoch's chunks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub diar: f64,
    pub exist: f64,
    pub learning_rate: f64,
}

struct ItemResult {
    grads: ParamStore,
    total: f64,
    diar: f64,
    exist: f64,
}

/// Seed for the attractor-input shuffle of one chunk in one epoch.
fn item_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

fn item_gradients(model: &EendModel, cfg: &TrainConfig, chunk: &TrainChunk, seed: u64) -> Result<ItemResult> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let t = chunk.x.rows();
    let order = if cfg.shuffle {
        ShuffleOrder::random(t, seed)
    } else {
        ShuffleOrder::chronological(t)
    };
    let loss = model.train_loss(&mut g, &p, &chunk.x, &chunk.labels, &order, cfg.routing, cfg.alpha)?;
    let total = g.scalar(loss.total);
    let diar = g.scalar(loss.diar);
    let exist = loss.exist.map_or(0.0, |v| g.scalar(v));
    let grads = g.backward(loss.total)?;
    Ok(ItemResult {
        grads: p.gradients(&g, &grads),
        total,
        diar,
        exist,
    })
}

/// Training state that survives across epochs.
pub struct Trainer {
    pub model: EendModel,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochLog>,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(model: EendModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pool = if config.jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.jobs)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Trainer {
            optimizer: OptimizerState::new(&model.params),
            model,
            config,
            log: Vec::new(),
            pool,
        })
    }

    fn batch_results(&self, batch: &[(usize, &TrainChunk)], epoch: usize) -> Result<Vec<ItemResult>> {
        let run = |&(i, c): &(usize, &TrainChunk)| {
            item_gradients(&self.model, &self.config, c, item_seed(self.config.seed, epoch, i))
        };
        match &self.pool {
            Some(pool) => pool.install(|| batch.par_iter().map(run).collect()),
            None => batch.iter().map(run).collect(),
        }
    }

    /// One pass over `chunks` in a seeded random order.
    pub fn run_epoch(&mut self, chunks: &[TrainChunk]) -> Result<EpochLog> {
        let epoch = self.log.len() + 1;
        let mut order: Vec<usize> = (0..chunks.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut total, mut diar, mut exist) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for batch_idx in order.chunks(self.config.batch_size) {
            let batch: Vec<(usize, &TrainChunk)> = batch_idx.iter().map(|&i| (i, &chunks[i])).collect();
            let results = self.batch_results(&batch, epoch)?;
            let mut grads = self.model.params.zeros_like();
            let scale = 1.0 / results.len() as f64;
            for r in &results {
                grads.add_scaled(&r.grads, scale)?;
                total += r.total;
                diar += r.diar;
                exist += r.exist;
            }
            lr = self
                .config
                .learning_rate(self.optimizer.step + 1, self.model.config.encoder.dim)?;
            adam_step(&mut self.model.params, &grads, &mut self.optimizer, lr)?;
        }
        let n = chunks.len().max(1) as f64;
        let entry = EpochLog {
            epoch,
            total: total / n,
            diar: diar / n,
            exist: exist / n,
            learning_rate: lr,
        };
        info!(
            "epoch {epoch}: loss {:.6} (diar {:.6}, exist {:.6}), lr {:.3e}",
            entry.total, entry.diar, entry.exist, entry.learning_rate
        );
        self.log.push(entry);
        Ok(entry)
    }

    /// Runs all configured epochs. With `out_dir`, the model is written to
    /// `model.ckpt` and the loss log to `loss.tsv` after every epoch.
    pub fn train(&mut self, chunks: &[TrainChunk], out_dir: Option<&Path>) -> Result<()> {
        for _ in 0..self.config.epochs {
            self.run_epoch(chunks)?;
            if let Some(dir) = out_dir {
                self.model.save(dir.join("model.ckpt"))?;
                let path = dir.join("loss.tsv");
                std::fs::write(&path, format_loss_log(&self.log)).map_err(|e| Error::file(&path, e))?;
            }
        }
        Ok(())
    }
}

/// Tab-separated: epoch, total, diar, exist, learning rate.
pub fn format_loss_log(log: &[EpochLog]) -> String {
    let mut out = Vec::new();
    writeln!(out, "epoch\ttotal\tdiar\texist\tlr").expect("vec write");
    for e in log {
        writeln!(
            out,
            "{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}",
            e.epoch, e.total, e.diar, e.exist, e.learning_rate
        )
        .expect("vec write");
    }
    String::from_utf8(out).expect("ascii")
}
