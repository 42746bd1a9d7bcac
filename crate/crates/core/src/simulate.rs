//! Simulated multi-talker mixtures.
//!
//! Each speaker talks a random number of utterances, each preceded by an
//! exponentially distributed silence, and the speaker tracks are overlaid.
//! Waveform mode synthesises voiced audio from a per-speaker pitch and
//! formant profile; feature mode draws spliced feature vectors directly
//! from per-speaker Gaussians, which is much faster to train on.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{featurize, AudioClip, FeatureSequence, FEATURE_DIM, SAMPLE_RATE};
use crate::rttm::{emit_rttm, rasterize_with_speakers, Annotation, FrameLabels, Segment};
use crate::tensor::Tensor;
use crate::trainer::{write_manifest, ManifestEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimMode {
    Waveform,
    Feature,
}

impl FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "waveform" => Ok(SimMode::Waveform),
            "feature" => Ok(SimMode::Feature),
            _ => Err(Error::Config(format!("simulation mode `{s}` is not waveform or feature"))),
        }
    }
}

impl fmt::Display for SimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimMode::Waveform => "waveform",
            SimMode::Feature => "feature",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub num_speakers: usize,
    pub num_mixtures: usize,
    /// Mean silence before each utterance, seconds.
    pub beta: f64,
    /// Inclusive range of utterances per speaker.
    pub utterances: (usize, usize),
    /// Utterance duration range, seconds.
    pub utterance_duration: (f64, f64),
    pub seed: u64,
    pub mode: SimMode,
    /// Cut mixtures at this length, seconds.
    pub max_duration: Option<f64>,
    /// Feature-mode frame period, seconds.
    pub frame_period: f64,
    /// Draw speakers from a fixed pool of this size (seeded by
    /// `pool_seed`) instead of a fresh profile per mixture.
    pub speaker_pool: Option<usize>,
    pub pool_seed: u64,
    /// Feature mode: per-dimension spread of a speaker's frames.
    pub feature_noise: f64,
    /// Waveform-mode subsampling factor for the written features.
    pub subsampling: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_speakers: 2,
            num_mixtures: 10,
            beta: 2.0,
            utterances: (10, 30),
            utterance_duration: (1.0, 5.0),
            seed: 0,
            mode: SimMode::Feature,
            max_duration: None,
            frame_period: 0.1,
            speaker_pool: None,
            pool_seed: 0,
            feature_noise: 0.5,
            subsampling: 10,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 {
            return Err(Error::Config("at least one speaker per mixture is required".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("mean silence {} must be positive", self.beta)));
        }
        let (lo, hi) = self.utterances;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("utterance count range {lo}..={hi} is invalid")));
        }
        let (dlo, dhi) = self.utterance_duration;
        if !(dlo > 0.0) || dlo > dhi {
            return Err(Error::Config(format!("utterance duration range {dlo}..{dhi} is invalid")));
        }
        if !(self.frame_period > 0.0) || self.subsampling == 0 {
            return Err(Error::Config("frame period and subsampling must be positive".into()));
        }
        if let Some(d) = self.max_duration {
            if !(d > 0.0) {
                return Err(Error::Config(format!("maximum duration {d} must be positive")));
            }
        }
        if let Some(p) = self.speaker_pool {
            if p < self.num_speakers {
                return Err(Error::Config(format!(
                    "speaker pool of {p} cannot supply {} speakers",
                    self.num_speakers
                )));
            }
        }
        Ok(())
    }
}

/// `count` i.i.d. exponential draws with mean `beta`.
pub fn sample_gaps(count: usize, beta: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let exp = Exp::new(1.0 / beta).map_err(|e| Error::Config(format!("mean silence {beta}: {e}")))?;
    Ok((0..count).map(|_| exp.sample(rng)).collect())
}

/// Seed of mixture `index` in a corpus seeded with `seed`.
pub fn mixture_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed-derived voice. Waveform mode uses the pitch and formants, feature
/// mode the mean vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeakerProfile {
    pub seed: u64,
    pub f0: f64,
    pub formants: [f64; 3],
    pub mean: Vec<f64>,
}

impl SyntheticSpeakerProfile {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.random_range(90.0..260.0);
        let formants = [
            rng.random_range(300.0..900.0),
            rng.random_range(900.0..2300.0),
            rng.random_range(2300.0..3500.0),
        ];
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mean = (0..FEATURE_DIM).map(|_| normal.sample(&mut rng)).collect();
        SyntheticSpeakerProfile {
            seed,
            f0,
            formants,
            mean,
        }
    }
}

/// One simulated recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub annotation: Annotation,
    pub features: FeatureSequence,
    pub labels: FrameLabels,
    /// Waveform mode only.
    pub audio: Option<AudioClip>,
}

/// Speaker turns: per speaker, utterances separated by exponential gaps.
pub fn sample_annotation(cfg: &SimConfig, recording_id: &str, rng: &mut impl Rng) -> Result<Annotation> {
    let mut a = Annotation::new(recording_id);
    for s in 0..cfg.num_speakers {
        let n = rng.random_range(cfg.utterances.0..=cfg.utterances.1);
        let gaps = sample_gaps(n, cfg.beta, rng)?;
        let mut t = 0.0;
        for gap in gaps {
            t += gap;
            let (lo, hi) = cfg.utterance_duration;
            let d = if hi > lo { rng.random_range(lo..hi) } else { lo };
            a.segments.push(Segment {
                speaker: format!("spk{s}"),
                onset: t,
                duration: d,
            });
            t += d;
        }
    }
    if let Some(max) = cfg.max_duration {
        a.segments.retain(|s| s.onset < max);
        for s in a.segments.iter_mut() {
            s.duration = s.duration.min(max - s.onset);
        }
    }
    Ok(a)
}

fn profiles(cfg: &SimConfig, rng: &mut impl Rng) -> Vec<SyntheticSpeakerProfile> {
    match cfg.speaker_pool {
        Some(pool) => {
            let picked = rand::seq::index::sample(rng, pool, cfg.num_speakers);
            picked
                .iter()
                .map(|i| SyntheticSpeakerProfile::from_seed(mixture_seed(cfg.pool_seed, i)))
                .collect()
        }
        None => (0..cfg.num_speakers)
            .map(|_| SyntheticSpeakerProfile::from_seed(rng.random()))
            .collect(),
    }
}

/// Floor level of feature-mode silence.
const FEATURE_FLOOR: f64 = -2.0;

fn feature_frames(
    cfg: &SimConfig,
    labels: &FrameLabels,
    voices: &[SyntheticSpeakerProfile],
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let y = &labels.activity;
    let t = y.frames();
    let noise = Normal::new(0.0, cfg.feature_noise)
        .map_err(|e| Error::Config(format!("feature noise {}: {e}", cfg.feature_noise)))?;
    let floor = Normal::new(FEATURE_FLOOR, 0.3).expect("valid floor");
    let mut data = Vec::with_capacity(t * FEATURE_DIM);
    let mut frame = vec![0.0; FEATURE_DIM];
    for f in 0..t {
        for v in frame.iter_mut() {
            *v = floor.sample(rng);
        }
        for (s, voice) in voices.iter().enumerate() {
            if !y.get(s, f) {
                continue;
            }
            for (v, m) in frame.iter_mut().zip(&voice.mean) {
                *v = v.max(m + noise.sample(rng));
            }
        }
        data.extend_from_slice(&frame);
    }
    Tensor::matrix(t, FEATURE_DIM, data)
}

fn synthesize(a: &Annotation, voices: &[SyntheticSpeakerProfile], speakers: &[String], rng: &mut impl Rng) -> Result<AudioClip> {
    let sr = SAMPLE_RATE as f64;
    let len = ((a.end() + 0.5) * sr).ceil() as usize;
    let mut out = vec![0.0; len.max(1)];
    let floor = Normal::new(0.0, 1e-3).expect("valid noise");
    for v in out.iter_mut() {
        *v = floor.sample(rng);
    }
    for seg in &a.segments {
        let s = speakers.iter().position(|n| *n == seg.speaker).expect("speaker listed");
        let voice = &voices[s];
        let start = (seg.onset * sr).round() as usize;
        let n = (seg.duration * sr).round() as usize;
        let harmonics = ((sr / 2.0 - 100.0) / voice.f0).floor() as usize;
        // Harmonic amplitudes shaped by the formant envelope.
        let amps: Vec<f64> = (1..=harmonics)
            .map(|k| {
                let f = k as f64 * voice.f0;
                voice
                    .formants
                    .iter()
                    .map(|&fm| (-((f - fm) / 150.0).powi(2)).exp())
                    .sum::<f64>()
                    / k as f64
            })
            .collect();
        let norm: f64 = amps.iter().sum::<f64>().max(1e-9);
        let syllable = rng.random_range(3.0..6.0);
        let phase0 = rng.random_range(0.0..2.0 * PI);
        for i in 0..n {
            let idx = start + i;
            if idx >= out.len() {
                break;
            }
            let t = i as f64 / sr;
            let f0 = voice.f0 * (1.0 + 0.03 * (2.0 * PI * 0.7 * t).sin());
            let env = 0.55 + 0.45 * (2.0 * PI * syllable * t + phase0).sin();
            let ramp = (i.min(n - i) as f64 / (0.01 * sr)).min(1.0);
            let mut x = 0.0;
            for (k, amp) in amps.iter().enumerate() {
                x += amp * (2.0 * PI * (k + 1) as f64 * f0 * t).sin();
            }
            out[idx] += 0.2 * env * ramp * x / norm;
        }
    }
    AudioClip::new(out, SAMPLE_RATE)
}

/// Builds one mixture.
pub fn build_mixture(cfg: &SimConfig, recording_id: &str, rng: &mut impl Rng) -> Result<Mixture> {
    cfg.validate()?;
    let annotation = sample_annotation(cfg, recording_id, rng)?;
    let voices = profiles(cfg, rng);
    let speakers: Vec<String> = (0..cfg.num_speakers).map(|s| format!("spk{s}")).collect();
    let end = cfg.max_duration.unwrap_or_else(|| annotation.end());
    match cfg.mode {
        SimMode::Feature => {
            let frames = (end / cfg.frame_period).ceil().max(1.0) as usize;
            let activity = rasterize_with_speakers(&annotation, &speakers, cfg.frame_period, frames)?;
            let labels = FrameLabels { speakers, activity };
            let x = feature_frames(cfg, &labels, &voices, rng)?;
            Ok(Mixture {
                annotation,
                features: FeatureSequence::new(x, cfg.frame_period)?,
                labels,
                audio: None,
            })
        }
        SimMode::Waveform => {
            let mut audio = synthesize(&annotation, &voices, &speakers, rng)?;
            if let Some(max) = cfg.max_duration {
                audio.samples.truncate(((max * SAMPLE_RATE as f64).round() as usize).max(1));
            }
            let features = featurize(&audio, cfg.subsampling)?;
            let activity = rasterize_with_speakers(&annotation, &speakers, features.frame_period, features.len())?;
            Ok(Mixture {
                annotation,
                features,
                labels: FrameLabels { speakers, activity },
                audio: Some(audio),
            })
        }
    }
}

/// Percentage of speech time with two or more speakers active.
pub fn overlap_ratio(annotations: &[Annotation]) -> Result<f64> {
    let (mut speech, mut overlap) = (0i64, 0i64);
    for a in annotations {
        let mut events: Vec<(i64, i32)> = Vec::new();
        for spk in a.speakers() {
            // Merge each speaker's own segments first.
            let mut iv: Vec<(i64, i64)> = a
                .segments
                .iter()
                .filter(|s| s.speaker == spk)
                .map(|s| ((s.onset * 1e6).round() as i64, (s.end() * 1e6).round() as i64))
                .collect();
            iv.sort_unstable();
            let mut merged: Vec<(i64, i64)> = Vec::new();
            for (b, e) in iv {
                match merged.last_mut() {
                    Some(l) if b <= l.1 => l.1 = l.1.max(e),
                    _ => merged.push((b, e)),
                }
            }
            for (b, e) in merged {
                events.push((b, 1));
                events.push((e, -1));
            }
        }
        events.sort_unstable();
        let mut active = 0;
        for w in 0..events.len() {
            active += events[w].1;
            if let Some(next) = events.get(w + 1) {
                let d = next.0 - events[w].0;
                if active >= 1 {
                    speech += d;
                }
                if active >= 2 {
                    overlap += d;
                }
            }
        }
    }
    if speech == 0 {
        return Err(Error::Input("overlap ratio undefined without speech".into()));
    }
    Ok(100.0 * overlap as f64 / speech as f64)
}

/// What [`write_corpus`] produced.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    pub manifest: PathBuf,
    pub rttm: PathBuf,
    pub mixtures: usize,
    pub overlap_ratio: f64,
}

/// Generates `cfg.num_mixtures` mixtures under `dir`: `feats/`, `labels/`,
/// `wav/` (waveform mode), `ref.rttm` and `manifest.txt` with paths
/// relative to `dir`. Mixture `i` is seeded from `(cfg.seed, i)`, so the
/// output does not depend on `jobs`.
pub fn write_corpus(cfg: &SimConfig, dir: &Path, jobs: usize) -> Result<CorpusSummary> {
    cfg.validate()?;
    for sub in ["feats", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::file(&p, e))?;
    }
    if cfg.mode == SimMode::Waveform {
        let p = dir.join("wav");
        std::fs::create_dir_all(&p).map_err(|e| Error::file(&p, e))?;
    }
    let one = |i: usize| -> Result<(ManifestEntry, Annotation)> {
        let id = format!("mix{i:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(mixture_seed(cfg.seed, i));
        let m = build_mixture(cfg, &id, &mut rng)?;
        let feat = PathBuf::from("feats").join(format!("{id}.feat"));
        let lab = PathBuf::from("labels").join(format!("{id}.lab"));
        m.features.save(dir.join(&feat))?;
        m.labels.save(dir.join(&lab))?;
        if let Some(audio) = &m.audio {
            audio.write_wav(dir.join("wav").join(format!("{id}.wav")))?;
        }
        Ok((
            ManifestEntry {
                features: feat,
                labels: lab,
                recording_id: id,
            },
            m.annotation,
        ))
    };
    let results: Vec<(ManifestEntry, Annotation)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..cfg.num_mixtures).into_par_iter().map(one).collect::<Result<_>>())?
    } else {
        (0..cfg.num_mixtures).map(one).collect::<Result<_>>()?
    };
    let (entries, annotations): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    let rttm = dir.join("ref.rttm");
    std::fs::write(&rttm, emit_rttm(&annotations)).map_err(|e| Error::file(&rttm, e))?;
    let overlap_ratio = overlap_ratio(&annotations).unwrap_or(0.0);
    Ok(CorpusSummary {
        manifest,
        rttm,
        mixtures: entries.len(),
        overlap_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = sample_gaps(10_000, 2.0, &mut rng).unwrap();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        assert!((mean - 2.0).abs() < 0.1, "{mean}");
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_gaps(20, 13.0, &mut a).unwrap(), sample_gaps(20, 13.0, &mut b).unwrap());
    }

    #[test]
    fn overlap_examples() {
        let mut a = Annotation::new("r");
        a.push("x", 0.0, 2.0).unwrap();
        a.push("y", 0.0, 2.0).unwrap();
        assert_eq!(overlap_ratio(&[a]).unwrap(), 100.0);
        let mut b = Annotation::new("r");
        b.push("x", 0.0, 1.0).unwrap();
        b.push("y", 2.0, 1.0).unwrap();
        assert_eq!(overlap_ratio(&[b]).unwrap(), 0.0);
        assert!(overlap_ratio(&[Annotation::new("r")]).is_err());
    }

    #[test]
    fn single_speaker_never_overlaps() {
        let cfg = SimConfig {
            num_speakers: 1,
            ..SimConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = build_mixture(&cfg, "r", &mut rng).unwrap();
        assert_eq!(overlap_ratio(&[m.annotation]).unwrap(), 0.0);
    }

    #[test]
    fn feature_mixture_is_consistent() {
        let cfg = SimConfig {
            max_duration: Some(50.0),
            ..SimConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = build_mixture(&cfg, "r", &mut rng).unwrap();
        assert_eq!(m.features.len(), 500);
        assert_eq!(m.labels.activity.frames(), 500);
        assert_eq!(m.features.dim(), FEATURE_DIM);
        assert!(m.annotation.segments.iter().all(|s| s.end() <= 50.0 + 1e-9));
    }

    #[test]
    fn waveform_mixture_features_match_labels() {
        let cfg = SimConfig {
            mode: SimMode::Waveform,
            utterances: (1, 2),
            max_duration: Some(6.0),
            beta: 1.0,
            ..SimConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = build_mixture(&cfg, "r", &mut rng).unwrap();
        let audio = m.audio.unwrap();
        assert!(audio.duration() <= 6.0 + 1e-9);
        assert_eq!(m.labels.activity.frames(), m.features.len());
        assert!(m.features.frames.is_finite());
    }

    #[test]
    fn pool_validation() {
        let cfg = SimConfig {
            speaker_pool: Some(1),
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(SimConfig { beta: 0.0, ..SimConfig::default() }.validate().is_err());
    }
}
