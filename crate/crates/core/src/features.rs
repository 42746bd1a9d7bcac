//! Log-Mel filterbank front end, context splicing and subsampling, and the
//! binary feature-matrix file format.
//!
//! Front end: 25 ms Hann window, 10 ms hop, 256-point FFT power spectrum,
//! 23 triangular filters evenly spaced on the HTK Mel scale over
//! 0-4000 Hz, natural log floored at `ln(1e-10)`. Each frame is then
//! concatenated with its 7 left and 7 right neighbours (edge frames are
//! replicated) and every `factor`-th frame is kept.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 8000;
pub const LOG_FLOOR: f64 = 1e-10;
pub const N_MELS: usize = 23;
pub const CONTEXT: usize = 7;
/// Spliced feature width, `23 * 15`.
pub const FEATURE_DIM: usize = N_MELS * (2 * CONTEXT + 1);

/// Mono audio with samples scaled to `[-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("audio clip has no samples".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads 16-bit PCM WAV; multi-channel input is averaged to mono.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path.as_ref())?;
        let spec = reader.spec();
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::Input(format!(
                "{}: only 16-bit PCM WAV is supported",
                path.as_ref().display()
            )));
        }
        let channels = spec.channels.max(1) as usize;
        let raw: Vec<i16> = reader.samples::<i16>().collect::<Result<_, _>>()?;
        let samples = raw
            .chunks(channels)
            .map(|c| c.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / c.len() as f64)
            .collect();
        AudioClip::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path.as_ref(), spec)?;
        for &s in &self.samples {
            let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(q)?;
        }
        w.finalize()?;
        Ok(())
    }

    /// Halves the sample rate (16 kHz to 8 kHz) after a windowed-sinc
    /// low-pass at the new Nyquist frequency.
    pub fn decimate_by_2(&self) -> AudioClip {
        const TAPS: isize = 31;
        let half = TAPS / 2;
        let kernel: Vec<f64> = (0..TAPS)
            .map(|i| {
                let n = (i - half) as f64;
                let sinc = if n == 0.0 {
                    0.5
                } else {
                    (std::f64::consts::PI * n / 2.0).sin() / (std::f64::consts::PI * n)
                };
                let hamming = 0.54
                    - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (TAPS - 1) as f64).cos();
                sinc * hamming
            })
            .collect();
        let n = self.samples.len() as isize;
        let samples = (0..n)
            .step_by(2)
            .map(|c| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let idx = c + k as isize - half;
                        if (0..n).contains(&idx) {
                            w * self.samples[idx as usize]
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect();
        AudioClip {
            samples,
            sample_rate: self.sample_rate / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub win: f64,
    pub hop: f64,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: N_MELS,
            win: 0.025,
            hop: 0.010,
            n_fft: 256,
            f_min: 0.0,
            f_max: 4000.0,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters as an `[n_fft / 2 + 1, n_mels]` matrix.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Tensor {
    let n_bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(n_bins, cfg.n_mels);
    for bin in 0..n_bins {
        let f = bin as f64 * sample_rate as f64 / cfg.n_fft as f64;
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb.set(bin, m, w);
        }
    }
    fb
}

/// Number of full analysis windows in `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// `[T', n_mels]` log-Mel energies.
pub fn log_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<Tensor> {
    let sr = clip.sample_rate as f64;
    let win = (cfg.win * sr).round() as usize;
    let hop = (cfg.hop * sr).round() as usize;
    if win == 0 || hop == 0 || win > cfg.n_fft {
        return Err(Error::Config(format!(
            "window of {win} samples does not fit FFT size {}",
            cfg.n_fft
        )));
    }
    let frames = frame_count(clip.samples.len(), win, hop);
    if frames == 0 {
        return Err(Error::Input(format!(
            "clip of {} samples is shorter than one {win}-sample window",
            clip.samples.len()
        )));
    }
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg, clip.sample_rate);
    let n_bins = cfg.n_fft / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut power = Tensor::zeros(frames, n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for t in 0..frames {
        let seg = &clip.samples[t * hop..t * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(seg[i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power.set(t, k, buf[k].norm_sqr());
        }
    }
    let mel = power.matmul(&fb)?;
    Ok(mel.map(|e| e.max(LOG_FLOOR).ln()))
}

/// `[T, F]` features with the time between consecutive rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor,
    pub frame_period: f64,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, frame_period: f64) -> Result<Self> {
        frames.dims2()?;
        if !(frame_period > 0.0) {
            return Err(Error::Input(format!("frame period {frame_period} must be positive")));
        }
        Ok(FeatureSequence {
            frames,
            frame_period,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Subtracts the per-dimension mean over the whole recording.
    pub fn mean_normalize(&mut self) {
        let (t, f) = (self.frames.rows(), self.frames.cols());
        if t == 0 {
            return;
        }
        let mut mean = vec![0.0; f];
        for r in 0..t {
            for (m, v) in mean.iter_mut().zip(self.frames.row_slice(r)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= t as f64;
        }
        for (i, v) in self.frames.data_mut().iter_mut().enumerate() {
            *v -= mean[i % f];
        }
    }

    /// Binary layout (little-endian): magic `EENDFEAT`, `u64` T, `u64` F,
    /// `f64` frame period, then `T * F` row-major `f32` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FEAT_MAGIC)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u64::<LittleEndian>(self.dim() as u64)?;
        w.write_f64::<LittleEndian>(self.frame_period)?;
        for &v in self.frames.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FEAT_MAGIC {
            return Err(Error::Input("not a feature file (bad magic)".into()));
        }
        let t = r.read_u64::<LittleEndian>()? as usize;
        let f = r.read_u64::<LittleEndian>()? as usize;
        let period = r.read_f64::<LittleEndian>()?;
        let mut raw = vec![0f32; t * f];
        r.read_f32_into::<LittleEndian>(&mut raw)?;
        let frames = Tensor::matrix(t, f, raw.into_iter().map(f64::from).collect())?;
        if !frames.is_finite() {
            return Err(Error::Input("feature file contains non-finite values".into()));
        }
        FeatureSequence::new(frames, period)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

const FEAT_MAGIC: &[u8; 8] = b"EENDFEAT";

/// Concatenates each raw frame with `context` neighbours on both sides
/// (edges replicated) and keeps frames `0, factor, 2 * factor, ...`.
pub fn splice_subsample(
    raw: &Tensor,
    hop: f64,
    context: usize,
    factor: usize,
) -> Result<FeatureSequence> {
    let (t_raw, d) = raw.dims2()?;
    if factor == 0 {
        return Err(Error::Config("subsampling factor must be positive".into()));
    }
    let t_out = t_raw.div_ceil(factor);
    let width = d * (2 * context + 1);
    let mut data = Vec::with_capacity(t_out * width);
    for t in 0..t_out {
        let center = (t * factor) as isize;
        for off in -(context as isize)..=(context as isize) {
            let src = (center + off).clamp(0, t_raw as isize - 1) as usize;
            data.extend_from_slice(raw.row_slice(src));
        }
    }
    FeatureSequence::new(Tensor::matrix(t_out, width, data)?, hop * factor as f64)
}

/// Full front end: log-Mel, splice, subsample.
pub fn featurize(clip: &AudioClip, factor: usize) -> Result<FeatureSequence> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::Input(format!(
            "expected {SAMPLE_RATE} Hz audio, got {} Hz",
            clip.sample_rate
        )));
    }
    let cfg = MelConfig::default();
    let raw = log_mel(clip, &cfg)?;
    splice_subsample(&raw, cfg.hop, CONTEXT, factor)
}
