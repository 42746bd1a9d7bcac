//! Speaker-by-frame posterior and activity matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `S x T` speech-activity posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    speakers: usize,
    frames: usize,
    data: Vec<f64>,
}

impl PosteriorMatrix {
    pub fn new(speakers: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != speakers * frames {
            return Err(Error::dim(
                "posteriors",
                format!("{speakers}x{frames} needs {} values, got {}", speakers * frames, data.len()),
            ));
        }
        Ok(PosteriorMatrix {
            speakers,
            frames,
            data,
        })
    }

    pub fn empty(frames: usize) -> Self {
        PosteriorMatrix {
            speakers: 0,
            frames,
            data: Vec::new(),
        }
    }

    /// From a `[T, S]` tensor (the layout the network produces).
    pub fn from_frame_major(t: &Tensor) -> Result<Self> {
        let tt = t.transpose()?;
        let (s, n) = tt.dims2()?;
        Self::new(s, n, tt.into_data())
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.data[s * self.frames + t]
    }

    pub fn set(&mut self, s: usize, t: usize, v: f64) {
        self.data[s * self.frames + t] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.frames..(s + 1) * self.frames]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// First `n` speaker rows.
    pub fn truncate_speakers(&self, n: usize) -> PosteriorMatrix {
        let n = n.min(self.speakers);
        PosteriorMatrix {
            speakers: n,
            frames: self.frames,
            data: self.data[..n * self.frames].to_vec(),
        }
    }
}

/// `S x T` binary speech activities with the frame period in seconds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivityMatrix {
    speakers: usize,
    frames: usize,
    data: Vec<u8>,
    /// Frame period in microseconds, kept integral so matrices compare
    /// exactly.
    period_us: u64,
}

impl ActivityMatrix {
    pub fn zeros(speakers: usize, frames: usize, frame_period: f64) -> Self {
        ActivityMatrix {
            speakers,
            frames,
            data: vec![0; speakers * frames],
            period_us: seconds_to_us(frame_period),
        }
    }

    pub fn from_rows(rows: &[Vec<u8>], frame_period: f64) -> Result<Self> {
        let frames = rows.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows.len(), frames, frame_period);
        for (s, r) in rows.iter().enumerate() {
            if r.len() != frames {
                return Err(Error::dim("activity", format!("row {s} has {} frames", r.len())));
            }
            for (t, &v) in r.iter().enumerate() {
                if v > 1 {
                    return Err(Error::Input(format!("activity value {v} is not 0/1")));
                }
                m.set(s, t, v == 1);
            }
        }
        Ok(m)
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame_period(&self) -> f64 {
        self.period_us as f64 * 1e-6
    }

    pub fn get(&self, s: usize, t: usize) -> bool {
        self.data[s * self.frames + t] != 0
    }

    pub fn set(&mut self, s: usize, t: usize, active: bool) {
        self.data[s * self.frames + t] = active as u8;
    }

    pub fn row(&self, s: usize) -> &[u8] {
        &self.data[s * self.frames..(s + 1) * self.frames]
    }

    /// Number of active speakers in frame `t`.
    pub fn active_count(&self, t: usize) -> usize {
        (0..self.speakers).filter(|&s| self.get(s, t)).count()
    }

    pub fn speaker_frames(&self, s: usize) -> usize {
        self.row(s).iter().filter(|&&v| v != 0).count()
    }

    /// Speakers with at least one active frame.
    pub fn active_speakers(&self) -> usize {
        (0..self.speakers).filter(|&s| self.speaker_frames(s) > 0).count()
    }

    /// `[S, T]` tensor of 0.0/1.0 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.speakers,
            self.frames,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("sized from speakers*frames")
    }

    /// Stacks matrices with equal frame counts vertically.
    pub fn stack(blocks: &[ActivityMatrix], frames: usize, frame_period: f64) -> Result<Self> {
        let mut out = Self::zeros(0, frames, frame_period);
        for b in blocks {
            if b.frames != frames {
                return Err(Error::dim("stack", format!("{} vs {frames} frames", b.frames)));
            }
            out.data.extend_from_slice(&b.data);
            out.speakers += b.speakers;
        }
        Ok(out)
    }

    /// Frames `start..end` of every speaker.
    pub fn slice_frames(&self, start: usize, end: usize) -> ActivityMatrix {
        let end = end.min(self.frames);
        let mut out = Self::zeros(self.speakers, end - start, self.frame_period());
        for s in 0..self.speakers {
            for t in start..end {
                out.set(s, t - start, self.get(s, t));
            }
        }
        out
    }

    /// Keeps only the listed speaker rows, in the given order.
    pub fn select_speakers(&self, rows: &[usize]) -> ActivityMatrix {
        let mut out = Self::zeros(rows.len(), self.frames, self.frame_period());
        for (i, &s) in rows.iter().enumerate() {
            out.data[i * self.frames..(i + 1) * self.frames].copy_from_slice(self.row(s));
        }
        out
    }
}

pub(crate) fn seconds_to_us(s: f64) -> u64 {
    (s * 1e6).round() as u64
}
