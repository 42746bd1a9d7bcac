//! Turning posteriors into speaker activity: thresholding, correction with
//! external speech activity labels, and iterative inference for more
//! speakers than the model handles in one pass.

use crate::activity::{ActivityMatrix, PosteriorMatrix};
use crate::combine::combine;
use crate::error::{Error, Result};
use crate::model::Diarizer;
use crate::rttm::{rasterize_with_speakers, Annotation};
use crate::tensor::Tensor;

pub const DECODE_THRESHOLD: f64 = 0.5;

/// Frame-level speech activity `z_t` of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SadLabels {
    pub z: Vec<u8>,
    pub frame_period: f64,
}

impl SadLabels {
    pub fn new(z: Vec<u8>, frame_period: f64) -> Result<Self> {
        if z.iter().any(|&v| v > 1) {
            return Err(Error::Input("speech activity labels must be 0/1".into()));
        }
        Ok(SadLabels { z, frame_period })
    }

    /// Speech wherever any speaker of `a` is active.
    pub fn from_annotation(a: &Annotation, frame_period: f64, frames: usize) -> Result<Self> {
        let m = rasterize_with_speakers(a, &a.speakers(), frame_period, frames)?;
        Ok(Self::from_activity(&m))
    }

    pub fn from_activity(m: &ActivityMatrix) -> Self {
        SadLabels {
            z: (0..m.frames()).map(|t| (m.active_count(t) > 0) as u8).collect(),
            frame_period: m.frame_period(),
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// `y[s][t] = 1` iff `p[s][t] > threshold`.
pub fn decode_with(p: &PosteriorMatrix, threshold: f64, frame_period: f64) -> ActivityMatrix {
    let mut y = ActivityMatrix::zeros(p.speakers(), p.frames(), frame_period);
    for s in 0..p.speakers() {
        for (t, &v) in p.row(s).iter().enumerate() {
            if v > threshold {
                y.set(s, t, true);
            }
        }
    }
    y
}

pub fn decode(p: &PosteriorMatrix, frame_period: f64) -> ActivityMatrix {
    decode_with(p, DECODE_THRESHOLD, frame_period)
}

/// Thresholded decode corrected by `z`: active frames outside speech are
/// cleared; speech frames with nobody active get the most probable
/// speaker (lowest index on ties).
pub fn sad_postprocess(p: &PosteriorMatrix, z: &SadLabels, frame_period: f64) -> Result<ActivityMatrix> {
    if z.len() != p.frames() {
        return Err(Error::Input(format!(
            "speech activity has {} frames, posteriors {}",
            z.len(),
            p.frames()
        )));
    }
    let mut y = decode(p, frame_period);
    for t in 0..p.frames() {
        let active = y.active_count(t) > 0;
        if active && z.z[t] == 0 {
            for s in 0..y.speakers() {
                y.set(s, t, false);
            }
        } else if !active && z.z[t] == 1 && p.speakers() > 0 {
            let mut best = 0;
            for s in 1..p.speakers() {
                if p.get(s, t) > p.get(best, t) {
                    best = s;
                }
            }
            y.set(best, t, true);
        }
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterativeResult {
    pub activity: ActivityMatrix,
    /// Speakers decoded at each iteration.
    pub speakers_per_iteration: Vec<usize>,
}

/// Repeatedly diarizes the frames where nobody was found active so far.
/// Each pass keeps at most `s_max` speakers and stops once it finds fewer
/// than `s_max`, when no frames are left, or when the frame set stops
/// shrinking. `first_limit` caps the speakers kept from the first pass.
pub fn iterative_inference_limited(
    x: &Tensor,
    diarizer: &dyn Diarizer,
    s_max: usize,
    first_limit: Option<usize>,
    frame_period: f64,
) -> Result<IterativeResult> {
    if s_max == 0 {
        return Err(Error::Config("maximum speaker count must be at least 1".into()));
    }
    let total = x.rows();
    let mut selected: Vec<usize> = (0..total).collect();
    let mut blocks = Vec::new();
    let mut per_iter = Vec::new();
    while !selected.is_empty() {
        let sub = x.gather_rows(&selected)?;
        let p = diarizer.posteriors(&sub)?;
        if p.frames() != selected.len() {
            return Err(Error::dim(
                "iterative_inference",
                format!("diarizer returned {} frames for {}", p.frames(), selected.len()),
            ));
        }
        let estimated = p.speakers().min(s_max);
        let keep = match (blocks.is_empty(), first_limit) {
            (true, Some(limit)) => estimated.min(limit),
            _ => estimated,
        };
        let local = decode(&p.truncate_speakers(keep), frame_period);
        let mut block = ActivityMatrix::zeros(keep, total, frame_period);
        let mut remaining = Vec::new();
        for (i, &t) in selected.iter().enumerate() {
            let mut any = false;
            for s in 0..keep {
                if local.get(s, i) {
                    block.set(s, t, true);
                    any = true;
                }
            }
            if !any {
                remaining.push(t);
            }
        }
        blocks.push(block);
        per_iter.push(keep);
        if estimated < s_max || remaining.len() == selected.len() {
            break;
        }
        selected = remaining;
    }
    Ok(IterativeResult {
        activity: ActivityMatrix::stack(&blocks, total, frame_period)?,
        speakers_per_iteration: per_iter,
    })
}

pub fn iterative_inference(
    x: &Tensor,
    diarizer: &dyn Diarizer,
    s_max: usize,
    frame_period: f64,
) -> Result<IterativeResult> {
    iterative_inference_limited(x, diarizer, s_max, None, frame_period)
}

/// Runs iterative inference with the first pass limited to 1, ..., `s_max`
/// speakers and combines the resulting hypotheses by voting.
pub fn iterative_inference_plus(
    x: &Tensor,
    diarizer: &dyn Diarizer,
    s_max: usize,
    frame_period: f64,
) -> Result<ActivityMatrix> {
    let hyps = (1..=s_max)
        .map(|limit| {
            iterative_inference_limited(x, diarizer, s_max, Some(limit), frame_period).map(|r| r.activity)
        })
        .collect::<Result<Vec<_>>>()?;
    combine(&hyps)
}
