//! Overlap-aware majority-vote combination of diarization hypotheses.
//!
//! Speakers of every hypothesis are first mapped onto a shared set of
//! global speakers, then each frame keeps the most-voted global speakers,
//! as many as the rounded mean of the hypotheses' speaker counts.

use crate::activity::ActivityMatrix;
use crate::assignment::hungarian_max;
use crate::error::{Error, Result};
use crate::rttm::{rasterize, segmentize, Annotation};

/// `maps[k][s]` is the global id of speaker `s` in hypothesis `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMapping {
    pub maps: Vec<Vec<usize>>,
    pub num_global: usize,
}

fn check_shapes(hyps: &[ActivityMatrix]) -> Result<()> {
    let Some(first) = hyps.first() else {
        return Err(Error::Input("combination needs at least one hypothesis".into()));
    };
    for (k, h) in hyps.iter().enumerate() {
        if h.frames() != first.frames() || h.frame_period() != first.frame_period() {
            return Err(Error::dim(
                "combine",
                format!(
                    "hypothesis {k} has {} frames at {} s, expected {} at {} s",
                    h.frames(),
                    h.frame_period(),
                    first.frames(),
                    first.frame_period()
                ),
            ));
        }
    }
    Ok(())
}

fn co_active(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| **x != 0 && **y != 0).count()
}

/// The first hypothesis fixes the global speakers. Each later hypothesis
/// is matched to them by maximum total co-active frames; its leftover
/// speakers become new global speakers. A global speaker's activity for
/// matching is that of the hypothesis that introduced it.
pub fn map_labels(hyps: &[ActivityMatrix]) -> Result<LabelMapping> {
    check_shapes(hyps)?;
    let mut global_rows: Vec<Vec<u8>> = Vec::new();
    let mut maps = Vec::with_capacity(hyps.len());
    for h in hyps {
        let weight: Vec<Vec<f64>> = (0..h.speakers())
            .map(|s| {
                global_rows
                    .iter()
                    .map(|g| co_active(h.row(s), g) as f64)
                    .collect()
            })
            .collect();
        let assign = if global_rows.is_empty() {
            vec![None; h.speakers()]
        } else {
            hungarian_max(&weight)
        };
        let mut map = Vec::with_capacity(h.speakers());
        for (s, a) in assign.into_iter().enumerate() {
            match a {
                Some(g) => map.push(g),
                None => {
                    map.push(global_rows.len());
                    global_rows.push(h.row(s).to_vec());
                }
            }
        }
        maps.push(map);
    }
    Ok(LabelMapping {
        num_global: global_rows.len(),
        maps,
    })
}

/// `round(num / den)` with ties to even.
fn round_half_even(num: usize, den: usize) -> usize {
    let q = num / den;
    let r = num % den;
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q % 2),
        std::cmp::Ordering::Less => q,
    }
}

/// Uniform-weight frame-wise vote. Output has one row per global speaker.
/// Ties in vote count go to the lower global id.
pub fn vote(hyps: &[ActivityMatrix], mapping: &LabelMapping) -> Result<ActivityMatrix> {
    check_shapes(hyps)?;
    if mapping.maps.len() != hyps.len() {
        return Err(Error::Input(format!(
            "mapping covers {} hypotheses, got {}",
            mapping.maps.len(),
            hyps.len()
        )));
    }
    for (k, (h, m)) in hyps.iter().zip(&mapping.maps).enumerate() {
        if m.len() != h.speakers() || m.iter().any(|&g| g >= mapping.num_global) {
            return Err(Error::Input(format!("mapping for hypothesis {k} does not fit it")));
        }
    }
    let k = hyps.len();
    let frames = hyps[0].frames();
    let mut out = ActivityMatrix::zeros(mapping.num_global, frames, hyps[0].frame_period());
    let mut votes = vec![0usize; mapping.num_global];
    let mut order: Vec<usize> = Vec::with_capacity(mapping.num_global);
    for t in 0..frames {
        votes.iter_mut().for_each(|v| *v = 0);
        let mut total = 0;
        for (h, m) in hyps.iter().zip(&mapping.maps) {
            for (s, &g) in m.iter().enumerate() {
                if h.get(s, t) {
                    votes[g] += 1;
                    total += 1;
                }
            }
        }
        let n = round_half_even(total, k);
        order.clear();
        order.extend((0..mapping.num_global).filter(|&g| votes[g] > 0));
        order.sort_by(|&a, &b| votes[b].cmp(&votes[a]).then(a.cmp(&b)));
        for &g in order.iter().take(n) {
            out.set(g, t, true);
        }
    }
    Ok(out)
}

pub fn combine(hyps: &[ActivityMatrix]) -> Result<ActivityMatrix> {
    let mapping = map_labels(hyps)?;
    vote(hyps, &mapping)
}

/// Combines segment-level hypotheses of one recording by rasterizing them
/// at `frame_period`. Output speakers are named `spk{global id}`; global
/// speakers that end up silent are dropped.
pub fn combine_annotations(hyps: &[Annotation], frame_period: f64) -> Result<Annotation> {
    let Some(first) = hyps.first() else {
        return Err(Error::Input("combination needs at least one hypothesis".into()));
    };
    if !(frame_period > 0.0) {
        return Err(Error::Input(format!("frame period {frame_period} must be positive")));
    }
    let end = hyps.iter().map(Annotation::end).fold(0.0, f64::max);
    let frames = (end / frame_period).ceil() as usize;
    let mats = hyps
        .iter()
        .map(|h| rasterize(h, frame_period, frames).map(|(m, _)| m))
        .collect::<Result<Vec<_>>>()?;
    let fused = combine(&mats)?;
    let names: Vec<String> = (0..fused.speakers()).map(|g| format!("spk{g}")).collect();
    Ok(segmentize(&fused, &names, &first.recording_id))
}
