//! Diarization error rate, Jaccard error rate and speaker-count confusion.
//!
//! Times are handled as integer microsecond ticks so that segment
//! boundaries compare exactly.

use std::collections::BTreeMap;

use crate::assignment::{hungarian, hungarian_max};
use crate::error::{Error, Result};
use crate::rttm::Annotation;

const TICKS_PER_SECOND: f64 = 1e6;

fn to_ticks(seconds: f64) -> i64 {
    (seconds * TICKS_PER_SECOND).round() as i64
}

fn to_seconds(ticks: i64) -> f64 {
    ticks as f64 / TICKS_PER_SECOND
}

/// Durations in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DerBreakdown {
    pub speech: f64,
    pub missed: f64,
    pub false_alarm: f64,
    pub confusion: f64,
}

impl DerBreakdown {
    pub fn error(&self) -> f64 {
        self.missed + self.false_alarm + self.confusion
    }

    /// Error ratio; fails when there is no scored reference speech.
    pub fn der(&self) -> Result<f64> {
        if self.speech <= 0.0 {
            return Err(Error::Input("DER undefined: no scored reference speech".into()));
        }
        Ok(self.error() / self.speech)
    }

    pub fn accumulate(&mut self, other: &DerBreakdown) {
        self.speech += other.speech;
        self.missed += other.missed;
        self.false_alarm += other.false_alarm;
        self.confusion += other.confusion;
    }
}

fn speaker_index(a: &Annotation) -> Vec<String> {
    a.speakers()
}

/// Union of one speaker's segments as sorted disjoint tick intervals.
fn merged_intervals(a: &Annotation, speaker: &str) -> Vec<(i64, i64)> {
    let mut iv: Vec<(i64, i64)> = a
        .segments
        .iter()
        .filter(|s| s.speaker == speaker)
        .map(|s| (to_ticks(s.onset), to_ticks(s.end())))
        .filter(|(b, e)| e > b)
        .collect();
    merge(&mut iv)
}

fn merge(iv: &mut [(i64, i64)]) -> Vec<(i64, i64)> {
    iv.sort_unstable();
    let mut out: Vec<(i64, i64)> = Vec::with_capacity(iv.len());
    for &(b, e) in iv.iter() {
        match out.last_mut() {
            Some(last) if b <= last.1 => last.1 = last.1.max(e),
            _ => out.push((b, e)),
        }
    }
    out
}

/// Elementary interval of the timeline with the speakers active in it.
struct Piece {
    ticks: i64,
    refs: Vec<usize>,
    hyps: Vec<usize>,
}

/// Splits the scored timeline into pieces of constant speaker activity.
fn sweep(
    ref_iv: &[Vec<(i64, i64)>],
    hyp_iv: &[Vec<(i64, i64)>],
    excluded: &[(i64, i64)],
) -> Vec<Piece> {
    // Event kinds: 0 ref speaker, 1 hyp speaker, 2 exclusion.
    let mut events: Vec<(i64, u8, usize, i32)> = Vec::new();
    for (kind, set) in [(0u8, ref_iv), (1u8, hyp_iv)] {
        for (s, ivs) in set.iter().enumerate() {
            for &(b, e) in ivs {
                events.push((b, kind, s, 1));
                events.push((e, kind, s, -1));
            }
        }
    }
    for &(b, e) in excluded {
        events.push((b, 2, 0, 1));
        events.push((e, 2, 0, -1));
    }
    events.sort_unstable();
    let mut ref_on = vec![0i32; ref_iv.len()];
    let mut hyp_on = vec![0i32; hyp_iv.len()];
    let mut excl = 0i32;
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            let (_, kind, s, d) = events[i];
            match kind {
                0 => ref_on[s] += d,
                1 => hyp_on[s] += d,
                _ => excl += d,
            }
            i += 1;
        }
        let Some(next) = events.get(i).map(|e| e.0) else {
            break;
        };
        if excl > 0 || next == t {
            continue;
        }
        let refs: Vec<usize> = (0..ref_on.len()).filter(|&s| ref_on[s] > 0).collect();
        let hyps: Vec<usize> = (0..hyp_on.len()).filter(|&s| hyp_on[s] > 0).collect();
        if refs.is_empty() && hyps.is_empty() {
            continue;
        }
        pieces.push(Piece {
            ticks: next - t,
            refs,
            hyps,
        });
    }
    pieces
}

/// Error times with an optimal one-to-one speaker mapping and a collar
/// of `collar` seconds on either side of every reference boundary.
/// Overlapped speech is scored.
pub fn der_times(reference: &Annotation, hypothesis: &Annotation, collar: f64) -> Result<DerBreakdown> {
    if !(collar >= 0.0) {
        return Err(Error::Input(format!("collar {collar} must be non-negative")));
    }
    let rs = speaker_index(reference);
    let hs = speaker_index(hypothesis);
    let ref_iv: Vec<_> = rs.iter().map(|s| merged_intervals(reference, s)).collect();
    let hyp_iv: Vec<_> = hs.iter().map(|s| merged_intervals(hypothesis, s)).collect();
    let c = to_ticks(collar);
    let mut excluded: Vec<(i64, i64)> = Vec::new();
    if c > 0 {
        for seg in &reference.segments {
            for b in [to_ticks(seg.onset), to_ticks(seg.end())] {
                excluded.push((b - c, b + c));
            }
        }
    }
    let excluded = merge(&mut excluded);
    let pieces = sweep(&ref_iv, &hyp_iv, &excluded);

    let mut overlap = vec![vec![0.0; hs.len()]; rs.len()];
    for p in &pieces {
        for &r in &p.refs {
            for &h in &p.hyps {
                overlap[r][h] += p.ticks as f64;
            }
        }
    }
    let mapping = hungarian_max(&overlap);

    let (mut speech, mut missed, mut fa, mut conf) = (0i64, 0i64, 0i64, 0i64);
    for p in &pieces {
        let nr = p.refs.len() as i64;
        let nh = p.hyps.len() as i64;
        let correct = p
            .refs
            .iter()
            .filter(|&&r| mapping[r].is_some_and(|h| p.hyps.contains(&h)))
            .count() as i64;
        speech += p.ticks * nr;
        missed += p.ticks * (nr - nh).max(0);
        fa += p.ticks * (nh - nr).max(0);
        conf += p.ticks * (nr.min(nh) - correct);
    }
    Ok(DerBreakdown {
        speech: to_seconds(speech),
        missed: to_seconds(missed),
        false_alarm: to_seconds(fa),
        confusion: to_seconds(conf),
    })
}

/// Like [`der_times`] but fails when the reference has no scored speech.
pub fn der(reference: &Annotation, hypothesis: &Annotation, collar: f64) -> Result<DerBreakdown> {
    let b = der_times(reference, hypothesis, collar)?;
    b.der()?;
    Ok(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JerSpeaker {
    pub speaker: String,
    pub matched: Option<String>,
    pub false_alarm: f64,
    pub missed: f64,
    pub union: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JerBreakdown {
    pub speakers: Vec<JerSpeaker>,
    pub jer: f64,
}

fn total_ticks(iv: &[(i64, i64)]) -> i64 {
    iv.iter().map(|(b, e)| e - b).sum()
}

fn intersection_ticks(a: &[(i64, i64)], b: &[(i64, i64)]) -> i64 {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Mean over reference speakers of `(FA + MI) / union` under the
/// assignment minimising the summed per-pair cost. Reference speakers
/// left unpaired score 1; unpaired system speakers are not counted.
pub fn jer(reference: &Annotation, hypothesis: &Annotation) -> Result<JerBreakdown> {
    let rs = speaker_index(reference);
    if rs.is_empty() {
        return Err(Error::Input("JER undefined: no reference speakers".into()));
    }
    let hs = speaker_index(hypothesis);
    let ref_iv: Vec<_> = rs.iter().map(|s| merged_intervals(reference, s)).collect();
    let hyp_iv: Vec<_> = hs.iter().map(|s| merged_intervals(hypothesis, s)).collect();
    // (fa, mi, union) per pair in ticks.
    let stats: Vec<Vec<(i64, i64, i64)>> = ref_iv
        .iter()
        .map(|r| {
            hyp_iv
                .iter()
                .map(|h| {
                    let inter = intersection_ticks(r, h);
                    let (tr, th) = (total_ticks(r), total_ticks(h));
                    (th - inter, tr - inter, tr + th - inter)
                })
                .collect()
        })
        .collect();
    let cost: Vec<Vec<f64>> = stats
        .iter()
        .map(|row| {
            row.iter()
                .map(|&(fa, mi, u)| if u > 0 { (fa + mi) as f64 / u as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    let assign = hungarian(&cost);
    let mut speakers = Vec::with_capacity(rs.len());
    for (r, name) in rs.iter().enumerate() {
        let entry = match assign.get(r).copied().flatten() {
            Some(h) => {
                let (fa, mi, u) = stats[r][h];
                JerSpeaker {
                    speaker: name.clone(),
                    matched: Some(hs[h].clone()),
                    false_alarm: to_seconds(fa),
                    missed: to_seconds(mi),
                    union: to_seconds(u),
                    score: cost[r][h],
                }
            }
            None => {
                let tr = total_ticks(&ref_iv[r]);
                JerSpeaker {
                    speaker: name.clone(),
                    matched: None,
                    false_alarm: 0.0,
                    missed: to_seconds(tr),
                    union: to_seconds(tr),
                    score: 1.0,
                }
            }
        };
        speakers.push(entry);
    }
    let jer = speakers.iter().map(|s| s.score).sum::<f64>() / speakers.len() as f64;
    Ok(JerBreakdown { speakers, jer })
}

/// Speaker-count confusion; `matrix[pred][ref]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountingConfusion {
    pub matrix: Vec<Vec<usize>>,
    pub accuracy: f64,
}

impl CountingConfusion {
    pub fn from_counts(refs: &[usize], preds: &[usize]) -> Result<Self> {
        if refs.len() != preds.len() {
            return Err(Error::Input(format!(
                "{} reference counts vs {} predicted",
                refs.len(),
                preds.len()
            )));
        }
        let n = refs.iter().chain(preds).copied().max().map_or(0, |m| m + 1);
        let mut matrix = vec![vec![0usize; n]; n];
        for (&r, &p) in refs.iter().zip(preds) {
            matrix[p][r] += 1;
        }
        let correct: usize = (0..n).map(|i| matrix[i][i]).sum();
        let accuracy = if refs.is_empty() {
            0.0
        } else {
            correct as f64 / refs.len() as f64
        };
        Ok(CountingConfusion { matrix, accuracy })
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }
}

/// Counts distinct speakers per annotation and tabulates them.
pub fn counting_confusion(refs: &[Annotation], hyps: &[Annotation]) -> Result<CountingConfusion> {
    let r: Vec<usize> = refs.iter().map(|a| a.speakers().len()).collect();
    let h: Vec<usize> = hyps.iter().map(|a| a.speakers().len()).collect();
    CountingConfusion::from_counts(&r, &h)
}

/// Pairs annotations by recording id. Recordings missing from the
/// hypothesis side get an empty hypothesis.
pub fn pair_by_recording<'a>(
    refs: &'a [Annotation],
    hyps: &'a [Annotation],
) -> Vec<(&'a Annotation, Annotation)> {
    let by_id: BTreeMap<&str, &Annotation> =
        hyps.iter().map(|h| (h.recording_id.as_str(), h)).collect();
    refs.iter()
        .map(|r| {
            let h = by_id
                .get(r.recording_id.as_str())
                .map(|h| (*h).clone())
                .unwrap_or_else(|| Annotation::new(r.recording_id.clone()));
            (r, h)
        })
        .collect()
}
