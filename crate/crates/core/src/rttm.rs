//! RTTM annotations, frame-label files, and conversion between segment
//! lists and frame activity matrices.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::activity::ActivityMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub speaker: String,
    pub onset: f64,
    pub duration: f64,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

/// Speaker segments of one recording.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Annotation {
    pub recording_id: String,
    pub segments: Vec<Segment>,
}

impl Annotation {
    pub fn new(recording_id: impl Into<String>) -> Self {
        Annotation {
            recording_id: recording_id.into(),
            segments: Vec::new(),
        }
    }

    pub fn push(&mut self, speaker: impl Into<String>, onset: f64, duration: f64) -> Result<()> {
        let speaker = speaker.into();
        if speaker.is_empty() {
            return Err(Error::Input("empty speaker id".into()));
        }
        if !(onset >= 0.0) || !(duration > 0.0) || !onset.is_finite() || !duration.is_finite() {
            return Err(Error::Input(format!(
                "bad segment for {speaker}: onset {onset}, duration {duration}"
            )));
        }
        self.segments.push(Segment {
            speaker,
            onset,
            duration,
        });
        Ok(())
    }

    /// Distinct speaker ids, sorted.
    pub fn speakers(&self) -> Vec<String> {
        self.segments
            .iter()
            .map(|s| s.speaker.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Latest segment end, 0 when empty.
    pub fn end(&self) -> f64 {
        self.segments.iter().map(Segment::end).fold(0.0, f64::max)
    }

    /// Segments sorted by onset, then speaker, then duration.
    pub fn sorted(&self) -> Annotation {
        let mut segments = self.segments.clone();
        segments.sort_by(|a, b| {
            a.onset
                .total_cmp(&b.onset)
                .then_with(|| a.speaker.cmp(&b.speaker))
                .then_with(|| a.duration.total_cmp(&b.duration))
        });
        Annotation {
            recording_id: self.recording_id.clone(),
            segments,
        }
    }
}

/// Parses RTTM text. Only `SPEAKER` lines are used; comment lines starting
/// with `;;` and other record types are skipped. Recordings appear in
/// order of first occurrence.
pub fn parse_rttm(text: &str, origin: &str) -> Result<Vec<Annotation>> {
    let mut out: Vec<Annotation> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with(";;") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields[0] != "SPEAKER" {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        if fields.len() < 8 {
            return Err(err(format!("expected at least 8 fields, got {}", fields.len())));
        }
        let onset: f64 = fields[3]
            .parse()
            .map_err(|_| err(format!("bad onset `{}`", fields[3])))?;
        let duration: f64 = fields[4]
            .parse()
            .map_err(|_| err(format!("bad duration `{}`", fields[4])))?;
        if duration < 0.0 || !duration.is_finite() {
            return Err(err(format!("negative or non-finite duration {duration}")));
        }
        if onset < 0.0 || !onset.is_finite() {
            return Err(err(format!("negative or non-finite onset {onset}")));
        }
        if duration == 0.0 {
            continue;
        }
        let rec = fields[1];
        let idx = match out.iter().position(|a| a.recording_id == rec) {
            Some(idx) => idx,
            None => {
                out.push(Annotation::new(rec));
                out.len() - 1
            }
        };
        out[idx].segments.push(Segment {
            speaker: fields[7].to_string(),
            onset,
            duration,
        });
    }
    Ok(out)
}

pub fn read_rttm(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_rttm(&text, &path.display().to_string())
}

/// Canonical RTTM: channel 1, times with three decimals, segments sorted
/// by onset within each recording.
pub fn emit_rttm(annotations: &[Annotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        for s in a.sorted().segments {
            writeln!(
                out,
                "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
                a.recording_id, s.onset, s.duration, s.speaker
            )
            .expect("writing to a String");
        }
    }
    out
}

pub fn write_rttm(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, emit_rttm(annotations)).map_err(|e| Error::file(path, e))
}

/// Frame `t` of speaker `s` is active when its centre `(t + 0.5) * period`
/// lies inside one of the speaker's segments. Rows follow `speakers`.
pub fn rasterize_with_speakers(
    a: &Annotation,
    speakers: &[String],
    frame_period: f64,
    frames: usize,
) -> Result<ActivityMatrix> {
    if !(frame_period > 0.0) {
        return Err(Error::Input(format!("frame period {frame_period} must be positive")));
    }
    let mut m = ActivityMatrix::zeros(speakers.len(), frames, frame_period);
    for seg in &a.segments {
        let Some(row) = speakers.iter().position(|s| *s == seg.speaker) else {
            continue;
        };
        // First frame whose centre is >= onset, last whose centre is < end.
        let first = (seg.onset / frame_period - 0.5).ceil().max(0.0) as usize;
        let mut t = first;
        while t < frames && (t as f64 + 0.5) * frame_period < seg.end() {
            if (t as f64 + 0.5) * frame_period >= seg.onset {
                m.set(row, t, true);
            }
            t += 1;
        }
    }
    Ok(m)
}

/// Rasterizes with rows in sorted speaker order; returns the row names.
pub fn rasterize(a: &Annotation, frame_period: f64, frames: usize) -> Result<(ActivityMatrix, Vec<String>)> {
    let speakers = a.speakers();
    let m = rasterize_with_speakers(a, &speakers, frame_period, frames)?;
    Ok((m, speakers))
}

/// Maximal runs of active frames as segments. `speakers` names the rows;
/// when shorter than the row count, missing names become `spk{row}`.
pub fn segmentize(y: &ActivityMatrix, speakers: &[String], recording_id: &str) -> Annotation {
    let fp = y.frame_period();
    let mut a = Annotation::new(recording_id);
    for s in 0..y.speakers() {
        let name = speakers
            .get(s)
            .cloned()
            .unwrap_or_else(|| format!("spk{s}"));
        let row = y.row(s);
        let mut t = 0;
        while t < row.len() {
            if row[t] == 0 {
                t += 1;
                continue;
            }
            let start = t;
            while t < row.len() && row[t] != 0 {
                t += 1;
            }
            a.segments.push(Segment {
                speaker: name.clone(),
                onset: start as f64 * fp,
                duration: (t - start) as f64 * fp,
            });
        }
    }
    a
}

/// Frame-level labels: speaker names and their activity rows.
///
/// Text layout:
///
/// ```text
/// # eend frame labels
/// frame_period 0.1
/// frames 5
/// spkA 01100
/// spkB 00111
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLabels {
    pub speakers: Vec<String>,
    pub activity: ActivityMatrix,
}

impl FrameLabels {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# eend frame labels\n");
        writeln!(out, "frame_period {}", self.activity.frame_period()).expect("string write");
        writeln!(out, "frames {}", self.activity.frames()).expect("string write");
        for (s, name) in self.speakers.iter().enumerate() {
            let bits: String = self
                .activity
                .row(s)
                .iter()
                .map(|&v| if v != 0 { '1' } else { '0' })
                .collect();
            writeln!(out, "{name} {bits}").expect("string write");
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut period = None;
        let mut frames = None;
        let mut speakers = Vec::new();
        let mut rows: Vec<Vec<u8>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| err(i + 1, format!("malformed line `{line}`")))?;
            let rest = rest.trim();
            match key {
                "frame_period" => {
                    period = Some(
                        rest.parse::<f64>()
                            .map_err(|_| err(i + 1, format!("bad frame period `{rest}`")))?,
                    )
                }
                "frames" => {
                    frames = Some(
                        rest.parse::<usize>()
                            .map_err(|_| err(i + 1, format!("bad frame count `{rest}`")))?,
                    )
                }
                name => {
                    let n = frames.ok_or_else(|| err(i + 1, "`frames` must precede speaker rows".into()))?;
                    let row: Vec<u8> = rest
                        .chars()
                        .map(|c| match c {
                            '0' => Ok(0),
                            '1' => Ok(1),
                            other => Err(err(i + 1, format!("activity char `{other}`"))),
                        })
                        .collect::<Result<_>>()?;
                    if row.len() != n {
                        return Err(err(i + 1, format!("{} frames, expected {n}", row.len())));
                    }
                    speakers.push(name.to_string());
                    rows.push(row);
                }
            }
        }
        let period = period.ok_or_else(|| err(0, "missing frame_period".into()))?;
        let frames = frames.ok_or_else(|| err(0, "missing frames".into()))?;
        let activity = if rows.is_empty() {
            ActivityMatrix::zeros(0, frames, period)
        } else {
            ActivityMatrix::from_rows(&rows, period)?
        };
        Ok(FrameLabels { speakers, activity })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_speaker_line() {
        let a = parse_rttm("SPEAKER rec1 1 0.50 2.00 <NA> <NA> spkA <NA> <NA>\n", "t").unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].recording_id, "rec1");
        assert_eq!(
            a[0].segments,
            vec![Segment {
                speaker: "spkA".into(),
                onset: 0.5,
                duration: 2.0
            }]
        );
    }

    #[test]
    fn empty_and_comments() {
        assert!(parse_rttm("", "t").unwrap().is_empty());
        let text = ";; comment\nSPKR-INFO rec 1 <NA> <NA> <NA> unknown a <NA> <NA>\n";
        assert!(parse_rttm(text, "t").unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let text = "SPEAKER r 1 0 1 <NA> <NA> a <NA> <NA>\nSPEAKER r 1 x 1 <NA> <NA> a\n";
        match parse_rttm(text, "f.rttm") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_rttm("SPEAKER r 1 0 -1 <NA> <NA> a <NA> <NA>", "t").is_err());
        assert!(parse_rttm("SPEAKER r 1 0", "t").is_err());
    }

    #[test]
    fn groups_by_recording_in_file_order() {
        let text = "SPEAKER b 1 0 1 <NA> <NA> x <NA> <NA>\n\
                    SPEAKER a 1 0 1 <NA> <NA> y <NA> <NA>\n\
                    SPEAKER b 1 2 1 <NA> <NA> x <NA> <NA>\n";
        let a = parse_rttm(text, "t").unwrap();
        assert_eq!(a[0].recording_id, "b");
        assert_eq!(a[0].segments.len(), 2);
        assert_eq!(a[1].recording_id, "a");
    }

    #[test]
    fn emits_sorted_canonical_lines() {
        let mut a = Annotation::new("r");
        a.push("b", 2.0, 1.0).unwrap();
        a.push("a", 0.25, 0.5).unwrap();
        assert_eq!(
            emit_rttm(&[a]),
            "SPEAKER r 1 0.250 0.500 <NA> <NA> a <NA> <NA>\nSPEAKER r 1 2.000 1.000 <NA> <NA> b <NA> <NA>\n"
        );
    }

    #[test]
    fn one_second_segment_covers_ten_frames() {
        let mut a = Annotation::new("r");
        a.push("s", 0.0, 1.0).unwrap();
        let (m, names) = rasterize(&a, 0.1, 15).unwrap();
        assert_eq!(names, vec!["s".to_string()]);
        let active: Vec<usize> = (0..15).filter(|&t| m.get(0, t)).collect();
        assert_eq!(active, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn frame_aligned_round_trip() {
        let mut a = Annotation::new("r");
        a.push("x", 0.3, 0.5).unwrap();
        a.push("y", 0.0, 0.2).unwrap();
        a.push("x", 1.0, 0.1).unwrap();
        let (m, names) = rasterize(&a, 0.1, 20).unwrap();
        let back = segmentize(&m, &names, "r");
        let expect = a.sorted();
        let got = back.sorted();
        assert_eq!(got.segments.len(), expect.segments.len());
        for (g, e) in got.segments.iter().zip(&expect.segments) {
            assert_eq!(g.speaker, e.speaker);
            assert!((g.onset - e.onset).abs() < 1e-9);
            assert!((g.duration - e.duration).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_labels_round_trip() {
        let activity = ActivityMatrix::from_rows(&[vec![0, 1, 1, 0, 0], vec![0, 0, 1, 1, 1]], 0.1).unwrap();
        let labels = FrameLabels {
            speakers: vec!["spkA".into(), "spkB".into()],
            activity,
        };
        let text = labels.to_text();
        assert!(text.contains("spkA 01100"));
        assert_eq!(FrameLabels::parse(&text, "t").unwrap(), labels);
        assert!(FrameLabels::parse("frame_period 0.1\nframes 3\na 0101\n", "t").is_err());
        assert!(FrameLabels::parse("frame_period 0.1\nframes 2\na 02\n", "t").is_err());
    }
}
