use std::fmt;

use crate::data_io::Annotation;
use crate::error::{Error, Result};
use crate::metrics::mapping::{assign_max_overlap, speaker_turns};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerOptions {
    /// Seconds excluded on each side of every reference turn boundary.
    pub collar: f64,
    /// Exclude regions where more than one reference speaker is active.
    pub skip_overlap: bool,
}

impl Default for DerOptions {
    fn default() -> Self {
        DerOptions {
            collar: 0.25,
            skip_overlap: true,
        }
    }
}

/// Error fractions relative to scored reference speech.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerBreakdown {
    pub speaker_error: f64,
    pub missed_speech: f64,
    pub false_alarm: f64,
    /// `speaker_error + missed_speech + false_alarm`.
    pub der: f64,
    /// Reference speech time inside the scored regions, in seconds.
    pub scored_time: f64,
}

impl DerBreakdown {
    /// Builds fractions from error times (seconds) and scored reference time.
    pub fn from_times(missed: f64, false_alarm: f64, speaker_error: f64, scored_time: f64) -> Self {
        let f = |t: f64| if scored_time > 0.0 { t / scored_time } else { 0.0 };
        let (m, fa, se) = (f(missed), f(false_alarm), f(speaker_error));
        DerBreakdown {
            speaker_error: se,
            missed_speech: m,
            false_alarm: fa,
            der: se + m + fa,
            scored_time,
        }
    }

    /// `DER=<x> MISS=<x> FA=<x> SPKERR=<x> SCORED=<secs>`, rates in percent.
    pub fn report_line(&self) -> String {
        format!(
            "DER={:.4} MISS={:.4} FA={:.4} SPKERR={:.4} SCORED={:.2}",
            100.0 * self.der,
            100.0 * self.missed_speech,
            100.0 * self.false_alarm,
            100.0 * self.speaker_error,
            self.scored_time
        )
    }
}

impl fmt::Display for DerBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Diarization error rate  {:7.2}%", 100.0 * self.der)?;
        writeln!(f, "  speaker error         {:7.2}%", 100.0 * self.speaker_error)?;
        writeln!(f, "  missed speech         {:7.2}%", 100.0 * self.missed_speech)?;
        writeln!(f, "  false alarm           {:7.2}%", 100.0 * self.false_alarm)?;
        write!(f, "  scored speech         {:7.2}s", self.scored_time)
    }
}

fn union(mut iv: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
    for (s, e) in iv {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Tracks which intervals of a sorted disjoint list contain a moving point.
struct Cursor<'a> {
    turns: &'a [(f64, f64)],
    pos: usize,
}

impl Cursor<'_> {
    fn contains(&mut self, t: f64) -> bool {
        while self.pos < self.turns.len() && self.turns[self.pos].1 <= t {
            self.pos += 1;
        }
        self.pos < self.turns.len() && self.turns[self.pos].0 <= t
    }
}

/// An elementary scored interval and who is speaking in it.
struct Slice {
    dur: f64,
    refs: Vec<usize>,
    hyps: Vec<usize>,
}

#[derive(Default)]
struct Totals {
    missed: f64,
    false_alarm: f64,
    confusion: f64,
    scored: f64,
}

fn score_recording(reference: &Annotation, hypothesis: &Annotation, rec: &str, opts: &DerOptions) -> Totals {
    let r = speaker_turns(reference, rec);
    let h = speaker_turns(hypothesis, rec);

    let collars = if opts.collar > 0.0 {
        union(
            r.iter()
                .flat_map(|(_, t)| t.iter())
                .flat_map(|&(s, e)| [s, e])
                .map(|b| ((b - opts.collar).max(0.0), b + opts.collar))
                .collect(),
        )
    } else {
        Vec::new()
    };

    let mut points: Vec<f64> = r
        .iter()
        .chain(h.iter())
        .flat_map(|(_, t)| t.iter())
        .chain(collars.iter())
        .flat_map(|&(s, e)| [s, e])
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();

    let mut rc: Vec<Cursor> = r.iter().map(|(_, t)| Cursor { turns: t, pos: 0 }).collect();
    let mut hc: Vec<Cursor> = h.iter().map(|(_, t)| Cursor { turns: t, pos: 0 }).collect();
    let mut cc = Cursor { turns: &collars, pos: 0 };

    let mut slices = Vec::new();
    for w in points.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let mid = 0.5 * (t0 + t1);
        let dur = t1 - t0;
        let refs: Vec<usize> = (0..rc.len()).filter(|&i| rc[i].contains(mid)).collect();
        let hyps: Vec<usize> = (0..hc.len()).filter(|&j| hc[j].contains(mid)).collect();
        if cc.contains(mid) || (opts.skip_overlap && refs.len() > 1) {
            continue;
        }
        if refs.is_empty() && hyps.is_empty() {
            continue;
        }
        slices.push(Slice { dur, refs, hyps });
    }

    let mut overlap = vec![vec![0.0; h.len()]; r.len()];
    for s in &slices {
        for &i in &s.refs {
            for &j in &s.hyps {
                overlap[i][j] += s.dur;
            }
        }
    }
    let mapping = assign_max_overlap(&overlap);

    let mut t = Totals::default();
    for s in &slices {
        let n_ref = s.refs.len() as f64;
        let n_hyp = s.hyps.len() as f64;
        let correct = s
            .refs
            .iter()
            .filter(|&&i| mapping[i].is_some_and(|j| s.hyps.contains(&j)))
            .count() as f64;
        t.scored += s.dur * n_ref;
        t.missed += s.dur * (n_ref - n_hyp).max(0.0);
        t.false_alarm += s.dur * (n_hyp - n_ref).max(0.0);
        t.confusion += s.dur * (n_ref.min(n_hyp) - correct);
    }
    t
}

/// Diarization error rate over all recordings of `reference`.
///
/// Time is cut into elementary intervals at every reference, hypothesis and
/// collar boundary. Intervals inside a collar, or with overlapping reference
/// speakers when `skip_overlap` is set, are not scored. Reference and
/// hypothesis speakers are paired per recording by the one-to-one mapping
/// with maximum scored overlap.
pub fn der(reference: &Annotation, hypothesis: &Annotation, opts: &DerOptions) -> Result<DerBreakdown> {
    if !(opts.collar >= 0.0 && opts.collar.is_finite()) {
        return Err(Error::invalid(format!("collar must be non-negative, got {}", opts.collar)));
    }
    let recs = reference.recording_ids();
    for h in hypothesis.recording_ids() {
        if !recs.contains(&h) {
            log::warn!("hypothesis recording {h} has no reference; ignored");
        }
    }
    let mut total = Totals::default();
    for rec in recs {
        let t = score_recording(reference, hypothesis, rec, opts);
        total.missed += t.missed;
        total.false_alarm += t.false_alarm;
        total.confusion += t.confusion;
        total.scored += t.scored;
    }
    if total.scored <= 0.0 {
        return Err(Error::invalid("reference has no scored speech"));
    }
    Ok(DerBreakdown::from_times(
        total.missed,
        total.false_alarm,
        total.confusion,
        total.scored,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::AnnotationEntry;

    fn ann(entries: &[(f64, f64, &str)]) -> Annotation {
        Annotation::new(
            entries
                .iter()
                .map(|&(s, e, spk)| AnnotationEntry::new("rec", s, e - s, spk))
                .collect(),
        )
        .unwrap()
    }

    const NO_COLLAR: DerOptions = DerOptions {
        collar: 0.0,
        skip_overlap: true,
    };

    #[test]
    fn identical_is_zero() {
        let r = ann(&[(0.0, 10.0, "a")]);
        let b = der(&r, &r, &DerOptions::default()).unwrap();
        assert_eq!(b.der, 0.0);
    }

    #[test]
    fn twenty_percent_miss() {
        let r = ann(&[(0.0, 10.0, "a")]);
        let h = ann(&[(0.0, 8.0, "x")]);
        let b = der(&r, &h, &NO_COLLAR).unwrap();
        assert!((b.missed_speech - 0.2).abs() < 1e-12);
        assert_eq!(b.false_alarm, 0.0);
        assert_eq!(b.speaker_error, 0.0);
        assert!((b.der - 0.2).abs() < 1e-12);
    }

    #[test]
    fn fifty_percent_confusion() {
        let r = ann(&[(0.0, 5.0, "A"), (5.0, 10.0, "B")]);
        let h = ann(&[(0.0, 10.0, "spk1")]);
        let b = der(&r, &h, &NO_COLLAR).unwrap();
        assert!((b.speaker_error - 0.5).abs() < 1e-12);
        assert_eq!(b.missed_speech + b.false_alarm, 0.0);
    }

    #[test]
    fn false_alarm_and_collar() {
        let r = ann(&[(0.0, 10.0, "a")]);
        let h = ann(&[(0.0, 12.0, "x")]);
        let b = der(&r, &h, &NO_COLLAR).unwrap();
        assert!((b.false_alarm - 0.2).abs() < 1e-12);
        // A 0.25 s collar removes [9.75, 10.25] and [0, 0.25].
        let c = der(&r, &h, &DerOptions::default()).unwrap();
        assert!((c.scored_time - 9.5).abs() < 1e-12);
        assert!((c.false_alarm * c.scored_time - 1.75).abs() < 1e-12);
    }

    #[test]
    fn overlap_skipping() {
        let r = ann(&[(0.0, 6.0, "a"), (4.0, 10.0, "b")]);
        let h = ann(&[(0.0, 5.0, "x"), (5.0, 10.0, "y")]);
        let skip = der(&r, &h, &NO_COLLAR).unwrap();
        assert!((skip.scored_time - 8.0).abs() < 1e-12);
        assert_eq!(skip.der, 0.0);
        let keep = der(&r, &h, &DerOptions { collar: 0.0, skip_overlap: false }).unwrap();
        assert!((keep.scored_time - 12.0).abs() < 1e-12);
        assert!((keep.missed_speech * 12.0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_is_an_error() {
        let h = ann(&[(0.0, 1.0, "x")]);
        assert!(der(&Annotation::default(), &h, &NO_COLLAR).is_err());
    }

    #[test]
    fn report_line_format() {
        let b = DerBreakdown::from_times(2.0, 0.0, 0.0, 10.0);
        assert_eq!(b.report_line(), "DER=20.0000 MISS=20.0000 FA=0.0000 SPKERR=0.0000 SCORED=10.00");
    }
}
