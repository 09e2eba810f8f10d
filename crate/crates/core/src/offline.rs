//! Offline note alignment in two warping passes: first on pitch, then on onset time.
//!
//! The pitch pass warps the performed pitch sequence onto the score's pitch-set sequence in both
//! directions. Pairs on which the two optimal paths agree are trusted; the regions where they
//! disagree are re-paired per pitch (or interpolated) and the result yields a piecewise-linear map
//! from beats to seconds. The time pass then warps every pitch channel separately with an L1
//! metric on seconds and reads matches, insertions and deletions off the collapsed paths.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::dtw::{self, disagreement_brackets, Bracket, DtwError, Inclusion, L1};
use crate::noteio::{AlignmentRecord, NoteAlignment, Performance, PitchIndex, Score};

/// Seconds per beat assumed when a map has a single anchor.
pub const DEFAULT_BEAT_PERIOD: f64 = 0.5;

/// Maximal distance of an onset-pass link, in seconds.
pub const DEFAULT_CUTOFF_SEC: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error(transparent)]
    Dtw(#[from] DtwError),
    #[error("score and performance must both be non-empty")]
    EmptyInput,
    #[error("a time map needs at least one (performance, score) pair")]
    NoPairs,
    #[error("time map anchors must be finite and strictly increasing in beat")]
    BadAnchors,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfflineConfig {
    pub cutoff_sec: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            cutoff_sec: DEFAULT_CUTOFF_SEC,
        }
    }
}

/// Monotone piecewise-linear map from beats to seconds, linearly extrapolated past both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMap {
    anchors: Vec<(f64, f64)>,
}

impl TimeMap {
    /// Anchors must be strictly increasing in beat and non-decreasing in seconds.
    pub fn new(anchors: Vec<(f64, f64)>) -> Result<Self, AlignError> {
        let finite = anchors.iter().all(|(b, s)| b.is_finite() && s.is_finite());
        let monotone = anchors.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 >= w[0].1);
        if anchors.is_empty() || !finite || !monotone {
            return Err(AlignError::BadAnchors);
        }
        Ok(TimeMap { anchors })
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    pub fn eval(&self, beat: f64) -> f64 {
        let a = &self.anchors;
        if a.len() == 1 {
            return a[0].1 + DEFAULT_BEAT_PERIOD * (beat - a[0].0);
        }
        // index of the segment whose right end is the first anchor beyond `beat`
        let k = a.partition_point(|&(b, _)| b <= beat).clamp(1, a.len() - 1);
        let ((b0, s0), (b1, s1)) = (a[k - 1], a[k]);
        s0 + (s1 - s0) * (beat - b0) / (b1 - b0)
    }
}

/// Notes of one pitch on both sides, each sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchChannel {
    pub pitch: PitchIndex,
    /// (onset seconds, index into the performance)
    pub perf_onsets: Vec<(f64, usize)>,
    /// (beat, index into the score onsets)
    pub score_onsets: Vec<(f64, usize)>,
}

/// Splits both sides into one channel per pitch present in either.
pub fn pitch_channels(score: &Score, perf: &Performance) -> Vec<PitchChannel> {
    let mut channels: Vec<PitchChannel> = (PitchIndex::MIN..=PitchIndex::MAX)
        .map(|v| PitchChannel {
            pitch: PitchIndex::new(v).expect("keyboard range"),
            perf_onsets: Vec::new(),
            score_onsets: Vec::new(),
        })
        .collect();
    for (i, n) in perf.notes().iter().enumerate() {
        channels[(n.pitch.value() - 1) as usize]
            .perf_onsets
            .push((n.onset_sec, i));
    }
    for (j, o) in score.onsets().iter().enumerate() {
        for p in o.pitch_set.iter() {
            channels[(p.value() - 1) as usize].score_onsets.push((o.beat, j));
        }
    }
    channels.retain(|c| !c.perf_onsets.is_empty() || !c.score_onsets.is_empty());
    channels
}

/// Result of the pitch pass: (performance index, score onset index) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchAlignment {
    pub agreed: Vec<(usize, usize)>,
    pub brackets: Vec<Bracket>,
}

pub fn pitch_sequence_align(score: &Score, perf: &Performance) -> Result<PitchAlignment, AlignError> {
    if score.is_empty() || perf.is_empty() {
        return Err(AlignError::EmptyInput);
    }
    let pitches = perf.pitches();
    let sets = score.pitch_sets();
    let (_, fwd) = dtw::dtw(&pitches, &sets, &Inclusion)?;
    let (_, bwd) = dtw::dtw_backward(&pitches, &sets, &Inclusion)?;
    let (agreed, brackets) = disagreement_brackets(&fwd, &bwd);
    Ok(PitchAlignment { agreed, brackets })
}

/// Pairs recovered from the brackets of a pitch pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BracketPairs {
    /// Per-pitch pairings with equal counts on both sides.
    pub by_pitch: Vec<(usize, usize)>,
    /// Index interpolation between the bracket's anchors.
    pub interpolated: Vec<(usize, usize)>,
}

impl BracketPairs {
    pub fn all(&self) -> Vec<(usize, usize)> {
        let mut v = [self.by_pitch.as_slice(), self.interpolated.as_slice()].concat();
        v.sort();
        v
    }
}

/// Pairs the performance notes inside each bracket.
///
/// Per pitch, the bracket's performed notes are paired in order with the score occurrences of
/// that pitch inside the bracket when the counts agree. Chord notes may belong to an anchor onset,
/// so the lower anchor onset, the upper one, and then both are tried next. Occurrences already
/// taken by an agreed pair or an earlier bracket are not available. Every
/// other performed note is paired with the score onset obtained by linear interpolation between
/// the bracket's anchors.
pub fn resolve_brackets(pa: &PitchAlignment, score: &Score, perf: &Performance) -> BracketPairs {
    let notes = perf.notes();
    let onsets = score.onsets();
    let mut taken: std::collections::HashSet<(usize, PitchIndex)> = pa
        .agreed
        .iter()
        .filter(|&&(i, j)| onsets[j].pitch_set.contains(notes[i].pitch))
        .map(|&(i, j)| (j, notes[i].pitch))
        .collect();
    let mut out = BracketPairs::default();
    for br in &pa.brackets {
        let (i0, j0) = br.lower;
        let (i1, j1) = br.upper;
        let mut perf_by_pitch: HashMap<PitchIndex, Vec<usize>> = HashMap::new();
        for i in br.a.clone() {
            perf_by_pitch.entry(notes[i].pitch).or_default().push(i);
        }
        let mut pitches: Vec<_> = perf_by_pitch.into_iter().collect();
        pitches.sort();
        let mut unresolved = Vec::new();
        for (pitch, perf_idx) in pitches {
            let free = |j: usize| onsets[j].pitch_set.contains(pitch) && !taken.contains(&(j, pitch));
            let inner: Vec<usize> = br.b.clone().filter(|&j| free(j)).collect();
            let below = (j0 < br.b.start && free(j0)).then_some(j0);
            let above = (j1 >= br.b.end && j1 != j0 && free(j1)).then_some(j1);
            let widened = [(None, None), (below, None), (None, above), (below, above)]
                .into_iter()
                .map(|(lo, hi)| lo.into_iter().chain(inner.iter().copied()).chain(hi).collect::<Vec<_>>())
                .find(|idx| idx.len() == perf_idx.len());
            match widened {
                Some(score_idx) => {
                    taken.extend(score_idx.iter().map(|&j| (j, pitch)));
                    out.by_pitch.extend(perf_idx.into_iter().zip(score_idx));
                }
                None => unresolved.extend(perf_idx),
            }
        }
        let (lo, hi) = if br.b.is_empty() {
            (j0, j1)
        } else {
            (br.b.start, br.b.end - 1)
        };
        unresolved.sort();
        for i in unresolved {
            let t = (i - i0) as f64 / (i1 - i0) as f64;
            let j = (j0 as f64 + t * (j1 as f64 - j0 as f64)).round() as usize;
            out.interpolated.push((i, j.clamp(lo, hi)));
        }
    }
    out.by_pitch.sort();
    out
}

/// Builds the beat-to-seconds map from (performance index, score onset index) pairs.
///
/// Each paired onset contributes one anchor at the median time of its performed notes. Anchors
/// are taken in beat order and any anchor earlier in time than the last kept one is dropped.
pub fn build_time_map(
    pairs: &[(usize, usize)],
    score: &Score,
    perf: &Performance,
) -> Result<TimeMap, AlignError> {
    if pairs.is_empty() {
        return Err(AlignError::NoPairs);
    }
    let mut by_onset: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for &(i, j) in pairs {
        by_onset.entry(j).or_default().push(perf.notes()[i].onset_sec);
    }
    let mut anchors: Vec<(f64, f64)> = Vec::with_capacity(by_onset.len());
    for (j, mut secs) in by_onset {
        let sec = median(&mut secs);
        let beat = score.onsets()[j].beat;
        match anchors.last() {
            Some(&(_, last)) if sec < last => {}
            _ => anchors.push((beat, sec)),
        }
    }
    TimeMap::new(anchors)
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One-to-one (performance index, score onset index) links for a single pitch channel.
fn align_channel(
    channel: &PitchChannel,
    map: &TimeMap,
    cutoff_sec: f64,
) -> Result<Vec<(usize, usize)>, DtwError> {
    if channel.perf_onsets.is_empty() || channel.score_onsets.is_empty() {
        return Ok(Vec::new());
    }
    let perf_t: Vec<f64> = channel.perf_onsets.iter().map(|&(t, _)| t).collect();
    let score_t: Vec<f64> = channel.score_onsets.iter().map(|&(b, _)| map.eval(b)).collect();
    let (_, path) = dtw::dtw(&perf_t, &score_t, &L1)?;
    // distances compared in whole microseconds, equal ones in path order
    let mut links: Vec<(f64, i64, usize, usize, usize)> = path
        .pairs
        .iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            let d = (perf_t[i] - score_t[j]).abs();
            (d, (d * 1e6).round() as i64, k, i, j)
        })
        .collect();
    links.sort_by_key(|l| (l.1, l.2));
    let mut perf_used = vec![false; perf_t.len()];
    let mut score_used = vec![false; score_t.len()];
    let mut out = Vec::new();
    for (d, _, _, i, j) in links {
        if d > cutoff_sec || perf_used[i] || score_used[j] {
            continue;
        }
        perf_used[i] = true;
        score_used[j] = true;
        out.push((channel.perf_onsets[i].1, channel.score_onsets[j].1));
    }
    Ok(out)
}

/// Note-wise alignment by per-pitch warping of onset times under `map`.
pub fn onset_align(
    score: &Score,
    perf: &Performance,
    map: &TimeMap,
    cutoff_sec: f64,
) -> Result<NoteAlignment, AlignError> {
    let channels = pitch_channels(score, perf);
    let links: Vec<Vec<(usize, usize)>> = channels
        .par_iter()
        .map(|c| align_channel(c, map, cutoff_sec))
        .collect::<Result<_, _>>()?;
    let notes = perf.notes();
    let mut perf_match: Vec<Option<&str>> = vec![None; notes.len()];
    let mut matched_ids: std::collections::HashSet<&str> = Default::default();
    for (i, j) in links.into_iter().flatten() {
        let id = score.onsets()[j].note_ids[&notes[i].pitch][0].as_str();
        perf_match[i] = Some(id);
        matched_ids.insert(id);
    }
    let mut records: Vec<AlignmentRecord> = notes
        .iter()
        .zip(&perf_match)
        .map(|(n, m)| match m {
            Some(s) => AlignmentRecord::Match {
                perf_id: n.id.clone(),
                score_id: s.to_string(),
            },
            None => AlignmentRecord::Insertion {
                perf_id: n.id.clone(),
            },
        })
        .collect();
    records.extend(
        score
            .note_ids()
            .filter(|id| !matched_ids.contains(id))
            .map(|id| AlignmentRecord::Deletion {
                score_id: id.to_string(),
            }),
    );
    Ok(NoteAlignment { records })
}

/// Full offline pipeline: pitch pass, bracket cleanup, time map, onset pass.
pub fn align_offline(
    score: &Score,
    perf: &Performance,
    config: &OfflineConfig,
) -> Result<NoteAlignment, AlignError> {
    let pa = pitch_sequence_align(score, perf)?;
    let notes = perf.notes();
    let onsets = score.onsets();
    let mut pairs: Vec<(usize, usize)> = pa
        .agreed
        .iter()
        .copied()
        .filter(|&(i, j)| onsets[j].pitch_set.contains(notes[i].pitch))
        .collect();
    let resolved = resolve_brackets(&pa, score, perf);
    pairs.extend(&resolved.by_pitch);
    // interpolated guesses only fill onsets that nothing else anchors
    let anchored: std::collections::HashSet<usize> = pairs.iter().map(|&(_, j)| j).collect();
    pairs.extend(resolved.interpolated.iter().filter(|(_, j)| !anchored.contains(j)));
    if pairs.is_empty() {
        pairs = pa.agreed.clone();
    }
    let map = build_time_map(&pairs, score, perf)?;
    onset_align(score, perf, &map, config.cutoff_sec)
}
