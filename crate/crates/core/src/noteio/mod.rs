//! Data model for scores, performances and note alignments, plus file import/export.
//!
//! Pitches are stored as piano-key indices (`1..=88`, MIDI pitch minus 20). A score is a
//! sequence of onsets, each holding the set of pitches that start at that beat together with
//! the identifiers of the notated notes behind every pitch.

mod json;
mod midi;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use json::{
    load_alignment_json, load_performance_json, load_score_json, save_alignment_json,
    save_performance_json, save_score_json, write_atomic,
};
pub use midi::{load_performance_midi, parse_performance_midi, MidiImport};

#[derive(Debug, Error)]
pub enum NoteIoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema violation at {field}: {msg}")]
    Schema { field: String, msg: String },
    #[error("MIDI parse error at byte offset {offset}: {msg}")]
    Midi { offset: usize, msg: String },
    #[error("invalid alignment: {0}")]
    Alignment(String),
}

impl NoteIoError {
    pub(crate) fn schema(field: impl Into<String>, msg: impl Into<String>) -> Self {
        NoteIoError::Schema {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

/// Piano key index in `1..=88`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PitchIndex(u8);

impl PitchIndex {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 88;

    pub fn new(value: u8) -> Option<Self> {
        (Self::MIN..=Self::MAX).contains(&value).then_some(PitchIndex(value))
    }

    /// Maps a MIDI pitch (21..=108) onto the piano key range.
    pub fn from_midi(midi: u8) -> Option<Self> {
        midi.checked_sub(20).and_then(Self::new)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn midi(self) -> u8 {
        self.0 + 20
    }

    /// Transposes by `semitones`, `None` when the result leaves the keyboard.
    pub fn shifted(self, semitones: i32) -> Option<Self> {
        let v = self.0 as i32 + semitones;
        u8::try_from(v).ok().and_then(Self::new)
    }
}

impl TryFrom<u8> for PitchIndex {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        PitchIndex::new(value).ok_or_else(|| format!("pitch index {value} outside 1..=88"))
    }
}

impl From<PitchIndex> for u8 {
    fn from(p: PitchIndex) -> u8 {
        p.0
    }
}

impl fmt::Display for PitchIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A non-ordered set of piano keys, stored as an 88-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PitchSet(u128);

impl PitchSet {
    pub const EMPTY: PitchSet = PitchSet(0);

    pub fn insert(&mut self, p: PitchIndex) {
        self.0 |= 1u128 << p.0;
    }

    pub fn remove(&mut self, p: PitchIndex) {
        self.0 &= !(1u128 << p.0);
    }

    #[inline]
    pub fn contains(&self, p: PitchIndex) -> bool {
        self.0 & (1u128 << p.0) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// Members in ascending pitch order.
    pub fn iter(&self) -> impl Iterator<Item = PitchIndex> + '_ {
        (PitchIndex::MIN..=PitchIndex::MAX)
            .filter(move |&v| self.0 & (1u128 << v) != 0)
            .map(PitchIndex)
    }

    /// Transposes every member; `None` if any member leaves the keyboard.
    pub fn shifted(&self, semitones: i32) -> Option<PitchSet> {
        self.iter()
            .map(|p| p.shifted(semitones))
            .collect::<Option<PitchSet>>()
    }

    pub fn min(&self) -> Option<PitchIndex> {
        self.iter().next()
    }

    pub fn max(&self) -> Option<PitchIndex> {
        self.iter().last()
    }
}

impl FromIterator<PitchIndex> for PitchSet {
    fn from_iter<I: IntoIterator<Item = PitchIndex>>(iter: I) -> Self {
        let mut s = PitchSet::EMPTY;
        for p in iter {
            s.insert(p);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerfNote {
    pub id: String,
    pub pitch: PitchIndex,
    pub onset_sec: f64,
    /// Carried through import/export, never consulted by the aligners.
    pub velocity: u8,
}

/// Performed notes ordered by onset, ties broken by pitch then id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Performance {
    notes: Vec<PerfNote>,
}

fn perf_order(a: &PerfNote, b: &PerfNote) -> std::cmp::Ordering {
    a.onset_sec
        .total_cmp(&b.onset_sec)
        .then(a.pitch.cmp(&b.pitch))
        .then_with(|| a.id.cmp(&b.id))
}

impl Performance {
    /// Sorts `notes` into canonical order and checks id uniqueness.
    pub fn new(mut notes: Vec<PerfNote>) -> Result<Self, NoteIoError> {
        let mut seen = HashSet::new();
        for (i, n) in notes.iter().enumerate() {
            if !n.onset_sec.is_finite() || n.onset_sec < 0.0 {
                return Err(NoteIoError::schema(
                    format!("notes[{i}].onset_sec"),
                    format!("{} is not a finite non-negative time", n.onset_sec),
                ));
            }
            if !seen.insert(n.id.as_str()) {
                return Err(NoteIoError::schema(
                    format!("notes[{i}].id"),
                    format!("duplicate id {:?}", n.id),
                ));
            }
        }
        notes.sort_by(perf_order);
        Ok(Performance { notes })
    }

    pub fn notes(&self) -> &[PerfNote] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn pitches(&self) -> Vec<PitchIndex> {
        self.notes.iter().map(|n| n.pitch).collect()
    }

    /// Returns a copy with every onset mapped through `f` (re-sorted).
    pub fn map_onsets(&self, f: impl Fn(f64) -> f64) -> Result<Self, NoteIoError> {
        Performance::new(
            self.notes
                .iter()
                .map(|n| PerfNote {
                    onset_sec: f(n.onset_sec),
                    ..n.clone()
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOnset {
    pub beat: f64,
    pub pitch_set: PitchSet,
    /// Score-note ids per pitch, in notation order.
    pub note_ids: BTreeMap<PitchIndex, Vec<String>>,
}

impl ScoreOnset {
    pub fn note_count(&self) -> usize {
        self.note_ids.values().map(Vec::len).sum()
    }
}

/// Score onsets strictly increasing in beat.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Score {
    onsets: Vec<ScoreOnset>,
}

impl Score {
    /// Validates beat monotonicity, non-empty pitch sets and id uniqueness.
    pub fn new(onsets: Vec<ScoreOnset>) -> Result<Self, NoteIoError> {
        let mut seen = HashSet::new();
        for (i, o) in onsets.iter().enumerate() {
            if !o.beat.is_finite() {
                return Err(NoteIoError::schema(
                    format!("onsets[{i}].beat"),
                    "beat must be finite",
                ));
            }
            if i > 0 && o.beat <= onsets[i - 1].beat {
                return Err(NoteIoError::schema(
                    format!("onsets[{i}].beat"),
                    format!(
                        "beat {} does not strictly follow {}",
                        o.beat,
                        onsets[i - 1].beat
                    ),
                ));
            }
            if o.pitch_set.is_empty() {
                return Err(NoteIoError::schema(
                    format!("onsets[{i}].notes"),
                    "onset has no notes",
                ));
            }
            for (p, ids) in &o.note_ids {
                if !o.pitch_set.contains(*p) || ids.is_empty() {
                    return Err(NoteIoError::schema(
                        format!("onsets[{i}].notes"),
                        format!("note ids for pitch {p} inconsistent with the pitch set"),
                    ));
                }
                for id in ids {
                    if !seen.insert(id.clone()) {
                        return Err(NoteIoError::schema(
                            format!("onsets[{i}].notes"),
                            format!("duplicate score note id {id:?}"),
                        ));
                    }
                }
            }
            if o.pitch_set.iter().any(|p| !o.note_ids.contains_key(&p)) {
                return Err(NoteIoError::schema(
                    format!("onsets[{i}].notes"),
                    "pitch without note id",
                ));
            }
        }
        Ok(Score { onsets })
    }

    pub fn onsets(&self) -> &[ScoreOnset] {
        &self.onsets
    }

    pub fn len(&self) -> usize {
        self.onsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onsets.is_empty()
    }

    pub fn pitch_sets(&self) -> Vec<PitchSet> {
        self.onsets.iter().map(|o| o.pitch_set).collect()
    }

    pub fn note_count(&self) -> usize {
        self.onsets.iter().map(ScoreOnset::note_count).sum()
    }

    /// All score-note ids in onset order, pitch order within an onset.
    pub fn note_ids(&self) -> impl Iterator<Item = &str> {
        self.onsets
            .iter()
            .flat_map(|o| o.note_ids.values().flatten().map(String::as_str))
    }
}

/// A notated note prior to grouping into onsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNote {
    pub id: String,
    pub pitch: PitchIndex,
    pub onset_beat: f64,
    pub duration_beat: f64,
}

/// Groups notes sharing an onset beat into one score onset.
///
/// Notes with a non-finite beat are skipped. Duplicate pitches at one beat collapse into a single
/// set member but keep all their ids. Assumes ids are unique.
pub fn score_from_notes(notes: &[ScoreNote]) -> Score {
    let mut sorted: Vec<&ScoreNote> = notes.iter().filter(|n| n.onset_beat.is_finite()).collect();
    sorted.sort_by(|a, b| a.onset_beat.total_cmp(&b.onset_beat));
    let mut onsets: Vec<ScoreOnset> = Vec::new();
    for n in sorted {
        match onsets.last_mut() {
            Some(o) if o.beat == n.onset_beat => {
                o.pitch_set.insert(n.pitch);
                o.note_ids.entry(n.pitch).or_default().push(n.id.clone());
            }
            _ => {
                let mut pitch_set = PitchSet::EMPTY;
                pitch_set.insert(n.pitch);
                onsets.push(ScoreOnset {
                    beat: n.onset_beat,
                    pitch_set,
                    note_ids: BTreeMap::from([(n.pitch, vec![n.id.clone()])]),
                });
            }
        }
    }
    Score { onsets }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AlignmentRecord {
    Match { perf_id: String, score_id: String },
    Insertion { perf_id: String },
    Deletion { score_id: String },
}

impl AlignmentRecord {
    pub fn perf_id(&self) -> Option<&str> {
        match self {
            AlignmentRecord::Match { perf_id, .. } | AlignmentRecord::Insertion { perf_id } => {
                Some(perf_id)
            }
            AlignmentRecord::Deletion { .. } => None,
        }
    }

    pub fn score_id(&self) -> Option<&str> {
        match self {
            AlignmentRecord::Match { score_id, .. } | AlignmentRecord::Deletion { score_id } => {
                Some(score_id)
            }
            AlignmentRecord::Insertion { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NoteAlignment {
    pub records: Vec<AlignmentRecord>,
}

impl NoteAlignment {
    pub fn matches(&self) -> impl Iterator<Item = (&str, &str)> {
        self.records.iter().filter_map(|r| match r {
            AlignmentRecord::Match { perf_id, score_id } => {
                Some((perf_id.as_str(), score_id.as_str()))
            }
            _ => None,
        })
    }

    pub fn insertions(&self) -> impl Iterator<Item = &str> {
        self.records.iter().filter_map(|r| match r {
            AlignmentRecord::Insertion { perf_id } => Some(perf_id.as_str()),
            _ => None,
        })
    }

    pub fn deletions(&self) -> impl Iterator<Item = &str> {
        self.records.iter().filter_map(|r| match r {
            AlignmentRecord::Deletion { score_id } => Some(score_id.as_str()),
            _ => None,
        })
    }

    /// Every perf id and every score id appears in at most one record.
    pub fn validate(&self) -> Result<(), NoteIoError> {
        let mut perf = HashSet::new();
        let mut score = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if let Some(p) = r.perf_id() {
                if !perf.insert(p) {
                    return Err(NoteIoError::Alignment(format!(
                        "records[{i}]: perf_id {p:?} already aligned"
                    )));
                }
            }
            if let Some(s) = r.score_id() {
                if !score.insert(s) {
                    return Err(NoteIoError::Alignment(format!(
                        "records[{i}]: score_id {s:?} already aligned"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `validate` plus full coverage: every note of `perf` and `score` appears exactly once.
    pub fn validate_against(&self, score: &Score, perf: &Performance) -> Result<(), NoteIoError> {
        self.validate()?;
        let perf_ids: HashSet<&str> = self.records.iter().filter_map(|r| r.perf_id()).collect();
        let score_ids: HashSet<&str> = self.records.iter().filter_map(|r| r.score_id()).collect();
        let expected_perf: HashSet<&str> = perf.notes().iter().map(|n| n.id.as_str()).collect();
        let expected_score: HashSet<&str> = score.note_ids().collect();
        if perf_ids != expected_perf {
            let missing = expected_perf.difference(&perf_ids).next();
            let extra = perf_ids.difference(&expected_perf).next();
            return Err(NoteIoError::Alignment(format!(
                "performance coverage mismatch (missing {missing:?}, unknown {extra:?})"
            )));
        }
        if score_ids != expected_score {
            let missing = expected_score.difference(&score_ids).next();
            let extra = score_ids.difference(&expected_score).next();
            return Err(NoteIoError::Alignment(format!(
                "score coverage mismatch (missing {missing:?}, unknown {extra:?})"
            )));
        }
        Ok(())
    }
}
