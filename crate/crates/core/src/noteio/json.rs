use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    NoteAlignment, NoteIoError, PerfNote, Performance, PitchIndex, PitchSet, Score, ScoreOnset,
};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreDoc {
    onsets: Vec<OnsetDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OnsetDoc {
    beat: f64,
    notes: Vec<ScoreNoteDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreNoteDoc {
    id: String,
    pitch: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PerformanceDoc {
    notes: Vec<PerfNoteDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PerfNoteDoc {
    id: String,
    pitch: i64,
    onset_sec: f64,
    velocity: i64,
}

fn read(path: &Path) -> Result<Vec<u8>, NoteIoError> {
    std::fs::read(path).map_err(|source| NoteIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), NoteIoError> {
    let io_err = |source| NoteIoError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.flush().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

fn midi_pitch(value: i64, field: impl Fn() -> String) -> Result<PitchIndex, NoteIoError> {
    u8::try_from(value)
        .ok()
        .and_then(PitchIndex::from_midi)
        .ok_or_else(|| NoteIoError::schema(field(), format!("MIDI pitch {value} outside 21..=108")))
}

pub(crate) fn score_from_json(bytes: &[u8]) -> Result<Score, NoteIoError> {
    let doc: ScoreDoc = serde_json::from_slice(bytes)?;
    let mut onsets = Vec::with_capacity(doc.onsets.len());
    for (i, o) in doc.onsets.into_iter().enumerate() {
        if o.notes.is_empty() {
            return Err(NoteIoError::schema(format!("onsets[{i}].notes"), "empty onset"));
        }
        let mut pitch_set = PitchSet::EMPTY;
        let mut note_ids: BTreeMap<PitchIndex, Vec<String>> = BTreeMap::new();
        for (k, n) in o.notes.into_iter().enumerate() {
            let pitch = midi_pitch(n.pitch, || format!("onsets[{i}].notes[{k}].pitch"))?;
            pitch_set.insert(pitch);
            note_ids.entry(pitch).or_default().push(n.id);
        }
        onsets.push(ScoreOnset {
            beat: o.beat,
            pitch_set,
            note_ids,
        });
    }
    Score::new(onsets)
}

pub(crate) fn score_to_json(score: &Score) -> Vec<u8> {
    let doc = ScoreDoc {
        onsets: score
            .onsets()
            .iter()
            .map(|o| OnsetDoc {
                beat: o.beat,
                notes: o
                    .note_ids
                    .iter()
                    .flat_map(|(p, ids)| {
                        ids.iter().map(move |id| ScoreNoteDoc {
                            id: id.clone(),
                            pitch: p.midi() as i64,
                        })
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_vec_pretty(&doc).expect("score serialization is infallible")
}

pub(crate) fn performance_from_json(bytes: &[u8]) -> Result<Performance, NoteIoError> {
    let doc: PerformanceDoc = serde_json::from_slice(bytes)?;
    let mut notes = Vec::with_capacity(doc.notes.len());
    for (i, n) in doc.notes.into_iter().enumerate() {
        let pitch = midi_pitch(n.pitch, || format!("notes[{i}].pitch"))?;
        let velocity = u8::try_from(n.velocity)
            .ok()
            .filter(|v| (1..=127).contains(v))
            .ok_or_else(|| {
                NoteIoError::schema(
                    format!("notes[{i}].velocity"),
                    format!("{} outside 1..=127", n.velocity),
                )
            })?;
        notes.push(PerfNote {
            id: n.id,
            pitch,
            onset_sec: n.onset_sec,
            velocity,
        });
    }
    Performance::new(notes)
}

pub(crate) fn performance_to_json(perf: &Performance) -> Vec<u8> {
    let doc = PerformanceDoc {
        notes: perf
            .notes()
            .iter()
            .map(|n| PerfNoteDoc {
                id: n.id.clone(),
                pitch: n.pitch.midi() as i64,
                onset_sec: n.onset_sec,
                velocity: n.velocity as i64,
            })
            .collect(),
    };
    serde_json::to_vec_pretty(&doc).expect("performance serialization is infallible")
}

pub(crate) fn alignment_from_json(bytes: &[u8]) -> Result<NoteAlignment, NoteIoError> {
    let a: NoteAlignment = serde_json::from_slice(bytes)?;
    a.validate()?;
    Ok(a)
}

pub(crate) fn alignment_to_json(a: &NoteAlignment) -> Vec<u8> {
    serde_json::to_vec_pretty(a).expect("alignment serialization is infallible")
}

pub fn load_score_json(path: impl AsRef<Path>) -> Result<Score, NoteIoError> {
    score_from_json(&read(path.as_ref())?)
}

pub fn save_score_json(score: &Score, path: impl AsRef<Path>) -> Result<(), NoteIoError> {
    write_atomic(path.as_ref(), &score_to_json(score))
}

pub fn load_performance_json(path: impl AsRef<Path>) -> Result<Performance, NoteIoError> {
    performance_from_json(&read(path.as_ref())?)
}

pub fn save_performance_json(perf: &Performance, path: impl AsRef<Path>) -> Result<(), NoteIoError> {
    write_atomic(path.as_ref(), &performance_to_json(perf))
}

pub fn load_alignment_json(path: impl AsRef<Path>) -> Result<NoteAlignment, NoteIoError> {
    alignment_from_json(&read(path.as_ref())?)
}

pub fn save_alignment_json(a: &NoteAlignment, path: impl AsRef<Path>) -> Result<(), NoteIoError> {
    write_atomic(path.as_ref(), &alignment_to_json(a))
}
