use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::noteio::{write_atomic, NoteAlignment, NoteIoError, Performance, PitchIndex, PitchSet, Score};
use crate::value_model::{AgentState, CENTER_SLOT, PERF_SLOTS, SCORE_SLOTS};

/// A state together with the slot of its correct action.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledState {
    pub state: AgentState,
    pub target_slot: usize,
}

/// One line of a states file. Pitches are key indices `1..=88`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateRecord {
    pub perf_pitches: Vec<u8>,
    pub score_sets: Vec<Vec<u8>>,
    pub center: usize,
    pub target_slot: usize,
}

impl SampledState {
    pub fn to_record(&self) -> StateRecord {
        StateRecord {
            perf_pitches: self.state.perf_window().iter().map(|p| p.value()).collect(),
            score_sets: self
                .state
                .score_window()
                .iter()
                .map(|s| s.iter().map(|p| p.value()).collect())
                .collect(),
            center: self.state.center(),
            target_slot: self.target_slot,
        }
    }

    /// The window's absolute position is not part of a record; the state starts at onset 0.
    pub fn from_record(r: &StateRecord) -> Result<Self, String> {
        let pitch = |v: u8| PitchIndex::new(v).ok_or_else(|| format!("pitch {v} outside 1..=88"));
        let perf = r.perf_pitches.iter().map(|&v| pitch(v)).collect::<Result<Vec<_>, _>>()?;
        let sets = r
            .score_sets
            .iter()
            .map(|s| s.iter().map(|&v| pitch(v)).collect::<Result<PitchSet, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let state = AgentState::new(perf, sets, 0, r.center).map_err(|e| e.to_string())?;
        if !state.is_slot_real(r.target_slot) {
            return Err(format!("target_slot {} is padding", r.target_slot));
        }
        Ok(SampledState { state, target_slot: r.target_slot })
    }
}

/// Number of window placements that keep onset `o` of an `n`-onset score inside the window.
pub fn feasible_placements(o: usize, n: usize) -> usize {
    (0..SCORE_SLOTS)
        .filter(|&k| (o + CENTER_SLOT).checked_sub(k).is_some_and(|c| c < n))
        .count()
}

/// Every placement of every truly matched note's onset across the 16 slots.
///
/// The performance window ends at the matched note and reaches back up to 8 notes, insertions
/// included. For slot `k` the window is centered on onset `o + 7 - k`.
pub fn sample_states(
    score: &Score,
    perf: &Performance,
    truth: &NoteAlignment,
) -> Result<Vec<SampledState>, EvalError> {
    let onset_of: HashMap<&str, usize> = score
        .onsets()
        .iter()
        .enumerate()
        .flat_map(|(j, o)| o.note_ids.values().flatten().map(move |id| (id.as_str(), j)))
        .collect();
    let truth_onset: HashMap<&str, usize> = truth
        .matches()
        .map(|(p, s)| {
            onset_of
                .get(s)
                .map(|&j| (p, j))
                .ok_or_else(|| EvalError::UnknownId(s.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let pitches = perf.pitches();
    let mut out = Vec::new();
    for (i, note) in perf.notes().iter().enumerate() {
        let Some(&o) = truth_onset.get(note.id.as_str()) else {
            continue;
        };
        let window = &pitches[(i + 1).saturating_sub(PERF_SLOTS)..=i];
        for k in 0..SCORE_SLOTS {
            let Some(c) = (o + CENTER_SLOT).checked_sub(k).filter(|&c| c < score.len()) else {
                continue;
            };
            let state = AgentState::around(score, c, window)?;
            debug_assert_eq!(state.slot_onset(k), Some(o));
            out.push(SampledState { state, target_slot: k });
        }
    }
    Ok(out)
}

/// Transposes the whole state, clamping `shift` so that every pitch stays on the keyboard.
pub fn augment_pitch_shift(s: &SampledState, shift: i32) -> SampledState {
    let (lo, hi) = s.state.pitch_range();
    let shift = shift.clamp(
        PitchIndex::MIN as i32 - lo.value() as i32,
        PitchIndex::MAX as i32 - hi.value() as i32,
    );
    SampledState {
        state: s.state.shifted(shift).expect("shift clamped to keyboard"),
        target_slot: s.target_slot,
    }
}

pub fn export_states(states: &[SampledState], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut buf = Vec::new();
    for s in states {
        serde_json::to_writer(&mut buf, &s.to_record()).expect("records always serialize");
        buf.push(b'\n');
    }
    write_atomic(path.as_ref(), &buf)?;
    Ok(())
}

pub fn import_states(path: impl AsRef<Path>) -> Result<Vec<SampledState>, EvalError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| NoteIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| NoteIoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| EvalError::States { line: k + 1, msg };
        let rec: StateRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(SampledState::from_record(&rec).map_err(err)?);
    }
    Ok(out)
}
