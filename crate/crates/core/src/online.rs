//! Note-by-note score following.
//!
//! Two policies share one session type. The greedy policy jumps to the highest-valued slot of
//! every state. The candidate policy first consumes notes that the current onset still expects,
//! otherwise ranks the top slots by value, keeps those whose onset contains the pitch, and picks
//! the one whose tempo-extrapolated time is closest to the note. Notes that fit no candidate, or
//! whose closest candidate has already consumed the pitch, are insertions and leave the position
//! where it was.

use std::collections::{BTreeMap, VecDeque};

use crate::noteio::{AlignmentRecord, NoteAlignment, PerfNote, Performance, PitchIndex, Score};
use crate::value_model::{AgentState, ModelError, ValueFunction};

pub const DEFAULT_CANDIDATES: usize = 3;
pub const DEFAULT_PERIOD: f64 = 0.5;
pub const MIN_PERIOD: f64 = 0.05;
pub const MAX_PERIOD: f64 = 5.0;
/// Distinct beats used for the tempo fit.
pub const TEMPO_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Greedy,
    Candidates,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineConfig {
    pub policy: Policy,
    pub candidates: usize,
    pub default_period: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            policy: Policy::Candidates,
            candidates: DEFAULT_CANDIDATES,
            default_period: DEFAULT_PERIOD,
        }
    }
}

impl OnlineConfig {
    pub fn greedy() -> Self {
        OnlineConfig { policy: Policy::Greedy, ..Default::default() }
    }
}

/// A performed note attached to a score onset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedOnset {
    pub onset: usize,
    pub beat: f64,
    pub sec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempoEstimate {
    /// Seconds per beat.
    pub beat_period: f64,
    /// (beat, sec)
    pub anchor: (f64, f64),
}

impl TempoEstimate {
    pub fn predict(&self, beat: f64) -> f64 {
        self.anchor.1 + self.beat_period * (beat - self.anchor.0)
    }
}

/// Local tempo from the most recent matches.
///
/// Matches at one beat are averaged; the slope of seconds over beats is fitted by least squares
/// on the last [`TEMPO_WINDOW`] distinct beats and clamped to `[MIN_PERIOD, MAX_PERIOD]`. With
/// fewer than two distinct beats the period is `default`. The anchor is the last match, or
/// `cold_anchor` when there is none.
pub fn estimate_tempo(matched: &[MatchedOnset], default: f64, cold_anchor: (f64, f64)) -> TempoEstimate {
    let anchor = matched.last().map_or(cold_anchor, |m| (m.beat, m.sec));
    // (beat, sum of secs, count)
    let mut groups: Vec<(f64, f64, usize)> = Vec::with_capacity(TEMPO_WINDOW);
    for m in matched.iter().rev() {
        if let Some(g) = groups.iter_mut().find(|g| g.0 == m.beat) {
            g.1 += m.sec;
            g.2 += 1;
        } else if groups.len() == TEMPO_WINDOW {
            break;
        } else {
            groups.push((m.beat, m.sec, 1));
        }
    }
    if groups.len() < 2 {
        return TempoEstimate { beat_period: default, anchor };
    }
    let n = groups.len() as f64;
    let pts: Vec<(f64, f64)> = groups.iter().map(|&(b, s, c)| (b, s / c as f64)).collect();
    let mb = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ms = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|&(b, s)| (b - mb) * (s - ms)).sum();
    let sxx: f64 = pts.iter().map(|&(b, _)| (b - mb) * (b - mb)).sum();
    TempoEstimate {
        beat_period: (sxy / sxx).clamp(MIN_PERIOD, MAX_PERIOD),
        anchor,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Match { onset: usize, score_id: String },
    Insertion,
}

/// Position reported after each note.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowReport {
    pub onset: usize,
    pub beat: f64,
    /// Performance time at which the reported onset is expected.
    pub est_sec: f64,
    pub inserted: bool,
}

pub struct FollowerSession<'a, V> {
    score: &'a Score,
    value_fn: V,
    config: OnlineConfig,
    current: usize,
    history: Vec<PitchIndex>,
    remaining: Vec<BTreeMap<PitchIndex, VecDeque<String>>>,
    matched: Vec<MatchedOnset>,
    records: Vec<AlignmentRecord>,
    first_sec: Option<f64>,
}

impl<'a, V: ValueFunction> FollowerSession<'a, V> {
    /// Fails only on an empty score.
    pub fn new(score: &'a Score, value_fn: V, config: OnlineConfig) -> Option<Self> {
        if score.is_empty() {
            return None;
        }
        let remaining = score
            .onsets()
            .iter()
            .map(|o| {
                o.note_ids
                    .iter()
                    .map(|(p, ids)| (*p, ids.iter().cloned().collect()))
                    .collect()
            })
            .collect();
        Some(FollowerSession {
            score,
            value_fn,
            config,
            current: 0,
            history: Vec::new(),
            remaining,
            matched: Vec::new(),
            records: Vec::new(),
            first_sec: None,
        })
    }

    pub fn current_onset(&self) -> usize {
        self.current
    }

    pub fn matched(&self) -> &[MatchedOnset] {
        &self.matched
    }

    pub fn config(&self) -> &OnlineConfig {
        &self.config
    }

    pub fn tempo(&self) -> TempoEstimate {
        let cold = (self.score.onsets()[0].beat, self.first_sec.unwrap_or(0.0));
        estimate_tempo(&self.matched, self.config.default_period, cold)
    }

    fn state_with(&self, pitch: PitchIndex) -> Result<AgentState, ModelError> {
        let mut recent = self.history[self.history.len().saturating_sub(7)..].to_vec();
        recent.push(pitch);
        AgentState::around(self.score, self.current, &recent)
    }

    fn take_id(&mut self, onset: usize, pitch: PitchIndex) -> Option<String> {
        self.remaining[onset].get_mut(&pitch)?.pop_front()
    }

    fn has_id(&self, onset: usize, pitch: PitchIndex) -> bool {
        self.remaining[onset].get(&pitch).is_some_and(|q| !q.is_empty())
    }

    fn record(&mut self, note: &PerfNote, onset: Option<usize>) -> Decision {
        let id = onset.and_then(|o| self.take_id(o, note.pitch));
        match (onset, id) {
            (Some(onset), Some(score_id)) => {
                self.matched.push(MatchedOnset {
                    onset,
                    beat: self.score.onsets()[onset].beat,
                    sec: note.onset_sec,
                });
                self.records.push(AlignmentRecord::Match {
                    perf_id: note.id.clone(),
                    score_id: score_id.clone(),
                });
                Decision::Match { onset, score_id }
            }
            _ => {
                self.records.push(AlignmentRecord::Insertion { perf_id: note.id.clone() });
                Decision::Insertion
            }
        }
    }

    /// Moves to the argmax slot of the state ending in `note`. The note is matched there if the
    /// onset still holds an unplayed id of its pitch, otherwise recorded as an insertion.
    pub fn gam_step(&mut self, note: &PerfNote) -> Result<usize, ModelError> {
        self.first_sec.get_or_insert(note.onset_sec);
        let state = self.state_with(note.pitch)?;
        let q = self.value_fn.values(&state)?;
        let slot = q.argmax().expect("the center slot is always real");
        self.current = state.slot_onset(slot).expect("argmax is unmasked");
        self.history.push(note.pitch);
        self.record(note, Some(self.current));
        Ok(self.current)
    }

    pub fn oam_step(&mut self, note: &PerfNote) -> Result<Decision, ModelError> {
        self.first_sec.get_or_insert(note.onset_sec);
        if self.has_id(self.current, note.pitch) {
            self.history.push(note.pitch);
            return Ok(self.record(note, Some(self.current)));
        }
        let state = self.state_with(note.pitch)?;
        let q = self.value_fn.values(&state)?;
        let candidates: Vec<usize> = q
            .ranked()
            .into_iter()
            .take(self.config.candidates)
            .filter_map(|slot| state.slot_onset(slot))
            .filter(|&o| self.score.onsets()[o].pitch_set.contains(note.pitch))
            .collect();
        if candidates.is_empty() {
            return Ok(self.record(note, None));
        }
        let tempo = self.tempo();
        let mut best = candidates[0];
        let mut best_gap = f64::INFINITY;
        // candidates arrive by decreasing value, so strict improvement keeps the higher value on ties
        for &o in &candidates {
            let gap = (note.onset_sec - tempo.predict(self.score.onsets()[o].beat)).abs();
            if gap < best_gap {
                best = o;
                best_gap = gap;
            }
        }
        self.history.push(note.pitch);
        if !self.has_id(best, note.pitch) {
            // the closest onset already heard this pitch: a repeated or extra note
            return Ok(self.record(note, None));
        }
        self.current = best;
        Ok(self.record(note, Some(best)))
    }

    /// Runs the configured policy on one note.
    pub fn follow(&mut self, note: &PerfNote) -> Result<FollowReport, ModelError> {
        let inserted = match self.config.policy {
            Policy::Greedy => {
                self.gam_step(note)?;
                false
            }
            Policy::Candidates => self.oam_step(note)? == Decision::Insertion,
        };
        let beat = self.score.onsets()[self.current].beat;
        Ok(FollowReport {
            onset: self.current,
            beat,
            est_sec: self.tempo().predict(beat),
            inserted,
        })
    }

    /// Emitted records followed by a deletion for every score note never consumed.
    pub fn finalize(self) -> NoteAlignment {
        let mut records = self.records;
        for onset in self.remaining {
            for (_, ids) in onset {
                records.extend(ids.into_iter().map(|score_id| AlignmentRecord::Deletion { score_id }));
            }
        }
        NoteAlignment { records }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FollowRun {
    pub alignment: NoteAlignment,
    /// One report per performed note, in performance order.
    pub reports: Vec<FollowReport>,
}

/// Feeds a whole performance through a fresh session.
pub fn run_follower<V: ValueFunction>(
    score: &Score,
    perf: &Performance,
    value_fn: V,
    config: OnlineConfig,
) -> Result<FollowRun, ModelError> {
    let mut session = FollowerSession::new(score, value_fn, config)
        .ok_or_else(|| ModelError::State("empty score".into()))?;
    let reports = perf
        .notes()
        .iter()
        .map(|n| session.follow(n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FollowRun { alignment: session.finalize(), reports })
}
