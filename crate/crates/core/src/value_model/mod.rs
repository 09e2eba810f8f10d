//! Agent state, tokenization and per-action value estimates.
//!
//! A state pairs the most recent performed pitches (at most 8) with a window of score onsets
//! around the last predicted position: 7 onsets back, the position itself and 8 ahead. The window
//! is laid out so that the last predicted onset always sits in slot [`CENTER_SLOT`]; near the
//! piece boundaries the window is shorter and the missing slots are padding.
//!
//! Values are per-slot probabilities of the slot being the onset of the newest performed note.
//! They are independent per action and do not form a distribution.

mod network;
mod weights;

use thiserror::Error;

use crate::noteio::{PitchIndex, PitchSet, Score};

pub use network::{ModelConfig, PositionEncoding, ValueModel};
pub use weights::{load_weights, save_weights, SmawError, Tensor, ValueModelWeights};

pub const PERF_SLOTS: usize = 8;
pub const SCORE_SLOTS: usize = 16;
pub const PAST_ONSETS: usize = 7;
pub const FUTURE_ONSETS: usize = 8;
pub const CENTER_SLOT: usize = PAST_ONSETS;
/// Pitches kept per score slot.
pub const MAX_SET: usize = 7;
pub const SEQ_LEN: usize = PERF_SLOTS + 1 + SCORE_SLOTS + 1;
pub const DELIMITER_POS: usize = PERF_SLOTS;
pub const SCORE_OFFSET: usize = PERF_SLOTS + 1;
pub const END_POS: usize = SEQ_LEN - 1;

/// Token ids: pitches `1..=88` map to `0..=87`.
pub const NO_PITCH: u8 = 88;
pub const DELIMITER: u8 = 89;
pub const END: u8 = 90;
pub const VOCAB: usize = 91;

pub fn pitch_token(p: PitchIndex) -> u8 {
    p.value() - 1
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid agent state: {0}")]
    State(String),
    #[error(transparent)]
    Format(#[from] SmawError),
    #[error("weight shape error: {0}")]
    Shape(String),
    #[error("non-finite activation in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    perf_window: Vec<PitchIndex>,
    score_window: Vec<PitchSet>,
    first_onset: usize,
    center: usize,
}

impl AgentState {
    /// `first_onset` is the score-onset index of `score_window[0]`; `center` indexes the window.
    pub fn new(
        perf_window: Vec<PitchIndex>,
        score_window: Vec<PitchSet>,
        first_onset: usize,
        center: usize,
    ) -> Result<Self, ModelError> {
        if perf_window.is_empty() || perf_window.len() > PERF_SLOTS {
            return Err(ModelError::State(format!(
                "performance window length {} outside 1..={PERF_SLOTS}",
                perf_window.len()
            )));
        }
        if score_window.is_empty() || score_window.len() > SCORE_SLOTS {
            return Err(ModelError::State(format!(
                "score window length {} outside 1..={SCORE_SLOTS}",
                score_window.len()
            )));
        }
        if center >= score_window.len()
            || center > PAST_ONSETS
            || score_window.len() - 1 - center > FUTURE_ONSETS
        {
            return Err(ModelError::State(format!(
                "center {center} incompatible with window length {}",
                score_window.len()
            )));
        }
        if score_window.iter().any(PitchSet::is_empty) {
            return Err(ModelError::State("empty pitch set in score window".into()));
        }
        Ok(AgentState {
            perf_window,
            score_window,
            first_onset,
            center,
        })
    }

    /// Window of `score` around onset `center_onset` plus the last (up to 8) of `recent`.
    pub fn around(score: &Score, center_onset: usize, recent: &[PitchIndex]) -> Result<Self, ModelError> {
        if center_onset >= score.len() {
            return Err(ModelError::State(format!(
                "center onset {center_onset} beyond score of {} onsets",
                score.len()
            )));
        }
        let start = center_onset.saturating_sub(PAST_ONSETS);
        let end = (center_onset + FUTURE_ONSETS).min(score.len() - 1);
        let perf = recent[recent.len().saturating_sub(PERF_SLOTS)..].to_vec();
        AgentState::new(
            perf,
            score.onsets()[start..=end].iter().map(|o| o.pitch_set).collect(),
            start,
            center_onset - start,
        )
    }

    pub fn perf_window(&self) -> &[PitchIndex] {
        &self.perf_window
    }

    pub fn score_window(&self) -> &[PitchSet] {
        &self.score_window
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn first_onset(&self) -> usize {
        self.first_onset
    }

    /// Score-onset index of the last predicted position.
    pub fn center_onset(&self) -> usize {
        self.first_onset + self.center
    }

    /// Window index held by `slot`, `None` for padding.
    pub fn slot_window_index(&self, slot: usize) -> Option<usize> {
        let w = (slot + self.center).checked_sub(CENTER_SLOT)?;
        (slot < SCORE_SLOTS && w < self.score_window.len()).then_some(w)
    }

    pub fn slot_of_window_index(&self, w: usize) -> usize {
        w + CENTER_SLOT - self.center
    }

    /// Score-onset index held by `slot`.
    pub fn slot_onset(&self, slot: usize) -> Option<usize> {
        self.slot_window_index(slot).map(|w| self.first_onset + w)
    }

    pub fn slot_set(&self, slot: usize) -> Option<PitchSet> {
        self.slot_window_index(slot).map(|w| self.score_window[w])
    }

    pub fn is_slot_real(&self, slot: usize) -> bool {
        self.slot_window_index(slot).is_some()
    }

    /// Transposes every pitch; `None` if any pitch would leave the keyboard.
    pub fn shifted(&self, semitones: i32) -> Option<AgentState> {
        Some(AgentState {
            perf_window: self
                .perf_window
                .iter()
                .map(|p| p.shifted(semitones))
                .collect::<Option<_>>()?,
            score_window: self
                .score_window
                .iter()
                .map(|s| s.shifted(semitones))
                .collect::<Option<_>>()?,
            first_onset: self.first_onset,
            center: self.center,
        })
    }

    /// Lowest and highest pitch over both windows.
    pub fn pitch_range(&self) -> (PitchIndex, PitchIndex) {
        let all = self
            .perf_window
            .iter()
            .copied()
            .chain(self.score_window.iter().flat_map(|s| s.iter().collect::<Vec<_>>()));
        let (mut lo, mut hi) = (self.perf_window[0], self.perf_window[0]);
        for p in all {
            lo = lo.min(p);
            hi = hi.max(p);
        }
        (lo, hi)
    }
}

/// Fixed 26-slot layout: 8 performance slots, delimiter, 16 score slots, end.
///
/// Every slot holds up to [`MAX_SET`] token ids, unused entries filled with [`NO_PITCH`]. Only
/// score slots use more than the first entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: [[u8; MAX_SET]; SEQ_LEN],
    pub mask: [bool; SEQ_LEN],
}

impl TokenSeq {
    pub fn score_slot(&self, slot: usize) -> usize {
        SCORE_OFFSET + slot
    }
}

pub fn tokenize(state: &AgentState) -> TokenSeq {
    let mut tokens = [[NO_PITCH; MAX_SET]; SEQ_LEN];
    let mut mask = [false; SEQ_LEN];
    let pad = PERF_SLOTS - state.perf_window.len();
    for (k, p) in state.perf_window.iter().enumerate() {
        tokens[pad + k][0] = pitch_token(*p);
        mask[pad + k] = true;
    }
    tokens[DELIMITER_POS][0] = DELIMITER;
    mask[DELIMITER_POS] = true;
    for slot in 0..SCORE_SLOTS {
        if let Some(set) = state.slot_set(slot) {
            let pos = SCORE_OFFSET + slot;
            for (e, p) in set.iter().take(MAX_SET).enumerate() {
                tokens[pos][e] = pitch_token(p);
            }
            mask[pos] = true;
        }
    }
    tokens[END_POS][0] = END;
    mask[END_POS] = true;
    TokenSeq { tokens, mask }
}

/// Per-slot reward probabilities; padding slots hold `-inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionValues {
    pub q: [f64; SCORE_SLOTS],
}

impl ActionValues {
    pub const MASKED: f64 = f64::NEG_INFINITY;

    pub fn is_masked(&self, slot: usize) -> bool {
        self.q[slot] == Self::MASKED
    }

    /// Unmasked slots by decreasing value; ties go to the slot nearest the center, then the
    /// earlier slot.
    pub fn ranked(&self) -> Vec<usize> {
        let mut slots: Vec<usize> = (0..SCORE_SLOTS).filter(|&s| !self.is_masked(s)).collect();
        slots.sort_by(|&a, &b| {
            self.q[b]
                .total_cmp(&self.q[a])
                .then(a.abs_diff(CENTER_SLOT).cmp(&b.abs_diff(CENTER_SLOT)))
                .then(a.cmp(&b))
        });
        slots
    }

    /// Greedy action, `None` only when every slot is masked.
    pub fn argmax(&self) -> Option<usize> {
        self.ranked().first().copied()
    }
}

/// Anything that scores the 16 actions of a state.
pub trait ValueFunction {
    fn values(&self, state: &AgentState) -> Result<ActionValues, ModelError>;
}

impl<T: ValueFunction + ?Sized> ValueFunction for &T {
    fn values(&self, state: &AgentState) -> Result<ActionValues, ModelError> {
        (**self).values(state)
    }
}

impl<T: ValueFunction + ?Sized> ValueFunction for Box<T> {
    fn values(&self, state: &AgentState) -> Result<ActionValues, ModelError> {
        (**self).values(state)
    }
}

/// Adapts a plain function of the state.
pub struct FnValues<F>(pub F);

impl<F: Fn(&AgentState) -> ActionValues> ValueFunction for FnValues<F> {
    fn values(&self, state: &AgentState) -> Result<ActionValues, ModelError> {
        Ok((self.0)(state))
    }
}

/// Weight-free value function based on in-order pitch matching.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicValues;

impl ValueFunction for HeuristicValues {
    fn values(&self, state: &AgentState) -> Result<ActionValues, ModelError> {
        Ok(heuristic_values(state))
    }
}

/// Fraction of the performance window that can be matched, newest note first, onto a run of
/// adjacent slots ending at each slot.
///
/// The newest note must belong to the slot itself. Walking back through the window, each note
/// lands on the slot of the note after it or on the slot just before, must be a member of that
/// slot's set, and can take a given pitch of a slot only once. The longest matchable suffix is
/// divided by the window length.
pub fn heuristic_values(state: &AgentState) -> ActionValues {
    let mut q = [ActionValues::MASKED; SCORE_SLOTS];
    let perf = &state.perf_window;
    let sets = &state.score_window;
    let newest = *perf.last().expect("non-empty performance window");
    for (slot, value) in q.iter_mut().enumerate() {
        let Some(w) = state.slot_window_index(slot) else {
            continue;
        };
        if !sets[w].contains(newest) {
            *value = 0.0;
            continue;
        }
        let mut used = [PitchSet::EMPTY; SCORE_SLOTS];
        used[w].insert(newest);
        let matched = 1 + longest_run(&perf[..perf.len() - 1], sets, w, &mut used);
        *value = matched as f64 / perf.len() as f64;
    }
    ActionValues { q }
}

/// Longest suffix of `rest` that continues a chain currently at window index `cur`.
fn longest_run(rest: &[PitchIndex], sets: &[PitchSet], cur: usize, used: &mut [PitchSet]) -> usize {
    let Some((&p, earlier)) = rest.split_last() else {
        return 0;
    };
    let mut best = 0;
    for k in [Some(cur), cur.checked_sub(1)].into_iter().flatten() {
        if sets[k].contains(p) && !used[k].contains(p) {
            used[k].insert(p);
            best = best.max(1 + longest_run(earlier, sets, k, used));
            used[k].remove(p);
            if best == rest.len() {
                break;
            }
        }
    }
    best
}
