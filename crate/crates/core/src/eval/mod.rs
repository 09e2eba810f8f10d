//! Alignment metrics, training-state sampling and synthetic performances.

mod states;
mod synth;

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::noteio::{NoteAlignment, NoteIoError, Performance, Score};
use crate::offline::{median, TimeMap};
use crate::online::FollowReport;
use crate::value_model::{ModelError, ValueFunction};

pub use states::{
    augment_pitch_shift, export_states, feasible_placements, import_states, sample_states,
    SampledState, StateRecord,
};
pub use synth::{generate_performance, random_score, GenParams, ScoreParams, TempoCurve};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("alignments cover different notes: {0}")]
    Universe(String),
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] NoteIoError),
    #[error("states file line {line}: {msg}")]
    States { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchFScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn universe(a: &NoteAlignment) -> (HashSet<&str>, HashSet<&str>) {
    (
        a.records.iter().filter_map(|r| r.perf_id()).collect(),
        a.records.iter().filter_map(|r| r.score_id()).collect(),
    )
}

/// Match-level precision, recall and F1. Insertion and deletion records are not scored.
/// Empty ratios count as zero.
pub fn fscore(pred: &NoteAlignment, truth: &NoteAlignment) -> Result<MatchFScore, EvalError> {
    let (pp, ps) = universe(pred);
    let (tp_, ts) = universe(truth);
    if pp != tp_ {
        return Err(EvalError::Universe("performance ids differ".into()));
    }
    if ps != ts {
        return Err(EvalError::Universe("score ids differ".into()));
    }
    let truth_pairs: HashSet<(&str, &str)> = truth.matches().collect();
    let pred_pairs: HashSet<(&str, &str)> = pred.matches().collect();
    let tp = pred_pairs.intersection(&truth_pairs).count();
    let fp = pred_pairs.len() - tp;
    let fn_ = truth_pairs.len() - tp;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MatchFScore { precision, recall, f, tp, fp, fn_ })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopK {
    pub top0: f64,
    pub top1: f64,
    pub top2: f64,
}

/// Rates at which the greedy slot lies within 0, 1 and 2 onsets of the target.
pub fn topk_hits<V: ValueFunction>(states: &[SampledState], value_fn: V) -> Result<TopK, EvalError> {
    if states.is_empty() {
        return Err(EvalError::Empty("no states"));
    }
    let mut hits = [0usize; 3];
    for s in states {
        let q = value_fn.values(&s.state)?;
        let slot = q.argmax().expect("sampled states have real slots");
        let d = slot.abs_diff(s.target_slot);
        for (k, h) in hits.iter_mut().enumerate() {
            if d <= k {
                *h += 1;
            }
        }
    }
    let n = states.len() as f64;
    Ok(TopK {
        top0: hits[0] as f64 / n,
        top1: hits[1] as f64 / n,
        top2: hits[2] as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsyncReport {
    pub median_ms: f64,
    pub pct_le_25: f64,
    pub pct_le_50: f64,
    pub pct_le_100: f64,
    /// Notes that entered the statistics.
    pub count: usize,
}

/// Performance time of every score onset under `truth`: the earliest matched note, or the
/// truth time map for onsets with no played note.
pub fn truth_onset_times(
    score: &Score,
    perf: &Performance,
    truth: &NoteAlignment,
) -> Result<Vec<f64>, EvalError> {
    let onset_of: HashMap<&str, usize> = score
        .onsets()
        .iter()
        .enumerate()
        .flat_map(|(j, o)| o.note_ids.values().flatten().map(move |id| (id.as_str(), j)))
        .collect();
    let sec_of: HashMap<&str, f64> = perf.notes().iter().map(|n| (n.id.as_str(), n.onset_sec)).collect();
    let mut first: Vec<Option<f64>> = vec![None; score.len()];
    for (p, s) in truth.matches() {
        let j = *onset_of.get(s).ok_or_else(|| EvalError::UnknownId(s.into()))?;
        let t = *sec_of.get(p).ok_or_else(|| EvalError::UnknownId(p.into()))?;
        first[j] = Some(first[j].map_or(t, |f: f64| f.min(t)));
    }
    let mut anchors: Vec<(f64, f64)> = Vec::new();
    for (j, t) in first.iter().enumerate() {
        if let Some(t) = *t {
            if anchors.last().map_or(true, |&(_, last)| t >= last) {
                anchors.push((score.onsets()[j].beat, t));
            }
        }
    }
    if anchors.is_empty() {
        return Err(EvalError::Empty("truth has no matches"));
    }
    let map = TimeMap::new(anchors).expect("anchors built monotone");
    Ok(first
        .iter()
        .zip(score.onsets())
        .map(|(t, o)| t.unwrap_or_else(|| map.eval(o.beat)))
        .collect())
}

/// `estimates` holds (performance note index, estimated score onset index) pairs.
pub fn asynchrony(
    estimates: &[(usize, usize)],
    score: &Score,
    perf: &Performance,
    truth: &NoteAlignment,
) -> Result<AsyncReport, EvalError> {
    if estimates.is_empty() {
        return Err(EvalError::Empty("no estimates"));
    }
    let times = truth_onset_times(score, perf, truth)?;
    let mut ms: Vec<f64> = estimates
        .iter()
        .map(|&(i, j)| 1000.0 * (perf.notes()[i].onset_sec - times[j]).abs())
        .collect();
    let n = ms.len() as f64;
    let pct = |lim: f64| 100.0 * ms.iter().filter(|&&v| v <= lim).count() as f64 / n;
    let (pct_le_25, pct_le_50, pct_le_100) = (pct(25.0), pct(50.0), pct(100.0));
    Ok(AsyncReport {
        median_ms: median(&mut ms),
        pct_le_25,
        pct_le_50,
        pct_le_100,
        count: estimates.len(),
    })
}

/// Positions from a follower run, without the notes it called insertions.
pub fn follow_estimates(reports: &[FollowReport]) -> Vec<(usize, usize)> {
    reports
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.inserted)
        .map(|(i, r)| (i, r.onset))
        .collect()
}
