use std::collections::HashSet;

use proptest::prelude::*;

use symalign::eval::{fscore, generate_performance, random_score, GenParams, ScoreParams};
use symalign::noteio::{NoteAlignment, PerfNote, Performance, PitchIndex, Score};
use symalign::online::{estimate_tempo, run_follower, FollowerSession, MatchedOnset, OnlineConfig};
use symalign::value_model::{
    ActionValues, AgentState, FnValues, HeuristicValues, ModelConfig, ValueModel,
    ValueModelWeights, SCORE_SLOTS,
};

fn clean(seed: u64, onsets: usize) -> (Score, Performance, NoteAlignment) {
    let score = random_score(&ScoreParams { onsets, ..ScoreParams::default() }, seed);
    let (perf, truth) = generate_performance(&score, &GenParams { seed, ..GenParams::clean(120.0) });
    (score, perf, truth)
}

/// Score onset of every performed note under `truth`.
fn truth_onsets(score: &Score, perf: &Performance, truth: &NoteAlignment) -> Vec<Option<usize>> {
    let onset_of = |id: &str| score.onsets().iter().position(|o| o.note_ids.values().flatten().any(|s| s == id));
    perf.notes()
        .iter()
        .map(|n| truth.matches().find(|(p, _)| *p == n.id).and_then(|(_, s)| onset_of(s)))
        .collect()
}

#[test]
fn exact_playback_is_followed_exactly() {
    for seed in 0..8 {
        let (score, perf, truth) = clean(seed, 60);
        let oam = run_follower(&score, &perf, HeuristicValues, OnlineConfig::default()).unwrap();
        assert_eq!(fscore(&oam.alignment, &truth).unwrap().f, 1.0, "seed {seed}");
        assert_eq!(oam.alignment.deletions().count(), 0);
        let expected = truth_onsets(&score, &perf, &truth);
        for (cfg, name) in [(OnlineConfig::default(), "oam"), (OnlineConfig::greedy(), "gam")] {
            let run = run_follower(&score, &perf, HeuristicValues, cfg).unwrap();
            for (k, (r, e)) in run.reports.iter().zip(&expected).enumerate() {
                assert_eq!(Some(r.onset), *e, "{name} seed {seed} note {k}");
                assert_eq!(r.beat, score.onsets()[r.onset].beat);
            }
        }
    }
}

#[test]
fn empty_performance_deletes_everything() {
    let (score, _, _) = clean(1, 20);
    let run = run_follower(&score, &Performance::default(), HeuristicValues, OnlineConfig::default()).unwrap();
    assert_eq!(run.alignment.matches().count(), 0);
    assert_eq!(run.alignment.deletions().count(), score.note_count());
}

#[test]
fn one_omitted_note_becomes_the_only_deletion() {
    let (score, perf, truth) = clean(2, 40);
    let dropped = &perf.notes()[30];
    let kept: Vec<PerfNote> = perf.notes().iter().filter(|n| n.id != dropped.id).cloned().collect();
    let perf = Performance::new(kept).unwrap();
    let run = run_follower(&score, &perf, HeuristicValues, OnlineConfig::default()).unwrap();
    let want = truth.matches().find(|(p, _)| *p == dropped.id).unwrap().1;
    assert_eq!(run.alignment.deletions().collect::<Vec<_>>(), vec![want]);
}

#[test]
fn insertion_keeps_the_reported_position() {
    let (score, perf, _) = clean(3, 30);
    let used: HashSet<PitchIndex> = score.onsets().iter().flat_map(|o| o.pitch_set.iter()).collect();
    let stray = (1..=88).map(|v| PitchIndex::new(v).unwrap()).find(|p| !used.contains(p)).unwrap();
    let mut session = FollowerSession::new(&score, HeuristicValues, OnlineConfig::default()).unwrap();
    for n in &perf.notes()[..12] {
        session.follow(n).unwrap();
    }
    let before = session.current_onset();
    let t = perf.notes()[11].onset_sec + 0.05;
    let r = session.follow(&PerfNote { id: "x".into(), pitch: stray, onset_sec: t, velocity: 50 }).unwrap();
    assert!(r.inserted);
    assert_eq!(r.onset, before);
    assert_eq!(session.current_onset(), before);
}

#[test]
fn concurrent_sessions_share_one_model() {
    let model = ValueModel::from_weights(&ValueModelWeights::random(&ModelConfig::default(), 11), 8).unwrap();
    let pieces: Vec<_> = (0..4).map(|s| clean(s, 24)).collect();
    let sequential: Vec<_> = pieces
        .iter()
        .map(|(s, p, _)| run_follower(s, p, &model, OnlineConfig::default()).unwrap())
        .collect();
    let parallel: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = pieces
            .iter()
            .map(|(s, p, _)| scope.spawn(|| run_follower(s, p, &model, OnlineConfig::default()).unwrap()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(sequential, parallel);
}

#[test]
fn tempo_regression_matches_closed_form() {
    let beats = [0.0, 1.0, 2.0, 3.0, 4.0];
    let secs = [0.0, 0.6, 1.2, 1.9, 2.6];
    let matched: Vec<MatchedOnset> = beats
        .iter()
        .zip(secs)
        .enumerate()
        .map(|(k, (&beat, sec))| MatchedOnset { onset: k, beat, sec })
        .collect();
    let n = 5.0;
    let (sb, ss) = (beats.iter().sum::<f64>(), secs.iter().sum::<f64>());
    let sbs: f64 = beats.iter().zip(secs).map(|(b, s)| b * s).sum();
    let sbb: f64 = beats.iter().map(|b| b * b).sum();
    let slope = (n * sbs - sb * ss) / (n * sbb - sb * sb);
    let t = estimate_tempo(&matched, 0.5, (0.0, 0.0));
    assert!((t.beat_period - slope).abs() < 1e-12);
    assert_eq!(t.anchor, (4.0, 2.6));
}

/// Pseudo-random values hashed from the state.
fn scrambled(state: &AgentState) -> ActionValues {
    let mut h = (state.first_onset() as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ state.perf_window().len() as u64;
    for p in state.perf_window() {
        h = (h ^ p.value() as u64).wrapping_mul(0x1000_0000_01b3);
    }
    let mut q = [ActionValues::MASKED; SCORE_SLOTS];
    for (slot, v) in q.iter_mut().enumerate() {
        if state.is_slot_real(slot) {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = (h >> 11) as f64 / (1u64 << 53) as f64;
        }
    }
    ActionValues { q }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decisions_never_look_ahead(seed in 0u64..10_000, cut in 1usize..60, greedy: bool) {
        let score = random_score(&ScoreParams { onsets: 40, ..ScoreParams::default() }, seed);
        let params = GenParams { jitter_ms: 40.0, p_insert: 0.05, p_delete: 0.05, seed, ..GenParams::clean(100.0) };
        let (perf, _) = generate_performance(&score, &params);
        let cut = cut.min(perf.len());
        let prefix = Performance::new(perf.notes()[..cut].to_vec()).unwrap();
        let cfg = if greedy { OnlineConfig::greedy() } else { OnlineConfig::default() };
        let full = run_follower(&score, &perf, HeuristicValues, cfg.clone()).unwrap();
        let part = run_follower(&score, &prefix, HeuristicValues, cfg).unwrap();
        prop_assert_eq!(&full.reports[..cut], &part.reports[..]);
    }

    #[test]
    fn position_stays_inside_the_score(seed in 0u64..10_000, greedy: bool) {
        let score = random_score(&ScoreParams { onsets: 30, ..ScoreParams::default() }, seed);
        let params = GenParams { jitter_ms: 60.0, p_insert: 0.1, p_delete: 0.1, seed, ..GenParams::clean(100.0) };
        let (perf, _) = generate_performance(&score, &params);
        let cfg = if greedy { OnlineConfig::greedy() } else { OnlineConfig::default() };
        let run = run_follower(&score, &perf, FnValues(scrambled), cfg).unwrap();
        for r in &run.reports {
            prop_assert!(r.onset < score.len());
        }
        run.alignment.validate_against(&score, &perf).unwrap();
    }
}
