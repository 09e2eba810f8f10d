use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::noteio::{
    score_from_notes, AlignmentRecord, NoteAlignment, PerfNote, Performance, PitchIndex, Score,
    ScoreNote,
};

/// Tempo in BPM, piecewise linear over beats and constant beyond the outer points.
#[derive(Debug, Clone, PartialEq)]
pub struct TempoCurve {
    points: Vec<(f64, f64)>,
}

impl TempoCurve {
    pub fn constant(bpm: f64) -> Self {
        TempoCurve { points: vec![(0.0, bpm)] }
    }

    /// `points` are (beat, bpm); panics unless beats strictly increase and tempi are positive.
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        assert!(!points.is_empty(), "tempo curve needs a point");
        assert!(points.iter().all(|&(b, t)| b.is_finite() && t.is_finite() && t > 0.0));
        assert!(points.windows(2).all(|w| w[1].0 > w[0].0));
        TempoCurve { points }
    }

    /// Smooth drift around `base` with a breakpoint every 4 to 16 beats.
    pub fn random(rng: &mut impl Rng, base: f64, spread: f64, last_beat: f64) -> Self {
        let mut points = vec![(0.0, base * rng.gen_range(1.0 - spread..=1.0 + spread))];
        let mut b = 0.0;
        while b < last_beat {
            b += rng.gen_range(4.0..16.0);
            points.push((b, base * rng.gen_range(1.0 - spread..=1.0 + spread)));
        }
        TempoCurve::new(points)
    }

    pub fn bpm_at(&self, beat: f64) -> f64 {
        let p = &self.points;
        let k = p.partition_point(|&(b, _)| b <= beat);
        if k == 0 {
            return p[0].1;
        }
        if k == p.len() {
            return p[k - 1].1;
        }
        let ((b0, t0), (b1, t1)) = (p[k - 1], p[k]);
        t0 + (t1 - t0) * (beat - b0) / (b1 - b0)
    }

    /// Seconds elapsed from the first point's beat to `beat` (negative before it).
    fn from_first(&self, beat: f64) -> f64 {
        let p = &self.points;
        let (first_beat, first_bpm) = p[0];
        if beat <= first_beat {
            return (beat - first_beat) * 60.0 / first_bpm;
        }
        let mut sec = 0.0;
        for w in p.windows(2) {
            let ((b0, t0), (b1, _)) = (w[0], w[1]);
            if beat <= b0 {
                break;
            }
            let end = beat.min(b1);
            sec += segment_seconds(b0, t0, end, self.bpm_at(end));
        }
        let (last_beat, last_bpm) = p[p.len() - 1];
        if beat > last_beat {
            sec += (beat - last_beat) * 60.0 / last_bpm;
        }
        sec
    }

    /// Seconds from beat 0 to `beat`.
    pub fn seconds_at(&self, beat: f64) -> f64 {
        self.from_first(beat) - self.from_first(0.0)
    }
}

/// ∫ 60 / bpm(b) db over a segment where bpm moves linearly from `t0` to `t1`.
fn segment_seconds(b0: f64, t0: f64, b1: f64, t1: f64) -> f64 {
    let len = b1 - b0;
    if len <= 0.0 {
        return 0.0;
    }
    if (t1 - t0).abs() <= 1e-12 * t0 {
        return len * 60.0 / t0;
    }
    let slope = (t1 - t0) / len;
    60.0 / slope * (t1 / t0).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub tempo: TempoCurve,
    /// Standard deviation of the per-onset timing offset.
    pub jitter_ms: f64,
    pub p_insert: f64,
    pub p_delete: f64,
    /// Standard deviation of the per-note offset inside chords.
    pub chord_spread_ms: f64,
    pub seed: u64,
}

impl GenParams {
    pub fn clean(bpm: f64) -> Self {
        GenParams {
            tempo: TempoCurve::constant(bpm),
            jitter_ms: 0.0,
            p_insert: 0.0,
            p_delete: 0.0,
            chord_spread_ms: 0.0,
            seed: 0,
        }
    }
}

fn normal(sigma_ms: f64) -> Normal<f64> {
    Normal::new(0.0, sigma_ms.max(0.0) / 1000.0).expect("finite sigma")
}

/// Renders a performance of `score` and the alignment that produced it.
///
/// Each score note is dropped with probability `p_delete`; of several ids on one pitch and onset
/// only the first surviving one is played. After every played note an unscored note near its
/// pitch follows with probability `p_insert`. Performance ids `n0, n1, …` follow playing order.
pub fn generate_performance(score: &Score, params: &GenParams) -> (Performance, NoteAlignment) {
    assert!((0.0..1.0).contains(&params.p_insert) || params.p_insert == 0.0);
    assert!((0.0..=1.0).contains(&params.p_delete));
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let jitter = normal(params.jitter_ms);
    let spread = normal(params.chord_spread_ms);
    // (time, pitch, order, score id if scored)
    let mut played: Vec<(f64, PitchIndex, usize, Option<String>)> = Vec::new();
    let mut deleted: Vec<String> = Vec::new();
    for onset in score.onsets() {
        let base = params.tempo.seconds_at(onset.beat) + jitter.sample(&mut rng);
        let chord = onset.note_count() > 1;
        for (&pitch, ids) in &onset.note_ids {
            let mut sounded = false;
            for id in ids {
                if sounded || rng.gen_bool(params.p_delete) {
                    deleted.push(id.clone());
                    continue;
                }
                sounded = true;
                let t = base + if chord { spread.sample(&mut rng) } else { 0.0 };
                let order = played.len();
                played.push((t.max(0.0), pitch, order, Some(id.clone())));
                if params.p_insert > 0.0 && rng.gen_bool(params.p_insert) {
                    let extra = loop {
                        let step = rng.gen_range(1..=7) * if rng.gen_bool(0.5) { 1 } else { -1 };
                        if let Some(q) = pitch.shifted(step) {
                            break q;
                        }
                    };
                    let dt = rng.gen_range(0.03..0.25);
                    let order = played.len();
                    played.push(((t + dt).max(0.0), extra, order, None));
                }
            }
        }
    }
    played.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut notes = Vec::with_capacity(played.len());
    let mut records = Vec::with_capacity(played.len() + deleted.len());
    for (k, (t, pitch, _, sid)) in played.into_iter().enumerate() {
        let id = format!("n{k}");
        records.push(match sid {
            Some(score_id) => AlignmentRecord::Match { perf_id: id.clone(), score_id },
            None => AlignmentRecord::Insertion { perf_id: id.clone() },
        });
        notes.push(PerfNote { id, pitch, onset_sec: t, velocity: rng.gen_range(40..=100) });
    }
    let deleted: std::collections::HashSet<String> = deleted.into_iter().collect();
    records.extend(
        score
            .note_ids()
            .filter(|id| deleted.contains(*id))
            .map(|id| AlignmentRecord::Deletion { score_id: id.to_string() }),
    );
    let perf = Performance::new(notes).expect("generated notes are valid");
    (perf, NoteAlignment { records })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParams {
    pub onsets: usize,
    /// Largest number of notes sounding at one onset.
    pub max_chord: usize,
    pub p_chord: f64,
    /// Inclusive key-index range of the melody.
    pub low: u8,
    pub high: u8,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams { onsets: 120, max_chord: 4, p_chord: 0.3, low: 28, high: 64 }
    }
}

/// Random-walk melody with occasional chords built below it, ids `s0, s1, …`.
pub fn random_score(params: &ScoreParams, seed: u64) -> Score {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (params.low.max(1) as i32, params.high.min(88) as i32);
    let mut top = rng.gen_range(lo..=hi);
    let mut beat = 0.0;
    let mut notes = Vec::new();
    for _ in 0..params.onsets {
        top += rng.gen_range(-5..=5);
        // reflect off the range ends
        if top > hi {
            top = 2 * hi - top;
        }
        if top < lo {
            top = 2 * lo - top;
        }
        top = top.clamp(lo, hi);
        let mut pitches = vec![top];
        if params.max_chord > 1 && rng.gen_bool(params.p_chord) {
            let extra = rng.gen_range(1..params.max_chord);
            let mut below = top;
            for _ in 0..extra {
                below -= rng.gen_range(3..=7);
                if below < 1 {
                    break;
                }
                pitches.push(below);
            }
        }
        for p in pitches {
            notes.push(ScoreNote {
                id: format!("s{}", notes.len()),
                pitch: PitchIndex::new(p as u8).expect("clamped to keyboard"),
                onset_beat: beat,
                duration_beat: 1.0,
            });
        }
        beat += [0.25, 0.5, 0.5, 1.0, 1.0, 1.5, 2.0][rng.gen_range(0..7)];
    }
    score_from_notes(&notes)
}
