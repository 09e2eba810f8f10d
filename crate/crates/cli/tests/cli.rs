use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use symalign::eval::{fscore, generate_performance, random_score, sample_states, GenParams, ScoreParams};
use symalign::noteio::{
    load_alignment_json, load_performance_json, save_alignment_json, save_performance_json,
    save_score_json, Performance, Score,
};
use symalign::offline::{align_offline, OfflineConfig};
use symalign::online::{run_follower, OnlineConfig};
use symalign::value_model::{save_weights, HeuristicValues, ModelConfig, ValueModel, ValueModelWeights};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_symalign"));
    c.env_remove("SYMALIGN_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    score: Score,
    perf: Performance,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let score = random_score(&ScoreParams { onsets: 40, ..ScoreParams::default() }, seed);
        let params = GenParams { jitter_ms: 20.0, p_insert: 0.03, p_delete: 0.03, seed, ..GenParams::clean(100.0) };
        let (perf, truth) = generate_performance(&score, &params);
        save_score_json(&score, dir.path().join("s.json")).unwrap();
        save_performance_json(&perf, dir.path().join("p.json")).unwrap();
        save_alignment_json(&truth, dir.path().join("t.json")).unwrap();
        Fixture { dir, score, perf }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["evaluate", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    // exactly one value source
    let f = Fixture::new(1);
    let out = run(&["align-online", "--score", s(&f.path("s.json")), "--perf", s(&f.path("p.json")), "--out", s(&f.path("a.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["align-online", "--score", "x", "--perf", "y", "--out", "z", "--heuristic", "--candidates", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn io_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(&["evaluate", "--pred", s(&missing), "--truth", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let f = Fixture::new(2);
    let t = s(&f.path("t.json")).to_string();
    let out = bin().env("SYMALIGN_THREADS", "zero").args(["evaluate", "--pred", &t, "--truth", &t]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().env("SYMALIGN_THREADS", "2").args(["evaluate", "--pred", &t, "--truth", &t]).output().unwrap();
    ok(&out);
}

#[test]
fn offline_matches_library() {
    let f = Fixture::new(3);
    let a = f.path("a.json");
    let out = run(&["align-offline", "--score", s(&f.path("s.json")), "--perf", s(&f.path("p.json")), "--out", s(&a)]);
    ok(&out);
    let got = load_alignment_json(&a).unwrap();
    got.validate_against(&f.score, &f.perf).unwrap();
    assert_eq!(got, align_offline(&f.score, &f.perf, &OfflineConfig::default()).unwrap());

    let tight = f.path("tight.json");
    ok(&run(&[
        "align-offline", "--score", s(&f.path("s.json")), "--perf", s(&f.path("p.json")),
        "--out", s(&tight), "--cutoff-sec", "0.01",
    ]));
    let want = align_offline(&f.score, &f.perf, &OfflineConfig { cutoff_sec: 0.01 }).unwrap();
    assert_eq!(load_alignment_json(&tight).unwrap(), want);
}

fn push_varlen(out: &mut Vec<u8>, mut v: u32) {
    let mut bytes = vec![(v & 0x7f) as u8];
    v >>= 7;
    while v > 0 {
        bytes.push((v & 0x7f) as u8 | 0x80);
        v >>= 7;
    }
    out.extend(bytes.iter().rev());
}

/// Format-0 file at 480 ticks per quarter and the default tempo, so a tick is 1/960 s.
fn midi_bytes(perf: &Performance) -> Vec<u8> {
    let tick = |sec: f64| (sec * 960.0).round() as u32;
    let mut events: Vec<(u32, [u8; 3])> = Vec::new();
    for n in perf.notes() {
        events.push((tick(n.onset_sec), [0x90, n.pitch.midi(), 64]));
        events.push((tick(n.onset_sec + 0.1), [0x80, n.pitch.midi(), 0]));
    }
    events.sort_by_key(|&(t, e)| (t, e[0] == 0x90));
    let mut track = Vec::new();
    let mut last = 0;
    for (t, e) in events {
        push_varlen(&mut track, t - last);
        track.extend(e);
        last = t;
    }
    track.extend([0x00, 0xff, 0x2f, 0x00]);
    let mut out = b"MThd".to_vec();
    out.extend(6u32.to_be_bytes());
    out.extend([0, 0, 0, 1, 0x01, 0xe0]);
    out.extend(b"MTrk");
    out.extend((track.len() as u32).to_be_bytes());
    out.extend(track);
    out
}

#[test]
fn midi_performance_input() {
    let f = Fixture::new(4);
    // quantize onsets to the MIDI tick so both inputs describe the same performance
    let perf = f.perf.map_onsets(|t| (t * 960.0).round() / 960.0).unwrap();
    std::fs::write(f.path("p.mid"), midi_bytes(&perf)).unwrap();
    let a = f.path("a.json");
    ok(&run(&["align-offline", "--score", s(&f.path("s.json")), "--perf", s(&f.path("p.mid")), "--out", s(&a)]));
    let got = load_alignment_json(&a).unwrap();
    let midi_perf = symalign::noteio::load_performance_midi(f.path("p.mid")).unwrap().performance;
    assert_eq!(midi_perf.len(), perf.len());
    assert_eq!(got, align_offline(&f.score, &midi_perf, &OfflineConfig::default()).unwrap());
}

#[test]
fn online_matches_library() {
    let f = Fixture::new(5);
    let (sp, pp, a) = (f.path("s.json"), f.path("p.json"), f.path("a.json"));
    for (flag, cfg) in [(None, OnlineConfig::default()), (Some("--greedy"), OnlineConfig::greedy())] {
        let mut args = vec!["align-online", "--score", s(&sp), "--perf", s(&pp), "--heuristic", "--out", s(&a)];
        args.extend(flag);
        ok(&run(&args));
        let want = run_follower(&f.score, &f.perf, HeuristicValues, cfg).unwrap().alignment;
        assert_eq!(load_alignment_json(&a).unwrap(), want);
    }
}

#[test]
fn online_with_weight_file() {
    let f = Fixture::new(6);
    let w = ValueModelWeights::random(&ModelConfig::default(), 9);
    save_weights(&w, f.path("w.smaw")).unwrap();
    let a = f.path("a.json");
    ok(&run(&[
        "align-online", "--score", s(&f.path("s.json")), "--perf", s(&f.path("p.json")),
        "--weights", s(&f.path("w.smaw")), "--out", s(&a),
    ]));
    let model = ValueModel::from_weights(&w, 8).unwrap();
    let want = run_follower(&f.score, &f.perf, &model, OnlineConfig::default()).unwrap().alignment;
    assert_eq!(load_alignment_json(&a).unwrap(), want);

    std::fs::write(f.path("bad.smaw"), b"SMAWjunk").unwrap();
    let out = run(&[
        "align-online", "--score", s(&f.path("s.json")), "--perf", s(&f.path("p.json")),
        "--weights", s(&f.path("bad.smaw")), "--out", s(&a),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn follow_streams_in_order() {
    let f = Fixture::new(7);
    let mut child = bin()
        .args(["follow", "--score", s(&f.path("s.json")), "--heuristic"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        for n in f.perf.notes() {
            writeln!(stdin, "{{\"pitch\": {}, \"onset_sec\": {}}}", n.pitch.midi(), n.onset_sec).unwrap();
        }
    }
    let out = child.wait_with_output().unwrap();
    ok(&out);
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let want = run_follower(&f.score, &f.perf, HeuristicValues, OnlineConfig::default()).unwrap().reports;
    assert_eq!(lines.len(), want.len());
    for (l, r) in lines.iter().zip(&want) {
        assert_eq!(l["onset_index"].as_u64().unwrap() as usize, r.onset);
        assert_eq!(l["beat"].as_f64().unwrap(), r.beat);
    }
}

#[test]
fn follow_rejects_bad_events() {
    let f = Fixture::new(8);
    let mut child = bin()
        .args(["follow", "--score", s(&f.path("s.json")), "--heuristic"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"pitch\": 60, \"onset_sec\": 0.0}\n{\"pitch\": 5, \"onset_sec\": 0.5}\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn evaluate_prints_fscore() {
    let f = Fixture::new(9);
    let t = f.path("t.json");
    let out = run(&["evaluate", "--pred", s(&t), "--truth", s(&t)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("f=1.0"));

    let a = f.path("a.json");
    ok(&run(&["align-offline", "--score", s(&f.path("s.json")), "--perf", s(&f.path("p.json")), "--out", s(&a)]));
    let out = run(&["evaluate", "--pred", s(&a), "--truth", s(&t), "--json"]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let want = fscore(&load_alignment_json(&a).unwrap(), &load_alignment_json(&t).unwrap()).unwrap();
    assert_eq!(v["f"].as_f64().unwrap(), want.f);
    assert_eq!(v["tp"].as_u64().unwrap() as usize, want.tp);
}

#[test]
fn sample_states_and_topk() {
    let f = Fixture::new(10);
    let st = f.path("st.ndjson");
    let args = |out: &Path, aug: &'static str| {
        vec![
            "sample-states".to_string(), "--score".into(), s(&f.path("s.json")).into(),
            "--perf".into(), s(&f.path("p.json")).into(), "--truth".into(), s(&f.path("t.json")).into(),
            "--out".into(), s(out).into(), "--augment".into(), aug.into(), "--seed".into(), "3".into(), "--json".into(),
        ]
    };
    let out = bin().args(args(&st, "0")).output().unwrap();
    ok(&out);
    let truth = load_alignment_json(f.path("t.json")).unwrap();
    let want = sample_states(&f.score, &f.perf, &truth).unwrap();
    let got = symalign::eval::import_states(&st).unwrap();
    let records = |v: &[symalign::eval::SampledState]| v.iter().map(|s| s.to_record()).collect::<Vec<_>>();
    assert_eq!(records(&got), records(&want));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["states"].as_u64().unwrap() as usize, want.len());

    let aug = f.path("aug.ndjson");
    ok(&bin().args(args(&aug, "2")).output().unwrap());
    let first = std::fs::read(&aug).unwrap();
    assert_eq!(symalign::eval::import_states(&aug).unwrap().len(), 3 * want.len());
    ok(&bin().args(args(&aug, "2")).output().unwrap());
    assert_eq!(std::fs::read(&aug).unwrap(), first);

    let out = run(&["topk", "--states", s(&st), "--heuristic", "--json"]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let want = symalign::eval::topk_hits(&want, HeuristicValues).unwrap();
    assert_eq!(v["top0"].as_f64().unwrap(), want.top0);
    assert!(want.top0 <= want.top1 && want.top1 <= want.top2);
}

#[test]
fn synth_matches_library() {
    let f = Fixture::new(11);
    let (p, t) = (f.path("sp.json"), f.path("st.json"));
    ok(&run(&[
        "synth", "--score", s(&f.path("s.json")), "--seed", "42", "--jitter-ms", "30", "--p-insert", "0.02",
        "--p-delete", "0.02", "--out-perf", s(&p), "--out-truth", s(&t),
    ]));
    let params = GenParams { jitter_ms: 30.0, p_insert: 0.02, p_delete: 0.02, seed: 42, ..GenParams::clean(120.0) };
    let (perf, truth) = generate_performance(&f.score, &params);
    assert_eq!(load_performance_json(&p).unwrap(), perf);
    assert_eq!(load_alignment_json(&t).unwrap(), truth);

    let sc = f.path("rand.json");
    ok(&run(&["synth-score", "--seed", "5", "--onsets", "30", "--out", s(&sc)]));
    let want = random_score(&ScoreParams { onsets: 30, ..ScoreParams::default() }, 5);
    assert_eq!(symalign::noteio::load_score_json(&sc).unwrap(), want);
}
