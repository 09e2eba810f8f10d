use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use symalign::eval::{
    augment_pitch_shift, export_states, fscore, generate_performance, import_states,
    random_score, sample_states, topk_hits, GenParams, ScoreParams, TempoCurve,
};
use symalign::noteio::{
    load_alignment_json, load_performance_json, load_performance_midi, load_score_json,
    save_alignment_json, save_performance_json, save_score_json, PerfNote, Performance, PitchIndex,
    Score,
};
use symalign::offline::{align_offline, OfflineConfig, DEFAULT_CUTOFF_SEC};
use symalign::online::{
    run_follower, FollowerSession, OnlineConfig, Policy, DEFAULT_CANDIDATES, DEFAULT_PERIOD,
};
use symalign::value_model::{load_weights, HeuristicValues, ValueFunction, ValueModel};

/// Symbolic score-to-performance alignment.
#[derive(Parser)]
#[command(name = "symalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align a whole performance to its score.
    AlignOffline {
        #[arg(long)]
        score: PathBuf,
        /// Performance as JSON or standard MIDI (.mid, .midi).
        #[arg(long)]
        perf: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CUTOFF_SEC)]
        cutoff_sec: f64,
    },
    /// Align note by note, as a score follower would.
    AlignOnline {
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        perf: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        follower: FollowerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Follow `{pitch, onset_sec}` lines on stdin and print `{onset_index, beat}` per line.
    Follow {
        #[arg(long)]
        score: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        follower: FollowerArgs,
    },
    /// Match-level F-score of a predicted alignment.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// How often the greedy slot lands on, or within one or two onsets of, the target slot.
    Topk {
        #[arg(long)]
        states: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        json: bool,
    },
    /// Write every training state of a performance as newline-delimited JSON.
    SampleStates {
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        perf: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Transposed copies per state, each shifted by up to an octave.
        #[arg(long, default_value_t = 0)]
        augment: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Render a synthetic performance of a score with its true alignment.
    Synth {
        #[arg(long)]
        score: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 120.0)]
        bpm: f64,
        #[arg(long, default_value_t = 30.0)]
        jitter_ms: f64,
        #[arg(long, default_value_t = 0.02)]
        p_insert: f64,
        #[arg(long, default_value_t = 0.02)]
        p_delete: f64,
        #[arg(long, default_value_t = 0.0)]
        chord_spread_ms: f64,
        #[arg(long)]
        out_perf: PathBuf,
        #[arg(long)]
        out_truth: PathBuf,
    },
    /// Write a random score.
    SynthScore {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = ScoreParams::default().onsets)]
        onsets: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelArgs {
    /// Value network weights in SMAW format.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Use the weight-free pitch matching values instead of a network.
    #[arg(long)]
    heuristic: bool,
}

#[derive(Args)]
struct FollowerArgs {
    /// Take the top slot every time instead of choosing among candidates by expected time.
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = DEFAULT_CANDIDATES, value_parser = at_least_one)]
    candidates: usize,
    /// Seconds per beat before any tempo evidence.
    #[arg(long, default_value_t = DEFAULT_PERIOD)]
    default_period: f64,
    #[arg(long, default_value_t = 8)]
    heads: usize,
}

fn at_least_one(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

impl FollowerArgs {
    fn config(&self) -> OnlineConfig {
        OnlineConfig {
            policy: if self.greedy { Policy::Greedy } else { Policy::Candidates },
            candidates: self.candidates,
            default_period: self.default_period,
        }
    }
}

fn value_function(model: &ModelArgs, heads: usize) -> Result<Box<dyn ValueFunction + Send + Sync>> {
    match &model.weights {
        Some(path) => {
            let w = load_weights(path).with_context(|| format!("loading {}", path.display()))?;
            Ok(Box::new(ValueModel::from_weights(&w, heads)?))
        }
        None => Ok(Box::new(HeuristicValues)),
    }
}

fn load_perf(path: &Path) -> Result<Performance> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if matches!(ext.as_deref(), Some("mid" | "midi")) {
        let import = load_performance_midi(path)?;
        if import.dropped > 0 {
            eprintln!("warning: dropped {} notes outside the piano range", import.dropped);
        }
        Ok(import.performance)
    } else {
        Ok(load_performance_json(path)?)
    }
}

#[derive(Deserialize)]
struct FollowEvent {
    pitch: i64,
    onset_sec: f64,
}

#[derive(Serialize)]
struct FollowOutput {
    onset_index: usize,
    beat: f64,
}

fn parse_event(line: &str, k: usize) -> Result<PerfNote> {
    let ev: FollowEvent =
        serde_json::from_str(line).with_context(|| format!("input line {}", k + 1))?;
    let pitch = u8::try_from(ev.pitch)
        .ok()
        .and_then(PitchIndex::from_midi)
        .with_context(|| format!("input line {}: pitch {} outside 21..=108", k + 1, ev.pitch))?;
    if !ev.onset_sec.is_finite() {
        bail!("input line {}: onset_sec is not finite", k + 1);
    }
    Ok(PerfNote { id: format!("e{k}"), pitch, onset_sec: ev.onset_sec, velocity: 64 })
}

fn follow(score: &Score, vf: impl ValueFunction, config: OnlineConfig) -> Result<()> {
    let mut session = FollowerSession::new(score, vf, config).context("score has no onsets")?;
    let (tx, rx) = mpsc::sync_channel::<Result<PerfNote>>(64);
    let reader = std::thread::spawn(move || {
        let stdin = std::io::stdin().lock();
        let mut k = 0;
        for line in stdin.lines() {
            let item = match line {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => parse_event(&l, k),
                Err(e) => Err(e.into()),
            };
            k += 1;
            let stop = item.is_err();
            if tx.send(item).is_err() || stop {
                break;
            }
        }
    });
    let mut out = std::io::stdout().lock();
    for item in rx {
        let note = item?;
        let r = session.follow(&note)?;
        serde_json::to_writer(&mut out, &FollowOutput { onset_index: r.onset, beat: r.beat })?;
        writeln!(out)?;
        out.flush()?;
    }
    reader.join().expect("stdin reader panicked");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::AlignOffline { score, perf, out, cutoff_sec } => {
            let score = load_score_json(&score)?;
            let perf = load_perf(&perf)?;
            let a = align_offline(&score, &perf, &OfflineConfig { cutoff_sec })?;
            save_alignment_json(&a, &out)?;
        }
        Command::AlignOnline { score, perf, model, follower, out } => {
            let score = load_score_json(&score)?;
            let perf = load_perf(&perf)?;
            let vf = value_function(&model, follower.heads)?;
            let run = run_follower(&score, &perf, vf, follower.config())?;
            save_alignment_json(&run.alignment, &out)?;
        }
        Command::Follow { score, model, follower } => {
            let score = load_score_json(&score)?;
            let vf = value_function(&model, follower.heads)?;
            follow(&score, vf, follower.config())?;
        }
        Command::Evaluate { pred, truth, json } => {
            let f = fscore(&load_alignment_json(&pred)?, &load_alignment_json(&truth)?)?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({
                        "f": f.f, "precision": f.precision, "recall": f.recall,
                        "tp": f.tp, "fp": f.fp, "fn": f.fn_,
                    })
                );
            } else {
                println!("f={:.4} precision={:.4} recall={:.4}", f.f, f.precision, f.recall);
            }
        }
        Command::Topk { states, model, json } => {
            let states = import_states(&states)?;
            let vf = value_function(&model, 8)?;
            let t = topk_hits(&states, vf)?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({"top0": t.top0, "top1": t.top1, "top2": t.top2, "states": states.len()})
                );
            } else {
                println!("top0={:.4} top1={:.4} top2={:.4}", t.top0, t.top1, t.top2);
            }
        }
        Command::SampleStates { score, perf, truth, out, augment, seed, json } => {
            use rand::{Rng, SeedableRng};
            let score = load_score_json(&score)?;
            let perf = load_perf(&perf)?;
            let truth = load_alignment_json(&truth)?;
            truth.validate_against(&score, &perf)?;
            let base = sample_states(&score, &perf, &truth)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut states = Vec::with_capacity(base.len() * (augment + 1));
            for s in &base {
                states.push(s.clone());
                for _ in 0..augment {
                    states.push(augment_pitch_shift(s, rng.gen_range(-12..=12)));
                }
            }
            export_states(&states, &out)?;
            if json {
                println!("{}", serde_json::json!({"states": states.len(), "base": base.len()}));
            } else {
                println!("states={} base={}", states.len(), base.len());
            }
        }
        Command::Synth {
            score,
            seed,
            bpm,
            jitter_ms,
            p_insert,
            p_delete,
            chord_spread_ms,
            out_perf,
            out_truth,
        } => {
            if !(bpm.is_finite() && bpm > 0.0) {
                bail!("--bpm must be positive");
            }
            if !(0.0..=1.0).contains(&p_insert) || !(0.0..=1.0).contains(&p_delete) {
                bail!("probabilities must lie in [0, 1]");
            }
            let score = load_score_json(&score)?;
            let params = GenParams {
                tempo: TempoCurve::constant(bpm),
                jitter_ms,
                p_insert,
                p_delete,
                chord_spread_ms,
                seed,
            };
            let (perf, truth) = generate_performance(&score, &params);
            save_performance_json(&perf, &out_perf)?;
            save_alignment_json(&truth, &out_truth)?;
        }
        Command::SynthScore { seed, onsets, out } => {
            let score = random_score(&ScoreParams { onsets, ..ScoreParams::default() }, seed);
            save_score_json(&score, &out)?;
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SYMALIGN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SYMALIGN_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
