//! Minimal standard MIDI file reader: note-on events and the tempo map, nothing else.

use std::path::Path;

use super::{NoteIoError, PerfNote, Performance, PitchIndex};

/// Result of a MIDI import. `dropped` counts note-ons outside the piano range.
#[derive(Debug, Clone, PartialEq)]
pub struct MidiImport {
    pub performance: Performance,
    pub dropped: usize,
}

const DEFAULT_TEMPO_USEC: u32 = 500_000;

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> NoteIoError {
        NoteIoError::Midi {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], NoteIoError> {
        if self.data.len() - self.pos < n {
            return Err(self.err(format!(
                "need {n} bytes, {} available",
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NoteIoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NoteIoError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, NoteIoError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, NoteIoError> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(NoteIoError::Midi {
            offset: start,
            msg: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

struct RawNote {
    tick: u64,
    midi_pitch: u8,
    velocity: u8,
    order: usize,
}

enum Timing {
    Metrical(u16),
    /// Seconds per tick for SMPTE division.
    Smpte(f64),
}

pub fn load_performance_midi(path: impl AsRef<Path>) -> Result<MidiImport, NoteIoError> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|source| NoteIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_performance_midi(&data)
}

/// Parses an in-memory type-0 or type-1 standard MIDI file.
pub fn parse_performance_midi(data: &[u8]) -> Result<MidiImport, NoteIoError> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4)? != b"MThd" {
        return Err(NoteIoError::Midi {
            offset: 0,
            msg: "missing MThd header".into(),
        });
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(r.err(format!("header length {header_len} < 6")));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division = r.u16()?;
    if format > 1 {
        return Err(NoteIoError::Midi {
            offset: header_start,
            msg: format!("unsupported MIDI format {format}"),
        });
    }
    let timing = if division & 0x8000 == 0 {
        if division == 0 {
            return Err(NoteIoError::Midi {
                offset: header_start + 4,
                msg: "zero ticks per quarter note".into(),
            });
        }
        Timing::Metrical(division)
    } else {
        let fps = match (division >> 8) as u8 as i8 {
            -24 => 24.0,
            -25 => 25.0,
            -29 => 29.97,
            -30 => 30.0,
            other => {
                return Err(NoteIoError::Midi {
                    offset: header_start + 4,
                    msg: format!("invalid SMPTE frame rate {other}"),
                })
            }
        };
        let tpf = (division & 0xff) as f64;
        if tpf == 0.0 {
            return Err(NoteIoError::Midi {
                offset: header_start + 4,
                msg: "zero ticks per frame".into(),
            });
        }
        Timing::Smpte(1.0 / (fps * tpf))
    };
    r.pos = header_start + header_len;

    let mut notes: Vec<RawNote> = Vec::new();
    let mut tempos: Vec<(u64, u32)> = Vec::new();
    let mut tracks_read = 0;
    while tracks_read < ntracks {
        if r.pos == data.len() {
            return Err(r.err(format!(
                "header declares {ntracks} tracks, found {tracks_read}"
            )));
        }
        let chunk_start = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if data.len() - r.pos < len {
            return Err(NoteIoError::Midi {
                offset: chunk_start,
                msg: format!(
                    "chunk length {len} exceeds remaining {} bytes",
                    data.len() - r.pos
                ),
            });
        }
        if id != b"MTrk" {
            r.pos += len;
            continue;
        }
        let end = r.pos + len;
        let mut track = Reader {
            data: &data[..end],
            pos: r.pos,
        };
        parse_track(&mut track, &mut notes, &mut tempos)?;
        r.pos = end;
        tracks_read += 1;
    }

    tempos.sort_by_key(|&(tick, _)| tick);
    let seconds = |tick: u64| -> f64 {
        match timing {
            Timing::Smpte(spt) => tick as f64 * spt,
            Timing::Metrical(tpq) => {
                let tpq = tpq as f64;
                let (mut sec, mut last_tick, mut tempo) = (0.0, 0u64, DEFAULT_TEMPO_USEC);
                for &(t, usec) in &tempos {
                    if t >= tick {
                        break;
                    }
                    sec += (t - last_tick) as f64 * tempo as f64 / 1e6 / tpq;
                    last_tick = t;
                    tempo = usec;
                }
                sec + (tick - last_tick) as f64 * tempo as f64 / 1e6 / tpq
            }
        }
    };

    notes.sort_by_key(|n| (n.tick, n.midi_pitch, n.order));
    let mut dropped = 0;
    let mut out = Vec::with_capacity(notes.len());
    for n in notes {
        match PitchIndex::from_midi(n.midi_pitch) {
            Some(pitch) => out.push(PerfNote {
                id: format!("n{}", out.len()),
                pitch,
                onset_sec: seconds(n.tick),
                velocity: n.velocity,
            }),
            None => dropped += 1,
        }
    }
    Ok(MidiImport {
        performance: Performance::new(out)?,
        dropped,
    })
}

fn parse_track(
    r: &mut Reader<'_>,
    notes: &mut Vec<RawNote>,
    tempos: &mut Vec<(u64, u32)>,
) -> Result<(), NoteIoError> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    while r.pos < r.data.len() {
        tick += r.vlq()? as u64;
        let event_start = r.pos;
        let first = r.u8()?;
        match first {
            0xff => {
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let body = r.take(len)?;
                match kind {
                    0x51 => {
                        if len != 3 {
                            return Err(NoteIoError::Midi {
                                offset: event_start,
                                msg: format!("tempo event with length {len}"),
                            });
                        }
                        let usec = u32::from_be_bytes([0, body[0], body[1], body[2]]);
                        tempos.push((tick, usec));
                    }
                    0x2f => return Ok(()),
                    _ => {}
                }
                running = None;
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.take(len)?;
                running = None;
            }
            _ => {
                let (status, data1) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, r.u8()?)
                } else {
                    match running {
                        Some(s) => (s, first),
                        None => {
                            return Err(NoteIoError::Midi {
                                offset: event_start,
                                msg: format!("data byte {first:#04x} without running status"),
                            })
                        }
                    }
                };
                if status >= 0xf0 {
                    return Err(NoteIoError::Midi {
                        offset: event_start,
                        msg: format!("unexpected system message {status:#04x} in track"),
                    });
                }
                let data2 = match status & 0xf0 {
                    0xc0 | 0xd0 => None,
                    _ => Some(r.u8()?),
                };
                if status & 0xf0 == 0x90 {
                    let velocity = data2.unwrap_or(0);
                    if velocity > 0 {
                        notes.push(RawNote {
                            tick,
                            midi_pitch: data1 & 0x7f,
                            velocity,
                            order: notes.len(),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smf(tracks: &[Vec<u8>], division: u16) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend(6u32.to_be_bytes());
        out.extend(if tracks.len() > 1 { 1u16 } else { 0u16 }.to_be_bytes());
        out.extend((tracks.len() as u16).to_be_bytes());
        out.extend(division.to_be_bytes());
        for t in tracks {
            out.extend(b"MTrk");
            out.extend((t.len() as u32).to_be_bytes());
            out.extend(t);
        }
        out
    }

    #[test]
    fn single_note() {
        let track = vec![0x00, 0x90, 60, 100, 0x60, 0x80, 60, 0, 0x00, 0xff, 0x2f, 0x00];
        let imp = parse_performance_midi(&smf(&[track], 96)).unwrap();
        assert_eq!(imp.dropped, 0);
        let n = &imp.performance.notes()[0];
        assert_eq!(n.pitch.value(), 40);
        assert_eq!(n.onset_sec, 0.0);
        assert_eq!(n.velocity, 100);
    }

    #[test]
    fn simultaneous_notes_sorted_by_pitch_with_running_status() {
        // 64 then 60 at tick 0, running status for the second note-on and for note-offs (vel 0)
        let track = vec![
            0x00, 0x90, 64, 90, 0x00, 60, 80, 0x60, 64, 0, 0x00, 60, 0, 0x00, 0xff, 0x2f, 0x00,
        ];
        let imp = parse_performance_midi(&smf(&[track], 96)).unwrap();
        let p: Vec<u8> = imp.performance.notes().iter().map(|n| n.pitch.value()).collect();
        assert_eq!(p, vec![40, 44]);
    }

    #[test]
    fn out_of_range_pitches_dropped() {
        let track = vec![
            0x00, 0x90, 10, 90, 0x00, 0x90, 60, 90, 0x00, 0x90, 120, 90, 0x00, 0xff, 0x2f, 0x00,
        ];
        let imp = parse_performance_midi(&smf(&[track], 96)).unwrap();
        assert_eq!(imp.dropped, 2);
        assert_eq!(imp.performance.len(), 1);
    }

    #[test]
    fn tempo_change_applies_after_its_tick() {
        // tpq 100; first quarter at 500000 us, then tempo 1000000 us
        let track = vec![
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, // 500000
            0x64, 0xff, 0x51, 0x03, 0x0f, 0x42, 0x40, // 1000000 at tick 100
            0x64, 0x90, 60, 90, // tick 200
            0x00, 0xff, 0x2f, 0x00,
        ];
        let imp = parse_performance_midi(&smf(&[track], 100)).unwrap();
        assert!((imp.performance.notes()[0].onset_sec - 1.5).abs() < 1e-12);
    }

    #[test]
    fn bad_header_reports_offset() {
        let err = parse_performance_midi(b"MThx\0\0\0\x06").unwrap_err();
        assert!(matches!(err, NoteIoError::Midi { offset: 0, .. }));
        let mut file = smf(&[vec![0x00, 0x90, 60]], 96);
        file.truncate(file.len() - 1);
        match parse_performance_midi(&file).unwrap_err() {
            NoteIoError::Midi { offset, .. } => assert!(offset >= 14, "offset {offset}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn data_byte_without_status_is_error() {
        let track = vec![0x00, 60, 90];
        let err = parse_performance_midi(&smf(&[track], 96)).unwrap_err();
        match err {
            NoteIoError::Midi { offset, msg } => {
                assert_eq!(offset, 23);
                assert!(msg.contains("running status"));
            }
            e => panic!("unexpected {e}"),
        }
    }
}
