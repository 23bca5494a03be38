//! Standard MIDI File reading and writing.
//!
//! Times are converted from ticks to exact rational beats (quarter note = 1)
//! so that later binning and sixteenth-note quantization never drift.
//! Only the event types needed for analysis and generation are interpreted:
//! note on/off, program change, and the meta events for track name (`FF 03`),
//! instrument name (`FF 04`), tempo (`FF 51`), time signature (`FF 58`) and
//! end of track (`FF 2F`). Everything else is skipped.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Beat;

/// General MIDI percussion lives on the tenth channel (zero-based 9).
pub const PERCUSSION_CHANNEL: u8 = 9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported SMF format {0} (only formats 0 and 1 are read)")]
    UnsupportedFormat(u16),
    #[error("unsupported time division {0:#06x} (SMPTE timing)")]
    UnsupportedDivision(u16),
    #[error("invalid song: {0}")]
    Validation(String),
}

fn parse_err(offset: usize, message: impl Into<String>) -> MidiError {
    MidiError::Parse {
        offset,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: Beat,
    pub duration: Beat,
    pub velocity: u8,
    pub channel: u8,
    pub track_index: usize,
}

impl NoteEvent {
    pub fn end(&self) -> Beat {
        self.onset + self.duration
    }

    pub fn pitch_class(&self) -> u8 {
        self.pitch % 12
    }

    pub fn is_percussion(&self) -> bool {
        self.channel == PERCUSSION_CHANNEL
    }

    /// True if the note sounds at some point inside `[start, end)`.
    pub fn overlaps(&self, start: Beat, end: Beat) -> bool {
        self.onset < end && self.end() > start
    }

    /// True if the note is sounding at instant `t`.
    pub fn sounds_at(&self, t: Beat) -> bool {
        self.onset <= t && t < self.end()
    }
}

/// A region of constant meter. Spans are contiguous and the last one ends at
/// the song end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSignatureSpan {
    pub start: Beat,
    pub end: Beat,
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignatureSpan {
    /// Measure length in quarter-note beats.
    pub fn measure_length(&self) -> Beat {
        Beat::new(4 * i64::from(self.numerator), i64::from(self.denominator))
    }

    pub fn len(&self) -> Beat {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tempo {
    pub start: Beat,
    pub micros_per_quarter: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Track {
    pub name: String,
    /// Instrument name from meta event `FF 04`.
    pub instrument: String,
    pub program: u8,
    pub channel: u8,
    pub notes: Vec<NoteEvent>,
}

impl Track {
    pub fn new(name: impl Into<String>, program: u8, channel: u8) -> Self {
        Track {
            name: name.into(),
            instrument: String::new(),
            program,
            channel,
            notes: Vec::new(),
        }
    }

    /// A track is treated as percussion when every note is on channel 10, or
    /// when it has no notes but is assigned to channel 10.
    pub fn is_percussion(&self) -> bool {
        if self.notes.is_empty() {
            self.channel == PERCUSSION_CHANNEL
        } else {
            self.notes.iter().all(NoteEvent::is_percussion)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseWarning {
    /// A note-on was never closed; it was ended at the end of its track.
    UnmatchedNoteOn { track: usize, pitch: u8 },
    /// A note-on was followed by its note-off on the same tick and dropped.
    ZeroLengthNote { track: usize, pitch: u8 },
    /// A second note-on for an already sounding pitch was merged into it.
    MergedDuplicate { track: usize, pitch: u8 },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::UnmatchedNoteOn { track, pitch } => {
                write!(f, "track {track}: note {pitch} never released, closed at track end")
            }
            ParseWarning::ZeroLengthNote { track, pitch } => {
                write!(f, "track {track}: zero-length note {pitch} dropped")
            }
            ParseWarning::MergedDuplicate { track, pitch } => {
                write!(f, "track {track}: overlapping duplicate of note {pitch} merged")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Song {
    pub ticks_per_quarter: u16,
    pub tracks: Vec<Track>,
    pub time_signatures: Vec<TimeSignatureSpan>,
    pub tempos: Vec<Tempo>,
    /// Song length in beats (latest end-of-track).
    pub end: Beat,
    #[serde(default)]
    pub warnings: Vec<ParseWarning>,
}

impl Song {
    /// Builds a song in a single meter, fixing up track indices and the song end.
    pub fn new(
        ticks_per_quarter: u16,
        tracks: Vec<Track>,
        numerator: u8,
        denominator: u8,
    ) -> Self {
        let mut song = Song {
            ticks_per_quarter,
            tracks,
            time_signatures: vec![TimeSignatureSpan {
                start: Beat::from_integer(0),
                end: Beat::from_integer(0),
                numerator,
                denominator,
            }],
            tempos: Vec::new(),
            end: Beat::from_integer(0),
            warnings: Vec::new(),
        };
        song.normalize();
        song
    }

    /// Re-derives track indices, sorts notes, extends the song end to cover
    /// every note and closes the last time-signature span at the song end.
    pub fn normalize(&mut self) {
        for (i, track) in self.tracks.iter_mut().enumerate() {
            for n in &mut track.notes {
                n.track_index = i;
            }
            track
                .notes
                .sort_by_key(|a| (a.onset, a.pitch, a.channel));
        }
        let last_note = self
            .tracks
            .iter()
            .flat_map(|t| t.notes.iter().map(NoteEvent::end))
            .max()
            .unwrap_or_default();
        if last_note > self.end {
            self.end = last_note;
        }
        self.time_signatures.sort_by_key(|a| a.start);
        if let Some(last_start) = self.time_signatures.last().map(|s| s.start) {
            if self.end < last_start {
                self.end = last_start;
            }
        }
        let n = self.time_signatures.len();
        for i in 0..n {
            let end = if i + 1 < n {
                self.time_signatures[i + 1].start
            } else {
                self.end
            };
            self.time_signatures[i].end = end;
        }
    }

    pub fn duration(&self) -> Beat {
        self.end
    }

    pub fn notes(&self) -> impl Iterator<Item = &NoteEvent> {
        self.tracks.iter().flat_map(|t| t.notes.iter())
    }
}

fn read_vlq(data: &[u8], pos: &mut usize) -> Result<u32, MidiError> {
    let start = *pos;
    let mut value: u32 = 0;
    for _ in 0..4 {
        let byte = *data
            .get(*pos)
            .ok_or_else(|| parse_err(*pos, "truncated variable-length quantity"))?;
        *pos += 1;
        value = (value << 7) | u32::from(byte & 0x7f);
        if byte & 0x80 == 0 {
            return Ok(value);
        }
    }
    Err(parse_err(start, "variable-length quantity longer than 4 bytes"))
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = ((value & 0x7f) as u8) | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn be_u16(data: &[u8], pos: usize) -> Result<u16, MidiError> {
    data.get(pos..pos + 2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .ok_or_else(|| parse_err(pos, "unexpected end of data"))
}

fn be_u32(data: &[u8], pos: usize) -> Result<u32, MidiError> {
    data.get(pos..pos + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(pos, "unexpected end of data"))
}

/// Raw per-chunk parse result before tracks are assembled.
#[derive(Default)]
struct RawTrack {
    name: Option<String>,
    instrument: Option<String>,
    /// First program change seen per channel.
    programs: HashMap<u8, u8>,
    first_program_channel: Option<u8>,
    /// (start tick, end tick, pitch, velocity, channel)
    notes: Vec<(u64, u64, u8, u8, u8)>,
    end_tick: u64,
    unmatched: Vec<u8>,
    zero_length: Vec<u8>,
    merged: Vec<u8>,
}

struct OpenNote {
    start: u64,
    velocity: u8,
    depth: u32,
}

fn parse_track(
    data: &[u8],
    base: usize,
    time_sigs: &mut Vec<(u64, u8, u8)>,
    tempos: &mut Vec<(u64, u32)>,
) -> Result<RawTrack, MidiError> {
    let mut raw = RawTrack::default();
    let mut open: HashMap<(u8, u8), OpenNote> = HashMap::new();
    let mut pos = 0usize;
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;

    while pos < data.len() {
        let delta = read_vlq(data, &mut pos).map_err(|e| rebase(e, base))?;
        tick += u64::from(delta);
        let at = pos;
        let first = *data
            .get(pos)
            .ok_or_else(|| parse_err(base + pos, "missing event status"))?;
        let status = if first & 0x80 != 0 {
            pos += 1;
            first
        } else {
            running.ok_or_else(|| parse_err(base + at, "data byte without running status"))?
        };

        match status {
            0xff => {
                running = None;
                let kind = *data
                    .get(pos)
                    .ok_or_else(|| parse_err(base + pos, "truncated meta event"))?;
                pos += 1;
                let len = read_vlq(data, &mut pos).map_err(|e| rebase(e, base))? as usize;
                let body = data
                    .get(pos..pos + len)
                    .ok_or_else(|| parse_err(base + pos, "meta event overruns chunk"))?;
                pos += len;
                match kind {
                    0x03 if raw.name.is_none() => {
                        raw.name = Some(String::from_utf8_lossy(body).into_owned())
                    }
                    0x04 if raw.instrument.is_none() => {
                        raw.instrument = Some(String::from_utf8_lossy(body).into_owned())
                    }
                    0x51 if len == 3 => {
                        let us = (u32::from(body[0]) << 16) | (u32::from(body[1]) << 8) | u32::from(body[2]);
                        tempos.push((tick, us));
                    }
                    0x58 if len >= 2 => {
                        if body[0] == 0 || body[1] > 6 {
                            return Err(parse_err(base + at, "invalid time signature"));
                        }
                        time_sigs.push((tick, body[0], 1u8 << body[1]));
                    }
                    0x2f => {
                        raw.end_tick = tick;
                        break;
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = read_vlq(data, &mut pos).map_err(|e| rebase(e, base))? as usize;
                if pos + len > data.len() {
                    return Err(parse_err(base + pos, "sysex event overruns chunk"));
                }
                pos += len;
            }
            0x80..=0xef => {
                running = Some(status);
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                let n_data = if kind == 0xc0 || kind == 0xd0 { 1 } else { 2 };
                let body = data
                    .get(pos..pos + n_data)
                    .ok_or_else(|| parse_err(base + pos, "truncated channel message"))?;
                if body.iter().any(|b| b & 0x80 != 0) {
                    return Err(parse_err(base + pos, "status byte inside channel message data"));
                }
                pos += n_data;
                match kind {
                    0x90 if body[1] > 0 => {
                        let key = (channel, body[0]);
                        match open.get_mut(&key) {
                            Some(note) => {
                                note.depth += 1;
                                raw.merged.push(body[0]);
                            }
                            None => {
                                open.insert(
                                    key,
                                    OpenNote {
                                        start: tick,
                                        velocity: body[1],
                                        depth: 1,
                                    },
                                );
                            }
                        }
                    }
                    0x80 | 0x90 => {
                        let key = (channel, body[0]);
                        if let Some(note) = open.get_mut(&key) {
                            note.depth -= 1;
                            if note.depth == 0 {
                                let note = open.remove(&key).expect("present");
                                if tick > note.start {
                                    raw.notes.push((note.start, tick, body[0], note.velocity, channel));
                                } else {
                                    raw.zero_length.push(body[0]);
                                }
                            }
                        }
                    }
                    0xc0 => {
                        raw.programs.entry(channel).or_insert(body[0]);
                        raw.first_program_channel.get_or_insert(channel);
                    }
                    _ => {}
                }
            }
            _ => return Err(parse_err(base + at, format!("unexpected status byte {status:#04x}"))),
        }
        raw.end_tick = raw.end_tick.max(tick);
    }

    let mut leftovers: Vec<_> = open.into_iter().collect();
    leftovers.sort_by_key(|((ch, p), n)| (n.start, *ch, *p));
    for ((channel, pitch), note) in leftovers {
        raw.unmatched.push(pitch);
        if raw.end_tick > note.start {
            raw.notes.push((note.start, raw.end_tick, pitch, note.velocity, channel));
        } else {
            raw.zero_length.push(pitch);
        }
    }
    Ok(raw)
}

fn rebase(err: MidiError, base: usize) -> MidiError {
    match err {
        MidiError::Parse { offset, message } => MidiError::Parse {
            offset: offset + base,
            message,
        },
        other => other,
    }
}

/// Parses a format-0 or format-1 Standard MIDI File.
///
/// Format-0 files are split into one track per channel so that melody
/// identification can score instruments separately.
pub fn parse_smf(bytes: &[u8]) -> Result<Song, MidiError> {
    if bytes.get(0..4) != Some(b"MThd") {
        return Err(parse_err(0, "missing MThd header"));
    }
    let header_len = be_u32(bytes, 4)? as usize;
    if header_len < 6 {
        return Err(parse_err(4, "header chunk shorter than 6 bytes"));
    }
    let format = be_u16(bytes, 8)?;
    let declared_tracks = be_u16(bytes, 10)?;
    let division = be_u16(bytes, 12)?;
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedDivision(division));
    }
    if division == 0 {
        return Err(parse_err(12, "zero ticks per quarter note"));
    }
    let tpq = i64::from(division);
    let to_beat = |tick: u64| Beat::new(tick as i64, tpq);

    let mut pos = 8 + header_len;
    let mut time_sigs = Vec::new();
    let mut tempos = Vec::new();
    let mut raws = Vec::new();
    while pos < bytes.len() && raws.len() < usize::from(declared_tracks) {
        let id = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| parse_err(pos, "truncated chunk header"))?;
        let len = be_u32(bytes, pos + 4)? as usize;
        let body_start = pos + 8;
        let body = bytes
            .get(body_start..body_start + len)
            .ok_or_else(|| parse_err(pos + 4, "chunk length exceeds file size"))?;
        if id == b"MTrk" {
            raws.push(parse_track(body, body_start, &mut time_sigs, &mut tempos)?);
        }
        pos = body_start + len;
    }

    let mut warnings = Vec::new();
    let mut tracks = Vec::new();
    let mut end_tick = 0u64;

    let push_track = |raw_name: &Option<String>,
                          raw_instrument: &Option<String>,
                          program: u8,
                          channel: u8,
                          notes: Vec<(u64, u64, u8, u8, u8)>,
                          tracks: &mut Vec<Track>| {
        let index = tracks.len();
        let notes = notes
            .into_iter()
            .map(|(s, e, pitch, velocity, channel)| NoteEvent {
                pitch,
                onset: to_beat(s),
                duration: to_beat(e - s),
                velocity,
                channel,
                track_index: index,
            })
            .collect();
        tracks.push(Track {
            name: raw_name.clone().unwrap_or_default(),
            instrument: raw_instrument.clone().unwrap_or_default(),
            program,
            channel,
            notes,
        });
    };

    for raw in raws.iter_mut() {
        end_tick = end_tick.max(raw.end_tick);
        let notes = std::mem::take(&mut raw.notes);
        if format == 0 {
            let mut channels: Vec<u8> = notes.iter().map(|n| n.4).collect();
            channels.sort_unstable();
            channels.dedup();
            if channels.is_empty() {
                let channel = raw.first_program_channel.unwrap_or(0);
                let program = raw.programs.get(&channel).copied().unwrap_or(0);
                push_track(&raw.name, &raw.instrument, program, channel, Vec::new(), &mut tracks);
            }
            for ch in channels {
                let part: Vec<_> = notes.iter().copied().filter(|n| n.4 == ch).collect();
                let program = raw.programs.get(&ch).copied().unwrap_or(0);
                push_track(&raw.name, &raw.instrument, program, ch, part, &mut tracks);
            }
        } else {
            let channel = notes
                .iter()
                .min_by_key(|n| n.0)
                .map(|n| n.4)
                .or(raw.first_program_channel)
                .unwrap_or(0);
            let program = raw.programs.get(&channel).copied().unwrap_or(0);
            push_track(&raw.name, &raw.instrument, program, channel, notes, &mut tracks);
        }
        let index = tracks.len().saturating_sub(1);
        for &pitch in &raw.unmatched {
            warnings.push(ParseWarning::UnmatchedNoteOn { track: index, pitch });
        }
        for &pitch in &raw.zero_length {
            warnings.push(ParseWarning::ZeroLengthNote { track: index, pitch });
        }
        for &pitch in &raw.merged {
            warnings.push(ParseWarning::MergedDuplicate { track: index, pitch });
        }
    }

    // Later events at the same tick override earlier ones.
    time_sigs.sort_by_key(|t| t.0);
    let mut spans: Vec<TimeSignatureSpan> = Vec::new();
    for (tick, num, den) in time_sigs {
        let start = to_beat(tick);
        if let Some(last) = spans.last_mut() {
            if last.start == start {
                last.numerator = num;
                last.denominator = den;
                continue;
            }
            if last.numerator == num && last.denominator == den {
                continue;
            }
        }
        spans.push(TimeSignatureSpan {
            start,
            end: start,
            numerator: num,
            denominator: den,
        });
    }
    if spans.first().is_none_or(|s| s.start > Beat::from_integer(0)) {
        spans.insert(
            0,
            TimeSignatureSpan {
                start: Beat::from_integer(0),
                end: Beat::from_integer(0),
                numerator: 4,
                denominator: 4,
            },
        );
    }

    tempos.sort_by_key(|t| t.0);
    let mut tempo_map: Vec<Tempo> = Vec::new();
    for (tick, us) in tempos {
        let start = to_beat(tick);
        match tempo_map.last_mut() {
            Some(last) if last.start == start => last.micros_per_quarter = us,
            _ => tempo_map.push(Tempo {
                start,
                micros_per_quarter: us,
            }),
        }
    }

    let mut song = Song {
        ticks_per_quarter: division,
        tracks,
        time_signatures: spans,
        tempos: tempo_map,
        end: to_beat(end_tick),
        warnings,
    };
    song.normalize();
    Ok(song)
}

fn beat_to_tick(beat: Beat, tpq: u16, what: &str) -> Result<u32, MidiError> {
    let ticks = beat * Beat::from_integer(i64::from(tpq));
    if !ticks.is_integer() {
        return Err(MidiError::Validation(format!(
            "{what} at beat {beat} is not representable at {tpq} ticks per quarter"
        )));
    }
    u32::try_from(ticks.to_integer())
        .map_err(|_| MidiError::Validation(format!("{what} at beat {beat} is out of range")))
}

/// Orders simultaneous events: meta first, then releases, then attacks.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    Tempo(u32),
    TimeSignature(u8, u8),
    NoteOff(u8, u8),
    NoteOn(u8, u8, u8),
}

/// Serializes a song as a format-1 SMF.
///
/// Tempo and time-signature events are written into the first track. Note
/// releases use `8n kk 40`; running status is never emitted.
pub fn write_smf(song: &Song) -> Result<Vec<u8>, MidiError> {
    if song.tracks.is_empty() {
        return Err(MidiError::Validation("song has no tracks".into()));
    }
    if song.tracks.len() > usize::from(u16::MAX) {
        return Err(MidiError::Validation("too many tracks".into()));
    }
    let tpq = song.ticks_per_quarter;
    if tpq == 0 || tpq & 0x8000 != 0 {
        return Err(MidiError::Validation(format!("invalid ticks per quarter {tpq}")));
    }
    let song_end = beat_to_tick(song.end, tpq, "song end")?;

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(song.tracks.len() as u16).to_be_bytes());
    out.extend_from_slice(&tpq.to_be_bytes());

    for (index, track) in song.tracks.iter().enumerate() {
        if track.channel > 15 || track.program > 127 {
            return Err(MidiError::Validation(format!(
                "track {index}: channel {} / program {} out of range",
                track.channel, track.program
            )));
        }
        let mut events: Vec<(u32, Pending)> = Vec::new();
        if index == 0 {
            for tempo in &song.tempos {
                if tempo.micros_per_quarter == 0 || tempo.micros_per_quarter > 0x00ff_ffff {
                    return Err(MidiError::Validation(format!(
                        "tempo {} us/quarter out of range",
                        tempo.micros_per_quarter
                    )));
                }
                events.push((beat_to_tick(tempo.start, tpq, "tempo")?, Pending::Tempo(tempo.micros_per_quarter)));
            }
            for ts in &song.time_signatures {
                if ts.numerator == 0 || !ts.denominator.is_power_of_two() || ts.denominator > 64 {
                    return Err(MidiError::Validation(format!(
                        "invalid time signature {}/{}",
                        ts.numerator, ts.denominator
                    )));
                }
                let power = ts.denominator.trailing_zeros() as u8;
                events.push((
                    beat_to_tick(ts.start, tpq, "time signature")?,
                    Pending::TimeSignature(ts.numerator, power),
                ));
            }
        }
        for note in &track.notes {
            if note.pitch > 127 {
                return Err(MidiError::Validation(format!("note pitch {} outside 0-127", note.pitch)));
            }
            if note.velocity == 0 || note.velocity > 127 {
                return Err(MidiError::Validation(format!(
                    "note velocity {} outside 1-127",
                    note.velocity
                )));
            }
            if note.channel > 15 {
                return Err(MidiError::Validation(format!("channel {} outside 0-15", note.channel)));
            }
            if note.duration <= Beat::from_integer(0) || note.onset < Beat::from_integer(0) {
                return Err(MidiError::Validation(format!(
                    "note {} at {} has non-positive duration or negative onset",
                    note.pitch, note.onset
                )));
            }
            let on = beat_to_tick(note.onset, tpq, "note onset")?;
            let off = beat_to_tick(note.end(), tpq, "note end")?;
            events.push((on, Pending::NoteOn(note.channel, note.pitch, note.velocity)));
            events.push((off, Pending::NoteOff(note.channel, note.pitch)));
        }
        events.sort();

        let mut body = Vec::new();
        let meta = |body: &mut Vec<u8>, kind: u8, payload: &[u8]| {
            body.push(0x00);
            body.push(0xff);
            body.push(kind);
            write_vlq(body, payload.len() as u32);
            body.extend_from_slice(payload);
        };
        if !track.name.is_empty() {
            meta(&mut body, 0x03, track.name.as_bytes());
        }
        if !track.instrument.is_empty() {
            meta(&mut body, 0x04, track.instrument.as_bytes());
        }
        body.extend_from_slice(&[0x00, 0xc0 | track.channel, track.program]);

        let mut last = 0u32;
        for (tick, event) in &events {
            write_vlq(&mut body, tick - last);
            last = *tick;
            match *event {
                Pending::Tempo(us) => {
                    body.extend_from_slice(&[0xff, 0x51, 0x03]);
                    body.extend_from_slice(&us.to_be_bytes()[1..]);
                }
                Pending::TimeSignature(num, power) => {
                    body.extend_from_slice(&[0xff, 0x58, 0x04, num, power, 24, 8]);
                }
                Pending::NoteOff(ch, pitch) => body.extend_from_slice(&[0x80 | ch, pitch, 0x40]),
                Pending::NoteOn(ch, pitch, vel) => body.extend_from_slice(&[0x90 | ch, pitch, vel]),
            }
        }
        let end = song_end.max(last);
        write_vlq(&mut body, end - last);
        body.extend_from_slice(&[0xff, 0x2f, 0x00]);

        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    Ok(out)
}
