//! Fixed-size tensor encoding of eight-measure segments.
//!
//! A melody is a grid of sixteenth-note steps. Each step holds one of 34
//! categories (pitch offsets -16..=16 from the tonic reference, or Silent)
//! plus an attack bit that marks rearticulation. The chords over the same
//! window are two slots per measure, each a scale-degree one-hot (I..VII or
//! Silent) with five quality flags, followed by a mode one-hot.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harmony::{roman, to_scale_degree, Chord, ChordLabel, HarmonyError, Qualities, ScaleDegree};
use crate::melody::note_density;
use crate::midi::{NoteEvent, Song};
use crate::tonality::{estimate_key, fold_offset, reference_pitch, Mode, MAX_OFFSET};
use crate::{Beat, PitchClass};

pub const MEASURES: usize = 8;
pub const STEPS_PER_MEASURE: usize = 16;
pub const SLOTS_PER_MEASURE: usize = 2;
pub const STEPS_PER_SLOT: usize = STEPS_PER_MEASURE / SLOTS_PER_MEASURE;
/// Offsets -16..=16.
pub const PITCH_SLOTS: usize = 33;
pub const SILENT: u8 = PITCH_SLOTS as u8;
/// Pitch slots plus Silent.
pub const CATEGORIES: usize = PITCH_SLOTS + 1;
/// Categories plus the attack channel.
pub const CHANNELS: usize = CATEGORIES + 1;
pub const DEGREE_CHANNELS: usize = 8;
pub const QUALITY_CHANNELS: usize = 5;
pub const MODE_CHANNELS: usize = 8;
/// Condition features seen by one time step: its slot's degree and qualities plus the mode.
pub const STEP_CONDITION: usize = DEGREE_CHANNELS + QUALITY_CHANNELS + MODE_CHANNELS;
/// Length of one grid measure in beats.
pub const GRID_MEASURE_BEATS: i64 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodingError {
    #[error("step {step}: slot {slot} out of range")]
    SlotRange { step: usize, slot: u8 },
    #[error("step {step}: attack set on a silent step")]
    SilentAttack { step: usize },
    #[error("step {step}: new note without attack")]
    MissingAttack { step: usize },
    #[error("grid length {0} is not a whole number of measures")]
    Length(usize),
    #[error("expected {expected} chord slots, got {got}")]
    SlotCount { expected: usize, got: usize },
    #[error("degree {0} out of range 1-7")]
    Degree(u8),
    #[error(transparent)]
    Harmony(#[from] HarmonyError),
    #[error("note offset {0} outside -16..=16")]
    Offset(i32),
    #[error("malformed dataset record: {0}")]
    Record(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridStep {
    /// 0..=32 for offsets -16..=16, 33 for Silent.
    pub slot: u8,
    pub attack: bool,
}

impl GridStep {
    pub const SILENT: GridStep = GridStep {
        slot: SILENT,
        attack: false,
    };

    pub fn note(offset: i32, attack: bool) -> Self {
        debug_assert!(offset.abs() <= MAX_OFFSET);
        GridStep {
            slot: (offset + MAX_OFFSET) as u8,
            attack,
        }
    }

    pub fn is_silent(&self) -> bool {
        self.slot == SILENT
    }

    pub fn offset(&self) -> Option<i32> {
        (!self.is_silent()).then(|| i32::from(self.slot) - MAX_OFFSET)
    }
}

/// A note on the sixteenth-note grid, pitch relative to the tonic reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedNote {
    pub offset: i32,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MelodyGrid {
    steps: Vec<GridStep>,
}

impl MelodyGrid {
    pub fn silent(measures: usize) -> Self {
        MelodyGrid {
            steps: vec![GridStep::SILENT; measures * STEPS_PER_MEASURE],
        }
    }

    /// Wraps steps after checking the one-hot and attack invariants.
    pub fn from_steps(steps: Vec<GridStep>) -> Result<Self, EncodingError> {
        let grid = MelodyGrid { steps };
        grid.validate()?;
        Ok(grid)
    }

    pub fn steps(&self) -> &[GridStep] {
        &self.steps
    }

    pub fn measures(&self) -> usize {
        self.steps.len() / STEPS_PER_MEASURE
    }

    /// Number of scalar channels, `35 x steps`.
    pub fn dense_len(&self) -> usize {
        self.steps.len() * CHANNELS
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.steps.is_empty() || !self.steps.len().is_multiple_of(STEPS_PER_MEASURE) {
            return Err(EncodingError::Length(self.steps.len()));
        }
        let mut prev = GridStep::SILENT;
        for (step, s) in self.steps.iter().enumerate() {
            if s.slot > SILENT {
                return Err(EncodingError::SlotRange { step, slot: s.slot });
            }
            if s.is_silent() && s.attack {
                return Err(EncodingError::SilentAttack { step });
            }
            if !s.is_silent() && s.slot != prev.slot && !s.attack {
                return Err(EncodingError::MissingAttack { step });
            }
            prev = *s;
        }
        Ok(())
    }

    /// Clears attacks on silent steps and sets them wherever a new pitch starts.
    pub fn canonicalize(&mut self) {
        let mut prev = SILENT;
        for s in &mut self.steps {
            if s.is_silent() {
                s.attack = false;
            } else if s.slot != prev {
                s.attack = true;
            }
            prev = s.slot;
        }
    }

    /// Row-major `steps x 35` one-hot tensor.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dense_len()];
        for (t, s) in self.steps.iter().enumerate() {
            out[t * CHANNELS + usize::from(s.slot)] = 1.0;
            if s.attack {
                out[t * CHANNELS + CATEGORIES] = 1.0;
            }
        }
        out
    }

    /// Hardens per-step probabilities (rows of 34 categories + attack) by
    /// argmax over the categories and thresholding the attack at 0.5.
    pub fn harden(probs: &[f64]) -> Result<Self, EncodingError> {
        if !probs.len().is_multiple_of(CHANNELS) {
            return Err(EncodingError::Length(probs.len()));
        }
        let steps = probs
            .chunks(CHANNELS)
            .map(|row| {
                let slot = row[..CATEGORIES]
                    .iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0 as u8;
                GridStep {
                    slot,
                    attack: slot != SILENT && row[CATEGORIES] > 0.5,
                }
            })
            .collect();
        let mut grid = MelodyGrid { steps };
        if grid.steps.is_empty() || !grid.steps.len().is_multiple_of(STEPS_PER_MEASURE) {
            return Err(EncodingError::Length(grid.steps.len()));
        }
        grid.canonicalize();
        Ok(grid)
    }

    /// Reads the grid back as notes: a note runs over consecutive steps with
    /// the same slot and no attack.
    pub fn notes(&self) -> Vec<QuantizedNote> {
        let mut notes: Vec<QuantizedNote> = Vec::new();
        let mut prev = GridStep::SILENT;
        for (t, s) in self.steps.iter().enumerate() {
            if let Some(offset) = s.offset() {
                let continues = !s.attack && prev.slot == s.slot;
                match notes.last_mut() {
                    Some(last) if continues => last.len += 1,
                    _ => notes.push(QuantizedNote { offset, start: t, len: 1 }),
                }
            }
            prev = *s;
        }
        notes
    }

    /// Fraction of steps whose category or attack differs.
    pub fn difference(&self, other: &MelodyGrid) -> f64 {
        let n = self.steps.len().max(other.steps.len());
        if n == 0 {
            return 0.0;
        }
        let same = self.steps.iter().zip(&other.steps).filter(|(a, b)| a == b).count();
        (n - same) as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedMelody {
    pub grid: MelodyGrid,
    /// Two different pitches competed for at least one step.
    pub polyphonic: bool,
}

/// Writes quantized notes onto a grid of `measures` measures.
///
/// Overlaps of a single step (legato after rounding) are trimmed. Any other
/// step claimed by several notes keeps the highest pitch and flags the result.
pub fn encode_melody(notes: &[QuantizedNote], measures: usize) -> Result<EncodedMelody, EncodingError> {
    let total = measures * STEPS_PER_MEASURE;
    let mut notes: Vec<QuantizedNote> = notes
        .iter()
        .filter(|n| n.len > 0 && n.start < total)
        .map(|n| {
            if n.offset.abs() > MAX_OFFSET {
                Err(EncodingError::Offset(n.offset))
            } else {
                Ok(QuantizedNote {
                    len: n.len.min(total - n.start),
                    ..*n
                })
            }
        })
        .collect::<Result<_, _>>()?;
    notes.sort_by_key(|a| (a.start, -a.offset));
    for i in 0..notes.len().saturating_sub(1) {
        let next_start = notes[i + 1].start;
        let end = notes[i].start + notes[i].len;
        if next_start > notes[i].start && end == next_start + 1 {
            notes[i].len -= 1;
        }
    }

    let mut owner: Vec<Option<usize>> = vec![None; total];
    let mut polyphonic = false;
    for (i, n) in notes.iter().enumerate() {
        for cell in &mut owner[n.start..n.start + n.len] {
            match *cell {
                None => *cell = Some(i),
                Some(j) => {
                    if notes[j].offset != n.offset {
                        polyphonic = true;
                    }
                    if n.offset > notes[j].offset {
                        *cell = Some(i);
                    }
                }
            }
        }
    }

    let mut steps = Vec::with_capacity(total);
    let mut prev: Option<usize> = None;
    for (t, cell) in owner.iter().enumerate() {
        steps.push(match *cell {
            None => GridStep::SILENT,
            Some(i) => GridStep::note(notes[i].offset, notes[i].start == t || prev != Some(i)),
        });
        prev = *cell;
    }
    let mut grid = MelodyGrid { steps };
    grid.canonicalize();
    Ok(EncodedMelody { grid, polyphonic })
}

/// Turns a grid back into MIDI notes. Step `t` starts at beat `t / 4`;
/// pitches are `reference + offset` and notes outside 0-127 are skipped.
pub fn decode_melody(grid: &MelodyGrid, reference: i32, velocity: u8) -> Vec<NoteEvent> {
    grid.notes()
        .into_iter()
        .filter_map(|n| {
            let pitch = reference + n.offset;
            (0..=127).contains(&pitch).then(|| NoteEvent {
                pitch: pitch as u8,
                onset: Beat::new(n.start as i64, 4),
                duration: Beat::new(n.len as i64, 4),
                velocity,
                channel: 0,
                track_index: 0,
            })
        })
        .collect()
}

/// One half-measure chord slot; `degree` is `None` when silent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ChordSlot {
    pub degree: Option<u8>,
    pub qualities: Qualities,
}

impl ChordSlot {
    pub fn silent() -> Self {
        ChordSlot::default()
    }

    pub fn from_degree(d: ScaleDegree) -> Self {
        ChordSlot {
            degree: Some(d.degree),
            qualities: d.qualities,
        }
    }

    /// Degree channel index: 0..=6 for I..VII, 7 for Silent.
    pub fn degree_channel(&self) -> usize {
        self.degree.map_or(7, |d| usize::from(d) - 1)
    }
}

impl fmt::Display for ChordSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.degree {
            Some(d) => write!(f, "{}{}", roman(d), self.qualities),
            None => f.write_str("-"),
        }
    }
}

/// Chord progression and mode that a segment is conditioned on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub slots: Vec<ChordSlot>,
    pub mode: Mode,
}

impl ConditionVector {
    pub fn new(slots: Vec<ChordSlot>, mode: Mode) -> Result<Self, EncodingError> {
        if slots.is_empty() || !slots.len().is_multiple_of(SLOTS_PER_MEASURE) {
            return Err(EncodingError::SlotCount {
                expected: MEASURES * SLOTS_PER_MEASURE,
                got: slots.len(),
            });
        }
        if let Some(d) = slots.iter().filter_map(|s| s.degree).find(|d| !(1..=7).contains(d)) {
            return Err(EncodingError::Degree(d));
        }
        Ok(ConditionVector { slots, mode })
    }

    pub fn measures(&self) -> usize {
        self.slots.len() / SLOTS_PER_MEASURE
    }

    /// `8 x slots + 5 x slots + 8`.
    pub fn dense_len(&self) -> usize {
        self.slots.len() * (DEGREE_CHANNELS + QUALITY_CHANNELS) + MODE_CHANNELS
    }

    /// Degree one-hots for all slots, then quality flags for all slots, then the mode one-hot.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.slots.len();
        let mut out = vec![0.0; self.dense_len()];
        for (i, s) in self.slots.iter().enumerate() {
            out[i * DEGREE_CHANNELS + s.degree_channel()] = 1.0;
            for (q, on) in s.qualities.as_array().into_iter().enumerate() {
                if on {
                    out[n * DEGREE_CHANNELS + i * QUALITY_CHANNELS + q] = 1.0;
                }
            }
        }
        out[n * (DEGREE_CHANNELS + QUALITY_CHANNELS) + self.mode.index()] = 1.0;
        out
    }

    /// Per-step features (`steps x 21`): the slot covering each step plus the mode.
    pub fn step_features(&self) -> Vec<f64> {
        let steps = self.slots.len() * STEPS_PER_SLOT;
        let mut out = vec![0.0; steps * STEP_CONDITION];
        for t in 0..steps {
            let slot = &self.slots[t / STEPS_PER_SLOT];
            let row = &mut out[t * STEP_CONDITION..(t + 1) * STEP_CONDITION];
            row[slot.degree_channel()] = 1.0;
            for (q, on) in slot.qualities.as_array().into_iter().enumerate() {
                if on {
                    row[DEGREE_CHANNELS + q] = 1.0;
                }
            }
            row[DEGREE_CHANNELS + QUALITY_CHANNELS + self.mode.index()] = 1.0;
        }
        out
    }
}

/// Maps chords (one per half-measure slot, `None` = silent) to scale degrees
/// in the given key. Fails on any chord whose root is outside the mode.
pub fn encode_condition(
    chords: &[Option<Chord>],
    tonic: PitchClass,
    mode: Mode,
) -> Result<ConditionVector, EncodingError> {
    let slots = chords
        .iter()
        .map(|c| match c {
            Some(chord) => Ok(ChordSlot::from_degree(to_scale_degree(chord, tonic, mode)?)),
            None => Ok(ChordSlot::silent()),
        })
        .collect::<Result<Vec<_>, EncodingError>>()?;
    ConditionVector::new(slots, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSegment {
    pub id: String,
    pub source: String,
    pub start_measure: usize,
    pub tonic: PitchClass,
    pub mode: Mode,
    pub key_confidence: f64,
    /// MIDI pitch that offset 0 refers to.
    pub reference_pitch: i32,
    pub grid: MelodyGrid,
    pub condition: ConditionVector,
}

/// Why an eight-measure window did not become a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Meter is not duple or quadruple.
    Meter,
    /// Melody sounds less than 10% of the window.
    SparseMelody,
    /// A chord root is not diatonic to the window's key.
    OutOfMode,
    /// The melody has simultaneous pitches.
    Polyphony,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DropReason::Meter => "meter",
            DropReason::SparseMelody => "sparse_melody",
            DropReason::OutOfMode => "out_of_mode",
            DropReason::Polyphony => "polyphony",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractOutcome {
    pub segments: Vec<TrainingSegment>,
    pub drops: BTreeMap<DropReason, usize>,
}

impl ExtractOutcome {
    pub fn windows(&self) -> usize {
        self.segments.len() + self.dropped()
    }

    pub fn dropped(&self) -> usize {
        self.drops.values().sum()
    }

    pub fn merge(&mut self, other: ExtractOutcome) {
        self.segments.extend(other.segments);
        for (k, v) in other.drops {
            *self.drops.entry(k).or_default() += v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub window_measures: usize,
    pub hop_measures: usize,
    pub min_melody_density: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            window_measures: MEASURES,
            hop_measures: 4,
            min_melody_density: 0.1,
        }
    }
}

fn ceil_div(a: Beat, b: Beat) -> usize {
    let q = a / b;
    q.ceil().to_integer().max(0) as usize
}

fn window_starts(total: usize, opts: &ExtractOptions) -> impl Iterator<Item = usize> + '_ {
    (0..)
        .map(move |i| i * opts.hop_measures.max(1))
        .take_while(move |m| m + opts.window_measures <= total)
}

fn clip(n: &NoteEvent, start: Beat, end: Beat) -> Option<NoteEvent> {
    let s = n.onset.max(start);
    let e = n.end().min(end);
    (e > s).then(|| NoteEvent {
        onset: s,
        duration: e - s,
        ..n.clone()
    })
}

/// Quantizes beat times relative to `window_start` to sixteenth steps.
fn to_step(t: Beat, window_start: Beat) -> usize {
    ((t - window_start) * Beat::from_integer(4)).round().to_integer().max(0) as usize
}

/// Slides a window over every duple/quadruple span and keeps the windows
/// whose melody is dense enough, whose chords fit the window's estimated key
/// and whose melody is monophonic.
///
/// A grid measure is four beats; 2/4 spans therefore fit two notated measures
/// per grid measure.
pub fn extract_segments(
    song: &Song,
    source: &str,
    melody_track: usize,
    labels: &[ChordLabel],
    opts: &ExtractOptions,
) -> ExtractOutcome {
    let mut out = ExtractOutcome::default();
    let grid_measure = Beat::from_integer(GRID_MEASURE_BEATS);
    let window_len = grid_measure * Beat::from_integer(opts.window_measures as i64);
    let melody: &[NoteEvent] = song
        .tracks
        .get(melody_track)
        .map_or(&[], |t| t.notes.as_slice());
    let others: Vec<&NoteEvent> = song.notes().filter(|n| !n.is_percussion()).collect();

    for span in &song.time_signatures {
        if span.is_empty() {
            continue;
        }
        let measure = span.measure_length();
        let conforming = matches!(span.numerator, 2 | 4)
            && (measure == Beat::from_integer(2) || measure == Beat::from_integer(4));
        if !conforming {
            let windows = window_starts(ceil_div(span.len(), measure), opts).count();
            if windows > 0 {
                *out.drops.entry(DropReason::Meter).or_default() += windows;
            }
            continue;
        }
        let total = ceil_div(span.len(), grid_measure);
        for m in window_starts(total, opts) {
            let ws = span.start + grid_measure * Beat::from_integer(m as i64);
            let we = ws + window_len;
            match encode_window(melody, &others, labels, ws, we, opts) {
                Ok(mut seg) => {
                    seg.source = source.to_string();
                    seg.start_measure = m;
                    seg.id = format!("{source}@{m}");
                    out.segments.push(seg);
                }
                Err(reason) => *out.drops.entry(reason).or_default() += 1,
            }
        }
    }
    out
}

fn encode_window(
    melody: &[NoteEvent],
    others: &[&NoteEvent],
    labels: &[ChordLabel],
    ws: Beat,
    we: Beat,
    opts: &ExtractOptions,
) -> Result<TrainingSegment, DropReason> {
    let window_len = we - ws;
    let tune: Vec<NoteEvent> = melody.iter().filter_map(|n| clip(n, ws, we)).collect();
    if tune.is_empty() || note_density(&tune, window_len) < opts.min_melody_density {
        return Err(DropReason::SparseMelody);
    }
    let context: Vec<NoteEvent> = others.iter().filter_map(|n| clip(n, ws, we)).collect();
    let key = estimate_key(&context).map_err(|_| DropReason::SparseMelody)?;

    let slot_len = Beat::from_integer(GRID_MEASURE_BEATS) / Beat::from_integer(SLOTS_PER_MEASURE as i64);
    let n_slots = opts.window_measures * SLOTS_PER_MEASURE;
    let chords: Vec<Option<Chord>> = (0..n_slots)
        .map(|k| {
            let t = ws + slot_len * Beat::from_integer(k as i64);
            labels
                .iter()
                .find(|l| l.start <= t && t < l.end())
                .and_then(|l| l.chord.clone())
        })
        .collect();
    let condition = encode_condition(&chords, key.tonic, key.mode).map_err(|_| DropReason::OutOfMode)?;

    let reference = reference_pitch(tune.iter().map(|n| n.pitch), key.tonic);
    let steps = opts.window_measures * STEPS_PER_MEASURE;
    let quantized: Vec<QuantizedNote> = tune
        .iter()
        .map(|n| {
            let start = to_step(n.onset, ws).min(steps);
            let end = to_step(n.end(), ws).min(steps);
            QuantizedNote {
                offset: fold_offset(i32::from(n.pitch) - reference).0,
                start,
                len: end.saturating_sub(start).max(1),
            }
        })
        .collect();
    let encoded = encode_melody(&quantized, opts.window_measures).map_err(|_| DropReason::Polyphony)?;
    if encoded.polyphonic {
        return Err(DropReason::Polyphony);
    }
    Ok(TrainingSegment {
        id: String::new(),
        source: String::new(),
        start_measure: 0,
        tonic: key.tonic,
        mode: key.mode,
        key_confidence: key.confidence,
        reference_pitch: reference,
        grid: encoded.grid,
        condition,
    })
}

/// Sparse on-disk form of a segment; one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: String,
    pub source: String,
    pub start_measure: usize,
    pub measures: usize,
    pub tonic: PitchClass,
    pub mode: Mode,
    pub key_confidence: f64,
    pub reference_pitch: i32,
    /// `(step, offset, attack)` for every sounding step.
    pub melody: Vec<(usize, i32, u8)>,
    /// Per half-measure slot: degree 1-7 or null, and Pwr/Maj/Min/Dim/Aug as 0/1.
    pub chords: Vec<(Option<u8>, [u8; 5])>,
}

impl TrainingSegment {
    pub fn to_record(&self) -> SegmentRecord {
        SegmentRecord {
            id: self.id.clone(),
            source: self.source.clone(),
            start_measure: self.start_measure,
            measures: self.grid.measures(),
            tonic: self.tonic,
            mode: self.mode,
            key_confidence: self.key_confidence,
            reference_pitch: self.reference_pitch,
            melody: self
                .grid
                .steps()
                .iter()
                .enumerate()
                .filter_map(|(t, s)| s.offset().map(|o| (t, o, u8::from(s.attack))))
                .collect(),
            chords: self
                .condition
                .slots
                .iter()
                .map(|s| (s.degree, s.qualities.as_array().map(u8::from)))
                .collect(),
        }
    }

    pub fn from_record(rec: &SegmentRecord) -> Result<Self, EncodingError> {
        let mut steps = vec![GridStep::SILENT; rec.measures * STEPS_PER_MEASURE];
        for &(t, offset, attack) in &rec.melody {
            if offset.abs() > MAX_OFFSET {
                return Err(EncodingError::Offset(offset));
            }
            let cell = steps
                .get_mut(t)
                .ok_or_else(|| EncodingError::Record(format!("step {t} beyond {} measures", rec.measures)))?;
            *cell = GridStep::note(offset, attack != 0);
        }
        let grid = MelodyGrid::from_steps(steps)?;
        let slots = rec
            .chords
            .iter()
            .map(|(degree, q)| ChordSlot {
                degree: *degree,
                qualities: Qualities::from_array(q.map(|v| v != 0)),
            })
            .collect();
        let condition = ConditionVector::new(slots, rec.mode)?;
        if condition.measures() != grid.measures() {
            return Err(EncodingError::Record("chord slots do not match melody length".into()));
        }
        Ok(TrainingSegment {
            id: rec.id.clone(),
            source: rec.source.clone(),
            start_measure: rec.start_measure,
            tonic: rec.tonic,
            mode: rec.mode,
            key_confidence: rec.key_confidence,
            reference_pitch: rec.reference_pitch,
            grid,
            condition,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("records serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self, EncodingError> {
        let rec: SegmentRecord =
            serde_json::from_str(line).map_err(|e| EncodingError::Record(e.to_string()))?;
        Self::from_record(&rec)
    }
}

/// Parses a JSON Lines dataset, skipping blank lines.
pub fn read_dataset(text: &str) -> Result<Vec<TrainingSegment>, EncodingError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(TrainingSegment::from_json_line)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmony::TemplateSet;

    #[test]
    fn dimensions() {
        let grid = MelodyGrid::silent(MEASURES);
        assert_eq!(grid.dense_len(), 35 * 8 * 16);
        assert_eq!(grid.to_dense().len(), 4480);
        let cond = ConditionVector::new(vec![ChordSlot::silent(); 16], Mode::Major).unwrap();
        assert_eq!(cond.to_dense().len(), 8 * 16 + 5 * 16 + 8);
        assert_eq!(cond.dense_len(), 216);
    }

    #[test]
    fn silence_encodes_silent() {
        let e = encode_melody(&[], 8).unwrap();
        assert!(e.grid.steps().iter().all(|s| s.is_silent() && !s.attack));
        assert!(!e.polyphonic);
    }

    #[test]
    fn whole_notes_on_tonic() {
        let notes: Vec<_> = (0..8).map(|m| QuantizedNote { offset: 0, start: m * 16, len: 16 }).collect();
        let g = encode_melody(&notes, 8).unwrap().grid;
        for m in 0..8 {
            assert_eq!(g.steps()[m * 16], GridStep::note(0, true));
            for k in 1..16 {
                assert_eq!(g.steps()[m * 16 + k], GridStep::note(0, false));
            }
        }
        assert_eq!(g.notes(), notes);
    }

    #[test]
    fn attack_semantics() {
        let mut steps = vec![GridStep::SILENT; 16];
        steps[0] = GridStep::note(3, true);
        steps[1] = GridStep::note(3, true);
        let g = MelodyGrid::from_steps(steps.clone()).unwrap();
        let notes = decode_melody(&g, 60, 90);
        assert_eq!(notes.len(), 2);
        assert!(notes.iter().all(|n| n.duration == Beat::new(1, 4)));
        steps[1].attack = false;
        let g = MelodyGrid::from_steps(steps).unwrap();
        let notes = decode_melody(&g, 60, 90);
        assert_eq!(notes.len(), 1);
        assert_eq!(notes[0].duration, Beat::new(1, 2));
        assert_eq!(notes[0].pitch, 63);
    }

    #[test]
    fn simultaneous_notes_keep_higher_and_flag() {
        let notes = [
            QuantizedNote { offset: 0, start: 0, len: 4 },
            QuantizedNote { offset: 4, start: 0, len: 4 },
        ];
        let e = encode_melody(&notes, 1).unwrap();
        assert!(e.polyphonic);
        assert_eq!(e.grid.steps()[0], GridStep::note(4, true));
    }

    #[test]
    fn one_step_legato_overlap_is_trimmed() {
        let notes = [
            QuantizedNote { offset: 0, start: 0, len: 5 },
            QuantizedNote { offset: 2, start: 4, len: 4 },
        ];
        let e = encode_melody(&notes, 1).unwrap();
        assert!(!e.polyphonic);
        assert_eq!(
            e.grid.notes(),
            vec![
                QuantizedNote { offset: 0, start: 0, len: 4 },
                QuantizedNote { offset: 2, start: 4, len: 4 }
            ]
        );
    }

    #[test]
    fn invalid_grids_rejected() {
        let mut steps = vec![GridStep::SILENT; 16];
        steps[0] = GridStep { slot: SILENT, attack: true };
        assert_eq!(MelodyGrid::from_steps(steps.clone()), Err(EncodingError::SilentAttack { step: 0 }));
        steps[0] = GridStep::note(1, false);
        assert_eq!(MelodyGrid::from_steps(steps.clone()), Err(EncodingError::MissingAttack { step: 0 }));
        steps[0] = GridStep { slot: 40, attack: true };
        assert!(matches!(MelodyGrid::from_steps(steps), Err(EncodingError::SlotRange { .. })));
        assert!(matches!(MelodyGrid::from_steps(vec![GridStep::SILENT; 5]), Err(EncodingError::Length(5))));
    }

    #[test]
    fn condition_examples() {
        let t = TemplateSet::default();
        let chord = |root, name: &str| Chord {
            root,
            template: t.by_name(name).unwrap().clone(),
            template_index: 0,
            cost: 0,
        };
        let mut chords = vec![Some(chord(7, "dominant7")); 16];
        chords[1] = None;
        let c = encode_condition(&chords, 0, Mode::Major).unwrap();
        assert_eq!(c.slots[0].degree, Some(5));
        assert!(c.slots[0].qualities.maj && c.slots[0].qualities.pwr);
        assert!(!c.slots[0].qualities.min);
        assert_eq!(c.slots[1], ChordSlot::silent());
        let dense = c.to_dense();
        assert_eq!(dense[4], 1.0);
        assert_eq!(dense[8 + 7], 1.0);
        assert_eq!(dense[8 * 16 + 5 * 16], 1.0);

        let cm = encode_condition(&vec![Some(chord(0, "minor")); 16], 0, Mode::Minor).unwrap();
        assert_eq!(cm.slots[0].degree, Some(1));
        assert_eq!(cm.slots[0].qualities, Qualities { pwr: true, min: true, ..Default::default() });
        assert_eq!(cm.to_dense()[8 * 16 + 5 * 16 + Mode::Minor.index()], 1.0);

        let bad = vec![Some(chord(10, "major")); 16];
        assert!(matches!(encode_condition(&bad, 0, Mode::Major), Err(EncodingError::Harmony(_))));
    }

    #[test]
    fn step_features_follow_slots() {
        let mut slots = vec![ChordSlot::silent(); 2];
        slots[1] = ChordSlot { degree: Some(4), qualities: Qualities { maj: true, pwr: true, ..Default::default() } };
        let c = ConditionVector::new(slots, Mode::Dorian).unwrap();
        let f = c.step_features();
        assert_eq!(f.len(), 16 * STEP_CONDITION);
        assert_eq!(f[7], 1.0);
        assert_eq!(f[8 * STEP_CONDITION + 3], 1.0);
        assert_eq!(f[8 * STEP_CONDITION + 8], 1.0);
        assert_eq!(f[8 * STEP_CONDITION + 13 + 1], 1.0);
        assert_eq!(f.iter().sum::<f64>(), 8.0 * 2.0 + 8.0 * 4.0);
    }

    #[test]
    fn harden_probabilities() {
        let mut probs = vec![0.0; 16 * CHANNELS];
        for t in 0..16 {
            probs[t * CHANNELS + 16] = 0.9;
            probs[t * CHANNELS + 20] = 0.1;
            probs[t * CHANNELS + CATEGORIES] = if t % 4 == 0 { 0.8 } else { 0.2 };
        }
        let g = MelodyGrid::harden(&probs).unwrap();
        assert_eq!(g.notes().len(), 4);
        assert!(g.validate().is_ok());
    }
}
