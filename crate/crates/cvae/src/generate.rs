//! Melody generation over grammar plans and reharmonization of existing songs.

use rand::Rng;
use tunegram_core::encoding::{
    decode_melody, ChordSlot, ConditionVector, MelodyGrid, TrainingSegment, GRID_MEASURE_BEATS, SLOTS_PER_MEASURE,
};
use tunegram_core::grammar::{MotifLatentAssignment, SectionPlan};
use tunegram_core::harmony::{PitchClassSet, Qualities};
use tunegram_core::midi::Tempo;
use tunegram_core::pipeline::{extract_song, AnalysisOptions};
use tunegram_core::tonality::Mode;
use tunegram_core::{Beat, NoteEvent, PitchClass, Song, Track};

use crate::model::{sample, CvaeModel};
use crate::CvaeError;

pub const MELODY_VELOCITY: u8 = 96;
pub const CHORD_VELOCITY: u8 = 64;
const MELODY_PROGRAM: u8 = 73;
const TICKS_PER_QUARTER: u16 = 480;
const MICROS_PER_QUARTER: u32 = 500_000;

/// Diatonic triad slot on a 1-based degree of `mode`.
pub fn diatonic_slot(degree: u8, mode: Mode) -> ChordSlot {
    let intervals = mode.triad_intervals(usize::from(degree - 1));
    ChordSlot {
        degree: Some(degree),
        qualities: Qualities::from_intervals(PitchClassSet::from_pitches(intervals)),
    }
}

fn beats(n: usize) -> Beat {
    Beat::from_integer(n as i64)
}

/// Block triad for a slot, root in the octave from C3.
fn block_chord(slot: &ChordSlot, tonic: PitchClass, mode: Mode, onset: Beat, duration: Beat, out: &mut Vec<NoteEvent>) {
    let Some(degree) = slot.degree else { return };
    let step = usize::from(degree - 1);
    let root = 48 + (tonic + mode.offset_of_step(step)) % 12;
    for i in mode.triad_intervals(step) {
        out.push(NoteEvent {
            pitch: root + i,
            onset,
            duration,
            velocity: CHORD_VELOCITY,
            channel: 1,
            track_index: 1,
        });
    }
}

/// Renders half-measure slots from `start`, merging repeated slots.
fn chord_notes(slots: &[ChordSlot], tonic: PitchClass, mode: Mode, start: Beat, out: &mut Vec<NoteEvent>) {
    let half = Beat::new(GRID_MEASURE_BEATS, SLOTS_PER_MEASURE as i64);
    let mut i = 0;
    while i < slots.len() {
        let mut j = i + 1;
        while j < slots.len() && slots[j] == slots[i] {
            j += 1;
        }
        block_chord(&slots[i], tonic, mode, start + half * beats(i), half * beats(j - i), out);
        i = j;
    }
}

fn place(grid: &MelodyGrid, reference: i32, start: Beat, end: Beat, out: &mut Vec<NoteEvent>) {
    for mut n in decode_melody(grid, reference, MELODY_VELOCITY) {
        n.onset += start;
        if n.onset >= end {
            continue;
        }
        if n.end() > end {
            n.duration = end - n.onset;
        }
        out.push(n);
    }
}

fn assemble(melody: Vec<NoteEvent>, chords: Vec<NoteEvent>) -> Song {
    let mut lead = Track::new("Melody", MELODY_PROGRAM, 0);
    lead.notes = melody;
    let mut comp = Track::new("Chords", 0, 1);
    comp.notes = chords;
    let mut song = Song::new(TICKS_PER_QUARTER, vec![lead, comp], 4, 4);
    song.tempos = vec![Tempo {
        start: Beat::from_integer(0),
        micros_per_quarter: MICROS_PER_QUARTER,
    }];
    song
}

/// Decodes each section of `plan` from its latent and lays the sections end
/// to end in 4/4. Sections longer than the model's window are decoded in
/// consecutive windows with the same latent; a shorter section uses the
/// start of a window whose progression repeats the section's.
pub fn generate(
    model: &CvaeModel,
    plan: &SectionPlan,
    latents: &MotifLatentAssignment,
    tonic: PitchClass,
) -> Result<Song, CvaeError> {
    if latents.sections.len() != plan.sections.len() {
        return Err(CvaeError::Shape(format!(
            "{} latents for {} sections",
            latents.sections.len(),
            plan.sections.len()
        )));
    }
    let window = model.config.measures;
    let reference = 60 + i32::from(tonic);
    let (mut melody, mut chords) = (Vec::new(), Vec::new());
    let mut offset = Beat::from_integer(0);
    for (i, (section, z)) in plan.sections.iter().zip(&latents.sections).enumerate() {
        let length = section.measures() * Beat::from_integer(GRID_MEASURE_BEATS);
        let windows = section.measures().ceil().to_integer().max(1) as usize;
        let windows = windows.div_ceil(window);
        let frame = section.frame(windows * window);
        let per = window * SLOTS_PER_MEASURE;
        for w in 0..windows {
            let slots = frame[w * per..(w + 1) * per].to_vec();
            let cond = ConditionVector::new(slots, section.mode).map_err(|source| CvaeError::Section { section: i, source })?;
            let grid = model.decode(z, &cond)?.harden();
            let start = offset + beats(w * window) * Beat::from_integer(GRID_MEASURE_BEATS);
            place(&grid, reference, start, offset + length, &mut melody);
        }
        let slots_in_section = (section.measures() * beats(SLOTS_PER_MEASURE)).ceil().to_integer() as usize;
        chord_notes(&frame[..slots_in_section.min(frame.len())], tonic, section.mode, offset, &mut chords);
        offset += length;
    }
    Ok(assemble(melody, chords))
}

/// What to change when reharmonizing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reharmonization {
    /// Half-measure slots, repeated to fill each segment; `None` keeps the
    /// original progression (re-voiced for a new mode).
    pub slots: Option<Vec<ChordSlot>>,
    /// `None` keeps each segment's own mode.
    pub mode: Option<Mode>,
    /// Sample the latent instead of taking the posterior mean.
    pub sample_latent: bool,
}

impl Reharmonization {
    /// The condition a segment is decoded under.
    pub fn condition(&self, original: &ConditionVector) -> Result<ConditionVector, CvaeError> {
        let mode = self.mode.unwrap_or(original.mode);
        let n = original.slots.len();
        let slots = match &self.slots {
            Some(s) if s.is_empty() => return Err(CvaeError::Shape("empty chord progression".into())),
            Some(s) => s.iter().cycle().take(n).copied().collect(),
            None if mode == original.mode => original.slots.clone(),
            None => original
                .slots
                .iter()
                .map(|s| s.degree.map_or(ChordSlot::silent(), |d| diatonic_slot(d, mode)))
                .collect(),
        };
        Ok(ConditionVector::new(slots, mode)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReharmonizedSegment {
    pub id: String,
    pub start_measure: usize,
    pub tonic: PitchClass,
    pub reference_pitch: i32,
    pub condition: ConditionVector,
    pub grid: MelodyGrid,
}

/// Encodes a segment under its own chords and decodes it under the new ones.
pub fn reharmonize_segment<R: Rng + ?Sized>(
    model: &CvaeModel,
    segment: &TrainingSegment,
    target: &Reharmonization,
    rng: &mut R,
) -> Result<ReharmonizedSegment, CvaeError> {
    let dist = model.encode(&segment.grid, &segment.condition)?;
    let z = if target.sample_latent { sample(&dist, rng) } else { dist.mean };
    let condition = target.condition(&segment.condition)?;
    let grid = model.decode(&z, &condition)?.harden();
    Ok(ReharmonizedSegment {
        id: segment.id.clone(),
        start_measure: segment.start_measure,
        tonic: segment.tonic,
        reference_pitch: segment.reference_pitch,
        condition,
        grid,
    })
}

/// Reharmonizes the non-overlapping segments of a song (earliest first) and
/// renders them with the new chords.
pub fn reharmonize<R: Rng + ?Sized>(
    model: &CvaeModel,
    song: &Song,
    source: &str,
    analysis: &AnalysisOptions,
    target: &Reharmonization,
    rng: &mut R,
) -> Result<(Song, Vec<ReharmonizedSegment>), CvaeError> {
    let outcome = extract_song(song, source, analysis).map_err(|e| CvaeError::NoSegments(e.to_string()))?;
    if outcome.segments.is_empty() {
        let reasons: Vec<String> = outcome.drops.iter().map(|(r, n)| format!("{r}: {n}")).collect();
        return Err(CvaeError::NoSegments(if reasons.is_empty() {
            "song is shorter than one window".into()
        } else {
            format!("every window was dropped ({})", reasons.join(", "))
        }));
    }
    let mut segments = outcome.segments;
    segments.sort_by_key(|s| s.start_measure);
    let (mut melody, mut chords, mut done) = (Vec::new(), Vec::new(), Vec::new());
    let mut next_free = 0;
    for seg in &segments {
        if seg.start_measure < next_free {
            continue;
        }
        let out = reharmonize_segment(model, seg, target, rng)?;
        let measures = out.grid.measures();
        let start = beats(seg.start_measure) * Beat::from_integer(GRID_MEASURE_BEATS);
        let end = start + beats(measures) * Beat::from_integer(GRID_MEASURE_BEATS);
        place(&out.grid, out.reference_pitch, start, end, &mut melody);
        chord_notes(&out.condition.slots, out.tonic, out.condition.mode, start, &mut chords);
        next_free = seg.start_measure + measures;
        done.push(out);
    }
    Ok((assemble(melody, chords), done))
}
