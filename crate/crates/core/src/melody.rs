//! Melody track identification.
//!
//! Each track gets a rubric score (instrument category, note density, pitch
//! range) plus the Shannon entropy of its pitch-class distribution. The
//! highest total wins.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{NoteEvent, Song, Track};
use crate::Beat;

const DEFAULT_INSTRUMENTS: &str = include_str!("../data/instruments.toml");

#[derive(Debug, Error)]
pub enum MelodyError {
    #[error("no non-percussion track with notes")]
    NoMelody,
    #[error("reading instrument table: {0}")]
    Io(#[from] std::io::Error),
    #[error("instrument table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstrumentCategory {
    MelodyLikely,
    AccompanimentLikely,
    Percussion,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct CategoryRules {
    #[serde(default)]
    keywords: Vec<String>,
    /// Inclusive program ranges.
    #[serde(default)]
    programs: Vec<[u8; 2]>,
}

impl CategoryRules {
    fn matches_name(&self, name: &str) -> bool {
        !name.is_empty() && self.keywords.iter().any(|k| name.contains(k.as_str()))
    }

    fn matches_program(&self, program: u8) -> bool {
        self.programs.iter().any(|[lo, hi]| (*lo..=*hi).contains(&program))
    }
}

/// Keyword and program tables deciding an [`InstrumentCategory`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstrumentTable {
    percussion: CategoryRules,
    accompaniment: CategoryRules,
    melody: CategoryRules,
}

impl Default for InstrumentTable {
    fn default() -> Self {
        Self::from_toml(DEFAULT_INSTRUMENTS).expect("bundled instrument table is valid")
    }
}

impl InstrumentTable {
    pub fn from_toml(text: &str) -> Result<Self, MelodyError> {
        let mut table: InstrumentTable =
            toml::from_str(text).map_err(|e| MelodyError::Table(e.to_string()))?;
        for rules in [&mut table.percussion, &mut table.accompaniment, &mut table.melody] {
            for k in &mut rules.keywords {
                *k = k.to_lowercase();
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, MelodyError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Categorizes a track by name (track or instrument name) and program.
    pub fn categorize(&self, name: &str, program: u8, is_channel_10: bool) -> InstrumentCategory {
        if is_channel_10 {
            return InstrumentCategory::Percussion;
        }
        let name = name.to_lowercase();
        if self.percussion.matches_name(&name) {
            InstrumentCategory::Percussion
        } else if self.accompaniment.matches_name(&name) {
            InstrumentCategory::AccompanimentLikely
        } else if self.melody.matches_name(&name) || self.melody.matches_program(program) {
            InstrumentCategory::MelodyLikely
        } else if self.percussion.matches_program(program) {
            InstrumentCategory::Percussion
        } else {
            InstrumentCategory::AccompanimentLikely
        }
    }
}

/// Categorizes with the bundled instrument table.
pub fn instrument_category(name: &str, program: u8, is_channel_10: bool) -> InstrumentCategory {
    InstrumentTable::default().categorize(name, program, is_channel_10)
}

/// Rubric bonus magnitudes and thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RubricWeights {
    pub melody_bonus: f64,
    pub accompaniment_bonus: f64,
    pub percussion_bonus: f64,
    pub density_bonus: f64,
    pub density_min: f64,
    pub density_max: f64,
    pub range_bonus: f64,
    pub range_low: u8,
    pub range_high: u8,
    /// Fraction of notes (centered) that must lie inside the range.
    pub range_coverage: f64,
}

impl Default for RubricWeights {
    fn default() -> Self {
        RubricWeights {
            melody_bonus: 2.0,
            accompaniment_bonus: 0.0,
            percussion_bonus: -100.0,
            density_bonus: 1.0,
            density_min: 0.4,
            density_max: 0.8,
            range_bonus: 1.0,
            range_low: 48,
            range_high: 84,
            range_coverage: 0.9,
        }
    }
}

impl RubricWeights {
    pub fn load(path: &Path) -> Result<Self, MelodyError> {
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| MelodyError::Table(e.to_string()))
    }
}

/// Probability of each pitch class, index 0 = C.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchClassDistribution(pub [f64; 12]);

impl PitchClassDistribution {
    /// Counts note onsets per pitch class. `None` for an empty track.
    pub fn from_notes(notes: &[NoteEvent]) -> Option<Self> {
        if notes.is_empty() {
            return None;
        }
        let mut counts = [0usize; 12];
        for n in notes {
            counts[usize::from(n.pitch_class())] += 1;
        }
        let total = notes.len() as f64;
        Some(PitchClassDistribution(counts.map(|c| c as f64 / total)))
    }

    /// Entropy in nats, with 0 ln 0 = 0.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Entropy of the onset pitch-class distribution; 0 for an empty track.
pub fn pitch_entropy(notes: &[NoteEvent]) -> f64 {
    PitchClassDistribution::from_notes(notes).map_or(0.0, |d| d.entropy())
}

/// Fraction of `song_duration` during which at least one note sounds.
pub fn note_density(notes: &[NoteEvent], song_duration: Beat) -> f64 {
    if notes.is_empty() || song_duration <= Beat::from_integer(0) {
        return 0.0;
    }
    let mut spans: Vec<(Beat, Beat)> = notes.iter().map(|n| (n.onset, n.end())).collect();
    spans.sort();
    let mut covered = Beat::from_integer(0);
    let (mut cur_start, mut cur_end) = spans[0];
    for &(s, e) in &spans[1..] {
        if s > cur_end {
            covered += cur_end - cur_start;
            cur_start = s;
            cur_end = e;
        } else if e > cur_end {
            cur_end = e;
        }
    }
    covered += cur_end - cur_start;
    let ratio = covered / song_duration;
    (*ratio.numer() as f64 / *ratio.denom() as f64).clamp(0.0, 1.0)
}

/// True when the central `coverage` fraction of pitches lies within `[low, high]`.
fn central_range_within(notes: &[NoteEvent], low: u8, high: u8, coverage: f64) -> bool {
    if notes.is_empty() {
        return false;
    }
    let mut pitches: Vec<u8> = notes.iter().map(|n| n.pitch).collect();
    pitches.sort_unstable();
    let n = pitches.len();
    let trim = ((n as f64) * (1.0 - coverage) / 2.0).floor() as usize;
    let lo = pitches[trim.min(n - 1)];
    let hi = pitches[(n - 1).saturating_sub(trim)];
    lo >= low && hi <= high
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackScore {
    pub track: usize,
    pub category: InstrumentCategory,
    pub density: f64,
    pub in_range: bool,
    pub rubric: f64,
    pub entropy: f64,
    pub total: f64,
    /// Set when the track has no notes.
    pub empty: bool,
}

fn track_name(track: &Track) -> String {
    if track.instrument.is_empty() {
        track.name.clone()
    } else {
        format!("{} {}", track.name, track.instrument)
    }
}

pub fn score_track(
    track: &Track,
    index: usize,
    song: &Song,
    table: &InstrumentTable,
    weights: &RubricWeights,
) -> TrackScore {
    let category = table.categorize(&track_name(track), track.program, track.is_percussion());
    let density = note_density(&track.notes, song.duration());
    let in_range = central_range_within(
        &track.notes,
        weights.range_low,
        weights.range_high,
        weights.range_coverage,
    );
    let mut rubric = match category {
        InstrumentCategory::MelodyLikely => weights.melody_bonus,
        InstrumentCategory::AccompanimentLikely => weights.accompaniment_bonus,
        InstrumentCategory::Percussion => weights.percussion_bonus,
    };
    if (weights.density_min..=weights.density_max).contains(&density) {
        rubric += weights.density_bonus;
    }
    if in_range {
        rubric += weights.range_bonus;
    }
    let entropy = pitch_entropy(&track.notes);
    TrackScore {
        track: index,
        category,
        density,
        in_range,
        rubric,
        entropy,
        total: rubric + entropy,
        empty: track.notes.is_empty(),
    }
}

/// Rubric part of a track's score with the bundled table and default weights.
pub fn rubric_score(track: &Track, song: &Song) -> f64 {
    score_track(track, 0, song, &InstrumentTable::default(), &RubricWeights::default()).rubric
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelodySelection {
    pub track: usize,
    pub scores: Vec<TrackScore>,
}

/// Scores every track and returns the best non-percussion track with notes.
/// Ties go to the lowest track index.
pub fn identify_melody_with(
    song: &Song,
    table: &InstrumentTable,
    weights: &RubricWeights,
) -> Result<MelodySelection, MelodyError> {
    let scores: Vec<TrackScore> = song
        .tracks
        .iter()
        .enumerate()
        .map(|(i, t)| score_track(t, i, song, table, weights))
        .collect();
    let mut best: Option<&TrackScore> = None;
    for (s, track) in scores.iter().zip(&song.tracks) {
        if s.empty || track.is_percussion() {
            continue;
        }
        if best.is_none_or(|b| s.total > b.total) {
            best = Some(s);
        }
    }
    let track = best.ok_or(MelodyError::NoMelody)?.track;
    Ok(MelodySelection { track, scores })
}

pub fn identify_melody(song: &Song) -> Result<MelodySelection, MelodyError> {
    identify_melody_with(song, &InstrumentTable::default(), &RubricWeights::default())
}
