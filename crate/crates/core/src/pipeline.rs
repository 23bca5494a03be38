//! Whole-song analysis: melody track, chord labels, key and training windows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{extract_segments, ExtractOptions, ExtractOutcome};
use crate::harmony::{BinLength, BinPolicy, ChordDetector, ChordLabel, HarmonyError};
use crate::melody::{identify_melody_with, InstrumentTable, MelodyError, MelodySelection, RubricWeights};
use crate::midi::{NoteEvent, Song};
use crate::tonality::{estimate_key, KeyEstimate};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Melody(#[from] MelodyError),
    #[error(transparent)]
    Harmony(#[from] HarmonyError),
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub instruments: InstrumentTable,
    pub weights: RubricWeights,
    pub detector: ChordDetector,
    pub bins: BinPolicy,
    /// Leave the melody track out of chord detection.
    pub chords_without_melody: bool,
    pub extract: ExtractOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            instruments: InstrumentTable::default(),
            weights: RubricWeights::default(),
            detector: ChordDetector::default(),
            bins: BinPolicy::Fixed(BinLength::Half),
            chords_without_melody: false,
            extract: ExtractOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongAnalysis {
    pub melody: MelodySelection,
    pub chords: Vec<ChordLabel>,
    /// Key of the whole song; `None` when only percussion sounds.
    pub key: Option<KeyEstimate>,
}

pub fn analyze(song: &Song, opts: &AnalysisOptions) -> Result<SongAnalysis, AnalysisError> {
    let melody = identify_melody_with(song, &opts.instruments, &opts.weights)?;
    let chords = chord_labels(song, melody.track, opts)?;
    let pitched: Vec<NoteEvent> = song.notes().filter(|n| !n.is_percussion()).cloned().collect();
    let key = estimate_key(&pitched).ok();
    Ok(SongAnalysis { melody, chords, key })
}

fn chord_labels(song: &Song, melody: usize, opts: &AnalysisOptions) -> Result<Vec<ChordLabel>, HarmonyError> {
    let tracks: Option<Vec<usize>> = opts.chords_without_melody.then(|| {
        (0..song.tracks.len())
            .filter(|&i| i != melody && !song.tracks[i].is_percussion())
            .collect()
    });
    opts.detector.detect(song, tracks.as_deref(), opts.bins)
}

/// Analyzes a song and cuts it into training segments.
pub fn extract_song(song: &Song, source: &str, opts: &AnalysisOptions) -> Result<ExtractOutcome, AnalysisError> {
    let analysis = analyze(song, opts)?;
    Ok(extract_segments(song, source, analysis.melody.track, &analysis.chords, &opts.extract))
}
