//! Symbolic music analysis for melody generation.
//!
//! The pipeline reads Standard MIDI Files, picks the melody track, labels
//! chords per bin, estimates the key of each eight-measure window and encodes
//! the result as a sixteenth-note grid plus a chord/mode condition vector. A
//! small chord grammar expands song structures into section plans that the
//! generator conditions on.

pub mod encoding;
pub mod grammar;
pub mod harmony;
pub mod melody;
pub mod midi;
pub mod pipeline;
pub mod synth;
pub mod tonality;

/// Time in quarter-note beats, kept exact.
pub type Beat = num_rational::Ratio<i64>;

/// Pitch class, 0 = C through 11 = B.
pub type PitchClass = u8;

pub use midi::{parse_smf, write_smf, MidiError, NoteEvent, Song, TimeSignatureSpan, Track};
