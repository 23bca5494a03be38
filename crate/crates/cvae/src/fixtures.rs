//! Small hand-built datasets for smoke training and sanity checks.

use tunegram_core::encoding::{encode_melody, ChordSlot, ConditionVector, QuantizedNote, TrainingSegment, MEASURES};
use tunegram_core::tonality::Mode;

use crate::generate::diatonic_slot;

/// Chord degree per half-measure over eight measures.
pub const TOY_PROGRESSION: [u8; 16] = [1, 1, 4, 4, 5, 5, 1, 1, 6, 6, 4, 4, 2, 5, 1, 1];

/// Two melodic contours as (scale step, octave, sixteenth-note length);
/// each sums to 128 steps.
const CONTOURS: [&[(usize, i32, usize)]; 2] = [
    &[
        (0, 0, 4), (2, 0, 4), (4, 0, 8), (3, 0, 4), (5, 0, 4), (3, 0, 8),
        (4, 0, 4), (6, 0, 4), (1, 1, 8), (0, 1, 8), (4, 0, 8),
        (5, 0, 4), (4, 0, 4), (2, 0, 8), (3, 0, 4), (1, 0, 4), (0, 0, 8),
        (2, 0, 8), (3, 0, 4), (4, 0, 4), (0, 0, 16),
    ],
    &[
        (4, 0, 2), (4, 0, 2), (5, 0, 4), (4, 0, 4), (2, 0, 4), (0, 1, 8), (5, 0, 8),
        (6, 0, 2), (5, 0, 2), (4, 0, 4), (1, 0, 8), (2, 0, 8), (4, 0, 8),
        (5, 0, 2), (5, 0, 2), (3, 0, 4), (2, 0, 8), (1, 0, 4), (6, -1, 4), (1, 0, 8),
        (4, 0, 4), (2, 0, 4), (0, 0, 8), (0, 0, 16),
    ],
];

/// Melody of `contour` realized in `mode`, as tonic-relative notes.
pub fn toy_melody(contour: usize, mode: Mode) -> Vec<QuantizedNote> {
    let scale = mode.scale();
    let mut t = 0;
    CONTOURS[contour]
        .iter()
        .map(|&(step, octave, len)| {
            let n = QuantizedNote {
                offset: i32::from(scale[step]) + 12 * octave,
                start: t,
                len,
            };
            t += len;
            n
        })
        .collect()
}

pub fn toy_condition(mode: Mode) -> ConditionVector {
    let slots: Vec<ChordSlot> = TOY_PROGRESSION.iter().map(|&d| diatonic_slot(d, mode)).collect();
    ConditionVector::new(slots, mode).expect("sixteen diatonic slots")
}

/// Four eight-measure segments: both contours in C major and C minor.
pub fn toy_dataset() -> Vec<TrainingSegment> {
    let mut out = Vec::new();
    for contour in 0..CONTOURS.len() {
        for mode in [Mode::Major, Mode::Minor] {
            let grid = encode_melody(&toy_melody(contour, mode), MEASURES).expect("toy melodies fit the grid").grid;
            out.push(TrainingSegment {
                id: format!("toy{contour}-{mode:?}@0").to_lowercase(),
                source: format!("toy{contour}"),
                start_measure: 0,
                tonic: 0,
                mode,
                key_confidence: 1.0,
                reference_pitch: 60,
                grid,
                condition: toy_condition(mode),
            });
        }
    }
    out
}
