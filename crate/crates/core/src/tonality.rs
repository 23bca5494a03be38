//! Key estimation and tonic-relative pitch offsets.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::NoteEvent;
use crate::{Beat, PitchClass};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("cannot estimate a key from an empty note list")]
    Empty,
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
}

/// The eight scale patterns available to the condition encoding, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Major,
    Dorian,
    Phrygian,
    Lydian,
    Mixolydian,
    Minor,
    Locrian,
    JazzMinor,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Major,
        Mode::Dorian,
        Mode::Phrygian,
        Mode::Lydian,
        Mode::Mixolydian,
        Mode::Minor,
        Mode::Locrian,
        Mode::JazzMinor,
    ];

    /// Semitone offsets of the seven scale degrees above the tonic.
    pub fn scale(self) -> [u8; 7] {
        match self {
            Mode::Major => [0, 2, 4, 5, 7, 9, 11],
            Mode::Dorian => [0, 2, 3, 5, 7, 9, 10],
            Mode::Phrygian => [0, 1, 3, 5, 7, 8, 10],
            Mode::Lydian => [0, 2, 4, 6, 7, 9, 11],
            Mode::Mixolydian => [0, 2, 4, 5, 7, 9, 10],
            Mode::Minor => [0, 2, 3, 5, 7, 8, 10],
            Mode::Locrian => [0, 1, 3, 5, 6, 8, 10],
            Mode::JazzMinor => [0, 2, 3, 5, 7, 9, 11],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Zero-based scale step of a semitone offset from the tonic, if diatonic.
    pub fn step_of(self, offset: i32) -> Option<usize> {
        let pc = offset.rem_euclid(12) as u8;
        self.scale().iter().position(|&s| s == pc)
    }

    pub fn contains(self, offset: i32) -> bool {
        self.step_of(offset).is_some()
    }

    /// Semitone offset (0..12) of the zero-based scale step, wrapping mod 7.
    pub fn offset_of_step(self, step: usize) -> u8 {
        self.scale()[step % 7]
    }

    /// Root, third and fifth of the diatonic triad on a zero-based step, as
    /// semitones above the chord root.
    pub fn triad_intervals(self, step: usize) -> [u8; 3] {
        let root = i32::from(self.offset_of_step(step));
        let third = i32::from(self.offset_of_step(step + 2));
        let fifth = i32::from(self.offset_of_step(step + 4));
        [0, (third - root).rem_euclid(12) as u8, (fifth - root).rem_euclid(12) as u8]
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Major => "major",
            Mode::Dorian => "dorian",
            Mode::Phrygian => "phrygian",
            Mode::Lydian => "lydian",
            Mode::Mixolydian => "mixolydian",
            Mode::Minor => "minor",
            Mode::Locrian => "locrian",
            Mode::JazzMinor => "jazz-minor",
        };
        f.write_str(s)
    }
}

impl FromStr for Mode {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match norm.as_str() {
            "major" | "ionian" => Mode::Major,
            "dorian" => Mode::Dorian,
            "phrygian" => Mode::Phrygian,
            "lydian" => Mode::Lydian,
            "mixolydian" => Mode::Mixolydian,
            "minor" | "aeolian" => Mode::Minor,
            "locrian" => Mode::Locrian,
            "jazzminor" | "melodicminor" => Mode::JazzMinor,
            _ => return Err(KeyError::UnknownMode(s.to_string())),
        })
    }
}

const PITCH_NAMES: [&str; 12] = ["C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B"];

pub fn pitch_class_name(pc: PitchClass) -> &'static str {
    PITCH_NAMES[usize::from(pc % 12)]
}

/// Parses a pitch-class name such as `C`, `F#`, `Bb` or a number 0-11.
pub fn parse_pitch_class(s: &str) -> Option<PitchClass> {
    if let Ok(n) = s.parse::<u8>() {
        return (n < 12).then_some(n);
    }
    let mut chars = s.trim().chars();
    let base: i32 = match chars.next()?.to_ascii_uppercase() {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return None,
    };
    let mut pc = base;
    for c in chars {
        match c {
            '#' | '♯' => pc += 1,
            'b' | '♭' => pc -= 1,
            _ => return None,
        }
    }
    Some(pc.rem_euclid(12) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyEstimate {
    pub tonic: PitchClass,
    pub mode: Mode,
    /// Relative margin of the winning scale over the best scale with a
    /// different pitch-class set.
    pub confidence: f64,
}

impl fmt::Display for KeyEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", pitch_class_name(self.tonic), self.mode)
    }
}

fn scale_mask(tonic: PitchClass, mode: Mode) -> u16 {
    mode.scale()
        .iter()
        .fold(0u16, |m, &s| m | 1 << ((tonic + s) % 12))
}

fn ratio_f64(r: Beat) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

struct Candidate {
    tonic: PitchClass,
    mode: Mode,
    membership: Beat,
    mask: u16,
}

/// Estimates tonic and mode by correlating the duration-weighted pitch-class
/// histogram with binary scale-membership profiles.
///
/// Every profile has seven members, so the normalized correlation orders
/// candidates exactly like the summed histogram weight inside the scale;
/// that sum is compared in exact arithmetic. Relative modes share a pitch
/// set, so ties are broken by tonic salience: weight of the tonic triad,
/// then of the tonic alone, then whether the tonic is the lowest, first or last note, then the
/// histogram read upward from the tonic. These rules commute with
/// transposition. Only fully symmetric inputs fall through to the lower
/// tonic and then the mode order.
pub fn estimate_key(notes: &[NoteEvent]) -> Result<KeyEstimate, KeyError> {
    if notes.is_empty() {
        return Err(KeyError::Empty);
    }
    let mut hist = [Beat::from_integer(0); 12];
    for n in notes {
        hist[usize::from(n.pitch_class())] += n.duration;
    }
    let lowest = notes.iter().map(|n| n.pitch).min().expect("nonempty") % 12;
    let first = notes
        .iter()
        .min_by(|a, b| (a.onset, a.pitch).cmp(&(b.onset, b.pitch)))
        .expect("nonempty")
        .pitch_class();
    let last = notes
        .iter()
        .max_by(|a, b| (a.end(), b.pitch).cmp(&(b.end(), a.pitch)))
        .expect("nonempty")
        .pitch_class();

    let mut candidates: Vec<Candidate> = Vec::with_capacity(96);
    for tonic in 0..12u8 {
        for mode in Mode::ALL {
            let membership = mode
                .scale()
                .iter()
                .map(|&s| hist[usize::from((tonic + s) % 12)])
                .sum();
            candidates.push(Candidate {
                tonic,
                mode,
                membership,
                mask: scale_mask(tonic, mode),
            });
        }
    }

    let triad_weight = |c: &Candidate| -> Beat {
        c.mode
            .triad_intervals(0)
            .iter()
            .map(|&i| hist[usize::from((c.tonic + i) % 12)])
            .sum()
    };
    let rotated = |t: PitchClass| -> [Beat; 12] { std::array::from_fn(|i| hist[(usize::from(t) + i) % 12]) };
    let rank = |a: &Candidate, b: &Candidate| -> Ordering {
        b.membership
            .cmp(&a.membership)
            .then_with(|| triad_weight(b).cmp(&triad_weight(a)))
            .then_with(|| hist[usize::from(b.tonic)].cmp(&hist[usize::from(a.tonic)]))
            .then_with(|| (b.tonic == lowest).cmp(&(a.tonic == lowest)))
            .then_with(|| (b.tonic == first).cmp(&(a.tonic == first)))
            .then_with(|| (b.tonic == last).cmp(&(a.tonic == last)))
            .then_with(|| rotated(b.tonic).cmp(&rotated(a.tonic)))
            .then_with(|| a.tonic.cmp(&b.tonic))
            .then_with(|| a.mode.cmp(&b.mode))
    };
    candidates.sort_by(rank);
    let best = &candidates[0];

    let norm = hist.iter().map(|&h| ratio_f64(h).powi(2)).sum::<f64>().sqrt() * 7f64.sqrt();
    let score = |c: &Candidate| if norm > 0.0 { ratio_f64(c.membership) / norm } else { 0.0 };
    let best_score = score(best);
    let runner_up = candidates
        .iter()
        .filter(|c| c.mask != best.mask)
        .map(score)
        .fold(0.0f64, f64::max);
    let confidence = if best_score > 0.0 {
        ((best_score - runner_up) / best_score).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(KeyEstimate {
        tonic: best.tonic,
        mode: best.mode,
        confidence,
    })
}

/// Melody pitches expressed relative to one tonic reference pitch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MelodyOffsets {
    /// MIDI pitch of the tonic reference; `pitch = reference + offset` before clamping.
    pub reference: i32,
    pub offsets: Vec<i32>,
    /// Number of notes moved by whole octaves into `[-16, 16]`.
    pub clamped: usize,
}

pub const MAX_OFFSET: i32 = 16;

/// Picks the tonic octave nearest the median pitch and expresses each note
/// as a signed offset from it, folding outliers into `[-16, 16]` by octaves.
pub fn melody_offsets(notes: &[NoteEvent], tonic: PitchClass) -> MelodyOffsets {
    let reference = reference_pitch(notes.iter().map(|n| n.pitch), tonic);
    let mut clamped = 0;
    let offsets = notes
        .iter()
        .map(|n| {
            let (off, moved) = fold_offset(i32::from(n.pitch) - reference);
            clamped += usize::from(moved);
            off
        })
        .collect();
    MelodyOffsets {
        reference,
        offsets,
        clamped,
    }
}

/// Tonic pitch (MIDI number) in the octave closest to the median of `pitches`.
pub fn reference_pitch(pitches: impl Iterator<Item = u8>, tonic: PitchClass) -> i32 {
    let mut sorted: Vec<i32> = pitches.map(i32::from).collect();
    sorted.sort_unstable();
    let median = sorted.get(sorted.len() / 2).copied().unwrap_or(60);
    let tonic = i32::from(tonic % 12);
    let k = ((median - tonic) as f64 / 12.0).round() as i32;
    tonic + 12 * k
}

/// Moves an offset into `[-16, 16]` by octaves; reports whether it moved.
pub fn fold_offset(mut off: i32) -> (i32, bool) {
    let mut moved = false;
    while off > MAX_OFFSET {
        off -= 12;
        moved = true;
    }
    while off < -MAX_OFFSET {
        off += 12;
        moved = true;
    }
    (off, moved)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(pitches: &[u8]) -> Vec<NoteEvent> {
        pitches
            .iter()
            .enumerate()
            .map(|(i, &p)| NoteEvent {
                pitch: p,
                onset: Beat::from_integer(i as i64),
                duration: Beat::from_integer(1),
                velocity: 90,
                channel: 0,
                track_index: 0,
            })
            .collect()
    }

    #[test]
    fn eight_modes_with_seven_degrees() {
        assert_eq!(Mode::ALL.len(), 8);
        for m in Mode::ALL {
            let s = m.scale();
            assert_eq!(s[0], 0);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn c_major_scale() {
        let k = estimate_key(&seq(&[60, 62, 64, 65, 67, 69, 71])).unwrap();
        assert_eq!((k.tonic, k.mode), (0, Mode::Major));
        let k = estimate_key(&seq(&[67, 69, 71, 72, 74, 76, 78])).unwrap();
        assert_eq!((k.tonic, k.mode), (7, Mode::Major));
    }

    #[test]
    fn repeated_single_pitch() {
        let k = estimate_key(&seq(&[69, 69, 69])).unwrap();
        assert_eq!(k.tonic, 9);
        assert!(k.confidence < 0.1);
        let clear = estimate_key(&seq(&[60, 62, 64, 65, 67, 69, 71, 72])).unwrap();
        assert!(clear.confidence > k.confidence);
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(estimate_key(&[]), Err(KeyError::Empty));
    }

    #[test]
    fn offsets_tonic_only_and_two_octaves() {
        let o = melody_offsets(&seq(&[62, 62, 74]), 2);
        assert_eq!(o.offsets, vec![0, 0, 12]);
        let span: Vec<u8> = (48..=72).collect();
        let o = melody_offsets(&seq(&span), 0);
        assert_eq!(o.reference, 60);
        assert!(o.offsets.iter().all(|x| (-12..=12).contains(x)));
        assert_eq!(o.clamped, 0);
    }

    #[test]
    fn offsets_three_octaves_fold() {
        let o = melody_offsets(&seq(&[36, 48, 60, 60, 72, 84]), 0);
        assert_eq!(o.reference, 60);
        assert_eq!(o.clamped, 2);
        assert!(o.offsets.iter().all(|x| (-16..=16).contains(x)));
        for (off, p) in o.offsets.iter().zip([36, 48, 60, 60, 72, 84]) {
            assert_eq!((o.reference + off).rem_euclid(12), p % 12);
        }
    }

    #[test]
    fn triads() {
        assert_eq!(Mode::Major.triad_intervals(0), [0, 4, 7]);
        assert_eq!(Mode::Major.triad_intervals(1), [0, 3, 7]);
        assert_eq!(Mode::Major.triad_intervals(6), [0, 3, 6]);
        assert_eq!(Mode::JazzMinor.triad_intervals(2), [0, 4, 8]);
    }

    #[test]
    fn pitch_names() {
        assert_eq!(parse_pitch_class("Bb"), Some(10));
        assert_eq!(parse_pitch_class("c#"), Some(1));
        assert_eq!(parse_pitch_class("H"), None);
        assert_eq!("Jazz Minor".parse::<Mode>().unwrap(), Mode::JazzMinor);
    }
}
