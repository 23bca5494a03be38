//! Seeded synthetic songs for tests, demos and smoke datasets.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::midi::{NoteEvent, Song, Track, PERCUSSION_CHANNEL};
use crate::tonality::Mode;
use crate::{Beat, PitchClass};

fn note(pitch: u8, onset: Beat, duration: Beat, velocity: u8, channel: u8) -> NoteEvent {
    NoteEvent {
        pitch,
        onset,
        duration,
        velocity,
        channel,
        track_index: 0,
    }
}

fn beats(n: i64, d: i64) -> Beat {
    Beat::new(n, d)
}

/// MIDI pitches of `mode` on `tonic` within `[low, high]`.
pub fn scale_pitches(tonic: PitchClass, mode: Mode, low: u8, high: u8) -> Vec<u8> {
    (low..=high)
        .filter(|p| mode.contains(i32::from(*p) - i32::from(tonic)))
        .collect()
}

/// Pitch classes of the diatonic triad on a 1-based degree.
pub fn triad(tonic: PitchClass, mode: Mode, degree: u8) -> [u8; 3] {
    let step = usize::from(degree - 1);
    let root = (tonic + mode.offset_of_step(step)) % 12;
    mode.triad_intervals(step).map(|i| (root + i) % 12)
}

/// Root-position voicing of a triad with the root in `[base, base + 12)`.
fn voice(pcs: [u8; 3], base: u8) -> [u8; 3] {
    let root = base + (pcs[0] + 12 - base % 12) % 12;
    let mut out = [root; 3];
    for i in 1..3 {
        let mut p = root + (pcs[i] + 12 - pcs[0]) % 12;
        if p <= out[i - 1] {
            p += 12;
        }
        out[i] = p;
    }
    out
}

/// Monophonic line over `measures` 4/4 measures: sixteenth-aligned notes
/// from the scale with occasional rests, leaning on chord tones at chord changes.
fn melody_line(
    rng: &mut ChaCha8Rng,
    scale: &[u8],
    chords: &[[u8; 3]],
    measures: usize,
    rest_probability: f64,
) -> Vec<NoteEvent> {
    let durations = [beats(1, 2), beats(1, 1), beats(1, 1), beats(3, 2), beats(2, 1)];
    let end = Beat::from_integer(4 * measures as i64);
    let slot_len = Beat::from_integer(4 * measures as i64) / Beat::from_integer(chords.len().max(1) as i64);
    let mut notes = Vec::new();
    let mut t = Beat::from_integer(0);
    let mut idx = scale.len() / 2;
    while t < end {
        let d = *durations.choose(rng).expect("non-empty").min(&(end - t));
        if rng.random::<f64>() < rest_probability {
            t += d;
            continue;
        }
        let slot = ((t / slot_len).to_integer() as usize).min(chords.len().saturating_sub(1));
        let on_change = chords.len() > 1 && (t / slot_len).is_integer();
        if on_change {
            let chord = chords[slot];
            let near: Vec<usize> = (0..scale.len())
                .filter(|&i| chord.contains(&(scale[i] % 12)) && i.abs_diff(idx) <= 4)
                .collect();
            if let Some(&i) = near.choose(rng) {
                idx = i;
            }
        } else {
            let step: i64 = rng.random_range(-2..=2);
            idx = (idx as i64 + step).clamp(0, scale.len() as i64 - 1) as usize;
        }
        notes.push(note(scale[idx], t, d, 90, 0));
        t += d;
    }
    notes
}

/// A 4/4 song with a melody track over a block-chord accompaniment.
///
/// `progression` gives one 1-based degree per half measure and is repeated
/// to cover `measures` measures.
pub fn pop_song(tonic: PitchClass, mode: Mode, progression: &[u8], measures: usize, seed: u64) -> Song {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = measures * 2;
    let chords: Vec<[u8; 3]> = (0..slots)
        .map(|i| triad(tonic, mode, progression[i % progression.len()]))
        .collect();
    let scale = scale_pitches(tonic, mode, 62, 79);
    let mut lead = Track::new("Melody", 73, 0);
    lead.notes = melody_line(&mut rng, &scale, &chords, measures, 0.15);

    let mut piano = Track::new("Piano", 0, 1);
    for (i, c) in chords.iter().enumerate() {
        for p in voice(*c, 48) {
            piano.notes.push(note(p, beats(2 * i as i64, 1), beats(2, 1), 70, 1));
        }
    }
    let mut song = Song::new(480, vec![lead, piano], 4, 4);
    song.end = Beat::from_integer(4 * measures as i64);
    song.normalize();
    song
}

/// A four-track song with a known melody track.
#[derive(Debug, Clone)]
pub struct BandSong {
    pub song: Song,
    pub melody: usize,
}

const MELODY_NAMES: [(&str, u8); 10] = [
    ("Melody", 73),
    ("Lead Vocal", 52),
    ("Flute", 73),
    ("Violin", 40),
    ("Trumpet", 56),
    ("Track 2", 73),
    ("Sax Solo", 65),
    ("", 65),
    ("Clarinet", 71),
    ("Piano RH", 0),
];
const ACCOMPANIMENT_NAMES: [(&str, u8); 5] = [("Piano", 0), ("Strings", 48), ("Guitar", 25), ("Rhodes", 4), ("Chords", 0)];
const BASS_NAMES: [(&str, u8); 3] = [("Bass", 33), ("Fretless", 35), ("Low End", 32)];

/// Melody, accompaniment, bass and drums in shuffled track order. Names,
/// programs, densities and registers vary with the seed.
pub fn band_song(seed: u64, measures: usize) -> BandSong {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tonic: PitchClass = rng.random_range(0..12);
    let mode = if rng.random_bool(0.5) { Mode::Major } else { Mode::Minor };
    let degrees: Vec<u8> = (0..measures).map(|_| [1, 4, 5, 6, 2][rng.random_range(0..5)]).collect();
    let chords: Vec<[u8; 3]> = degrees.iter().map(|&d| triad(tonic, mode, d)).collect();

    let (mname, mprog) = MELODY_NAMES[(seed % MELODY_NAMES.len() as u64) as usize];
    let low = rng.random_range(58..64);
    let scale = scale_pitches(tonic, mode, low, low + 18);
    let rest = rng.random_range(0.15..0.35);
    let mut melody = Track::new(mname, mprog, 0);
    melody.notes = melody_line(&mut rng, &scale, &chords, measures, rest);

    let (aname, aprog) = ACCOMPANIMENT_NAMES[rng.random_range(0..ACCOMPANIMENT_NAMES.len())];
    let mut acc = Track::new(aname, aprog, 1);
    let arpeggiate = rng.random_bool(0.5);
    for (m, c) in chords.iter().enumerate() {
        let v = voice(*c, 48);
        let start = Beat::from_integer(4 * m as i64);
        if arpeggiate {
            for k in 0..8 {
                acc.notes.push(note(v[[0, 1, 2, 1][k % 4]], start + beats(k as i64, 2), beats(1, 2), 60, 1));
            }
        } else {
            for p in v {
                acc.notes.push(note(p, start, beats(4, 1), 60, 1));
            }
        }
    }

    let (bname, bprog) = BASS_NAMES[rng.random_range(0..BASS_NAMES.len())];
    let mut bass = Track::new(bname, bprog, 2);
    for (m, c) in chords.iter().enumerate() {
        let root = voice(*c, 36)[0];
        for k in 0..4 {
            let p = if k == 2 { root + 7 } else { root };
            bass.notes.push(note(p, Beat::from_integer(4 * m as i64 + k), beats(1, 1), 80, 2));
        }
    }

    let mut drums = Track::new("Drums", 0, PERCUSSION_CHANNEL);
    for b in 0..4 * measures as i64 {
        drums.notes.push(note(if b % 2 == 0 { 36 } else { 38 }, Beat::from_integer(b), beats(1, 4), 100, PERCUSSION_CHANNEL));
        drums.notes.push(note(42, Beat::from_integer(b) + beats(1, 2), beats(1, 4), 70, PERCUSSION_CHANNEL));
    }

    let mut tracks = vec![(true, melody), (false, acc), (false, bass), (false, drums)];
    tracks.shuffle(&mut rng);
    let melody = tracks.iter().position(|(m, _)| *m).expect("melody present");
    let mut song = Song::new(480, tracks.into_iter().map(|(_, t)| t).collect(), 4, 4);
    song.end = Beat::from_integer(4 * measures as i64);
    song.normalize();
    BandSong { song, melody }
}

/// Four 4/4 measures: a descending-fifths jazz turnaround, two chords per
/// measure, ending on the altered dominant voiced A, G, B♭, C♯, E.
pub fn turnaround() -> Song {
    let voicings: [&[u8]; 8] = [
        &[45, 52, 55, 60],     // Am7
        &[50, 57, 60, 65],     // Dm7
        &[43, 53, 59, 62],     // G7
        &[48, 52, 55, 59],     // Cmaj7
        &[41, 52, 57, 60],     // Fmaj7
        &[47, 50, 53, 57],     // Bm7b5
        &[40, 50, 56, 59],     // E7
        &[45, 55, 58, 61, 64], // A, G, Bb, C#, E
    ];
    let mut comp = Track::new("Piano", 0, 1);
    for (i, v) in voicings.iter().enumerate() {
        for &p in *v {
            comp.notes.push(note(p, beats(2 * i as i64, 1), beats(2, 1), 80, 1));
        }
    }
    let mut lead = Track::new("Vocal", 52, 0);
    let line: [(u8, (i64, i64), (i64, i64)); 11] = [
        (72, (0, 1), (1, 1)),
        (71, (1, 1), (1, 1)),
        (69, (2, 1), (1, 1)),
        (67, (3, 1), (1, 1)),
        (65, (4, 1), (3, 1)),
        (67, (7, 1), (1, 1)),
        (69, (8, 1), (2, 1)),
        (72, (10, 1), (4, 1)),
        (71, (12, 1), (2, 1)),
        (69, (14, 1), (1, 1)),
        (67, (15, 1), (1, 2)),
    ];
    for (p, on, d) in line {
        lead.notes.push(note(p, beats(on.0, on.1), beats(d.0, d.1), 80, 0));
    }
    lead.notes.push(note(65, beats(31, 2), beats(1, 2), 80, 0));
    Song::new(480, vec![lead, comp], 4, 4)
}
