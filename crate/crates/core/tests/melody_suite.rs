use tunegram_core::melody::{identify_melody, pitch_entropy, InstrumentCategory};
use tunegram_core::synth::band_song;
use tunegram_core::{Beat, NoteEvent};

fn note(pitch: u8, onset: i64) -> NoteEvent {
    NoteEvent {
        pitch,
        onset: Beat::from_integer(onset),
        duration: Beat::from_integer(1),
        velocity: 80,
        channel: 0,
        track_index: 0,
    }
}

#[test]
fn synthetic_band_songs() {
    let mut correct = 0;
    let mut misses = Vec::new();
    for seed in 0..50 {
        let s = band_song(seed, 16);
        let picked = identify_melody(&s.song).unwrap();
        if picked.track == s.melody {
            correct += 1;
        } else {
            misses.push(seed);
        }
        let drums = s.song.tracks.iter().position(|t| t.name == "Drums").unwrap();
        assert_eq!(picked.scores[drums].category, InstrumentCategory::Percussion);
    }
    assert!(correct >= 45, "accuracy {correct}/50, misses {misses:?}");
}

#[test]
fn entropy_bounds() {
    let single: Vec<NoteEvent> = (0..20).map(|i| note(60, i)).collect();
    assert_eq!(pitch_entropy(&single), 0.0);
    let uniform: Vec<NoteEvent> = (0..24).map(|i| note(60 + (i % 12) as u8, i)).collect();
    assert!((pitch_entropy(&uniform) - 12f64.ln()).abs() < 1e-9);
    let octaves: Vec<NoteEvent> = (0..12).map(|i| note(36 + 12 * (i % 4) as u8, i)).collect();
    assert_eq!(pitch_entropy(&octaves), 0.0);
}
