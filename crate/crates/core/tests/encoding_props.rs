use proptest::prelude::*;
use tunegram_core::encoding::{
    decode_melody, encode_melody, extract_segments, read_dataset, ChordSlot, ConditionVector, DropReason,
    ExtractOptions, GridStep, MelodyGrid, QuantizedNote, CATEGORIES, SILENT,
};
use tunegram_core::harmony::{detect_chords, BinLength, BinPolicy};
use tunegram_core::melody::identify_melody;
use tunegram_core::midi::TimeSignatureSpan;
use tunegram_core::pipeline::{extract_song, AnalysisOptions};
use tunegram_core::synth::pop_song;
use tunegram_core::tonality::Mode;
use tunegram_core::{Beat, Song};

fn melody_strategy() -> impl Strategy<Value = Vec<QuantizedNote>> {
    prop::collection::vec((0usize..6, 1usize..12, -16i32..=16), 0..40).prop_map(|raw| {
        let mut t = 0;
        let mut notes = Vec::new();
        for (gap, len, offset) in raw {
            t += gap;
            if t >= 128 {
                break;
            }
            let len = len.min(128 - t);
            notes.push(QuantizedNote { offset, start: t, len });
            t += len;
        }
        notes
    })
}

fn grid_strategy() -> impl Strategy<Value = MelodyGrid> {
    prop::collection::vec((0u8..=SILENT, any::<bool>()), 128).prop_map(|cells| {
        let steps: Vec<GridStep> = cells
            .into_iter()
            .map(|(slot, attack)| GridStep { slot, attack: attack && slot != SILENT })
            .collect();
        let mut grid = MelodyGrid::harden(&{
            let mut probs = vec![0.0; steps.len() * (CATEGORIES + 1)];
            for (t, s) in steps.iter().enumerate() {
                probs[t * (CATEGORIES + 1) + usize::from(s.slot)] = 1.0;
                probs[t * (CATEGORIES + 1) + CATEGORIES] = if s.attack { 1.0 } else { 0.0 };
            }
            probs
        })
        .unwrap();
        grid.canonicalize();
        grid
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn monophonic_melody_round_trip(notes in melody_strategy()) {
        let enc = encode_melody(&notes, 8).unwrap();
        prop_assert!(!enc.polyphonic);
        prop_assert_eq!(enc.grid.dense_len(), 4480);
        prop_assert_eq!(enc.grid.notes(), notes.clone());

        let midi = decode_melody(&enc.grid, 60, 100);
        let back: Vec<QuantizedNote> = midi
            .iter()
            .map(|n| QuantizedNote {
                offset: i32::from(n.pitch) - 60,
                start: (n.onset * Beat::from_integer(4)).to_integer() as usize,
                len: (n.duration * Beat::from_integer(4)).to_integer() as usize,
            })
            .collect();
        prop_assert_eq!(back, notes);
    }

    #[test]
    fn grid_round_trip(grid in grid_strategy()) {
        prop_assert!(grid.validate().is_ok());
        let again = encode_melody(&grid.notes(), 8).unwrap();
        prop_assert_eq!(again.grid, grid.clone());
        let dense = grid.to_dense();
        for row in dense.chunks(CATEGORIES + 1) {
            prop_assert_eq!(row[..CATEGORIES].iter().sum::<f64>(), 1.0);
        }
    }
}

#[test]
fn dataset_lines_round_trip() {
    let song = pop_song(7, Mode::Major, &[1, 6, 4, 5], 16, 3);
    let out = extract_song(&song, "demo.mid", &AnalysisOptions::default()).unwrap();
    assert!(!out.segments.is_empty());
    let text: String = out.segments.iter().map(|s| s.to_json_line() + "\n").collect();
    let back = read_dataset(&text).unwrap();
    assert_eq!(back, out.segments);
}

#[test]
fn sixteen_measure_song_gives_three_windows() {
    let song = pop_song(2, Mode::Major, &[1, 4, 5, 1], 16, 9);
    let out = extract_song(&song, "a.mid", &AnalysisOptions::default()).unwrap();
    assert_eq!(out.segments.len(), 3, "drops {:?}", out.drops);
    let starts: Vec<usize> = out.segments.iter().map(|s| s.start_measure).collect();
    assert_eq!(starts, vec![0, 4, 8]);
    for s in &out.segments {
        assert_eq!((s.tonic, s.mode), (2, Mode::Major));
        assert_eq!(s.grid.dense_len(), 4480);
        assert_eq!(s.condition.to_dense().len(), 216);
        assert_eq!(s.condition.slots[0].degree, Some(1));
        assert_eq!(s.condition.slots[1].degree, Some(4));
        assert_eq!(s.condition.slots[2].degree, Some(5));
    }
}

fn with_meter(mut song: Song, numerator: u8, denominator: u8) -> Song {
    song.time_signatures = vec![TimeSignatureSpan {
        start: Beat::from_integer(0),
        end: Beat::from_integer(0),
        numerator,
        denominator,
    }];
    song.normalize();
    song
}

#[test]
fn triple_meter_windows_are_dropped() {
    let song = with_meter(pop_song(0, Mode::Major, &[1, 4, 5, 1], 24, 1), 3, 4);
    let out = extract_song(&song, "waltz.mid", &AnalysisOptions::default()).unwrap();
    assert!(out.segments.is_empty());
    assert!(out.drops[&DropReason::Meter] > 0);
    assert_eq!(out.drops.len(), 1);
}

#[test]
fn two_four_spans_use_four_beat_grid_measures() {
    let song = with_meter(pop_song(0, Mode::Major, &[1, 4, 5, 1], 16, 1), 2, 4);
    let out = extract_song(&song, "march.mid", &AnalysisOptions::default()).unwrap();
    assert_eq!(out.segments.len(), 3);
}

#[test]
fn sparse_and_out_of_mode_windows_are_dropped() {
    let mut song = pop_song(0, Mode::Major, &[1, 4, 5, 1], 8, 1);
    song.tracks[0].notes.truncate(1);
    song.tracks[0].notes[0].duration = Beat::new(1, 4);
    let out = extract_song(&song, "sparse.mid", &AnalysisOptions::default()).unwrap();
    assert_eq!(out.drops.get(&DropReason::SparseMelody), Some(&1));

    let song = pop_song(0, Mode::Major, &[1, 4, 5, 1], 8, 1);
    let melody = identify_melody(&song).unwrap().track;
    let mut labels = detect_chords(&song, None, BinPolicy::Fixed(BinLength::Half)).unwrap();
    let mut chromatic = labels[3].chord.clone().unwrap();
    chromatic.root = 1;
    labels[3].chord = Some(chromatic);
    let out = extract_segments(&song, "x", melody, &labels, &ExtractOptions::default());
    assert_eq!(out.drops.get(&DropReason::OutOfMode), Some(&1));
}

#[test]
fn polyphonic_melody_is_dropped() {
    let mut song = pop_song(0, Mode::Major, &[1, 4, 5, 1], 8, 4);
    let mut extra = song.tracks[0].notes[2].clone();
    extra.pitch += 4;
    song.tracks[0].notes.push(extra);
    song.normalize();
    let out = extract_song(&song, "poly.mid", &AnalysisOptions::default()).unwrap();
    assert_eq!(out.drops.get(&DropReason::Polyphony), Some(&1));
}

#[test]
fn condition_layout() {
    let mut slots = vec![ChordSlot::silent(); 16];
    slots[15].degree = Some(7);
    let c = ConditionVector::new(slots, Mode::JazzMinor).unwrap();
    let d = c.to_dense();
    assert_eq!(d.len(), 216);
    assert_eq!(d[15 * 8 + 6], 1.0);
    assert_eq!(d[7], 1.0);
    assert_eq!(d[208 + Mode::JazzMinor.index()], 1.0);
    assert_eq!(d.iter().sum::<f64>(), 17.0);
}
