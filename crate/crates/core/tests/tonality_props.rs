use proptest::prelude::*;
use tunegram_core::synth::pop_song;
use tunegram_core::tonality::{estimate_key, Mode};
use tunegram_core::{Beat, NoteEvent};

fn notes_strategy() -> impl Strategy<Value = Vec<NoteEvent>> {
    prop::collection::vec((40u8..90, 0i64..64, 1i64..8), 1..30).prop_map(|v| {
        v.into_iter()
            .map(|(pitch, onset, dur)| NoteEvent {
                pitch,
                onset: Beat::new(onset, 2),
                duration: Beat::new(dur, 2),
                velocity: 80,
                channel: 0,
                track_index: 0,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn transposition_moves_the_tonic(notes in notes_strategy(), k in 1u8..12) {
        let a = estimate_key(&notes).unwrap();
        let shifted: Vec<NoteEvent> = notes.iter().map(|n| NoteEvent { pitch: n.pitch + k, ..n.clone() }).collect();
        let b = estimate_key(&shifted).unwrap();
        prop_assert_eq!(b.tonic, (a.tonic + k) % 12);
        prop_assert_eq!(b.mode, a.mode);
        prop_assert!((a.confidence - b.confidence).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.confidence));
    }
}

#[test]
fn synthetic_songs_recover_their_key() {
    for tonic in 0..12u8 {
        for (mode, prog) in [(Mode::Major, [1u8, 4, 5, 1]), (Mode::Minor, [1, 4, 5, 1])] {
            let song = pop_song(tonic, mode, &prog, 8, u64::from(tonic));
            let notes: Vec<NoteEvent> = song.notes().cloned().collect();
            let key = estimate_key(&notes).unwrap();
            assert_eq!((key.tonic, key.mode), (tonic, mode), "tonic {tonic} {mode}");
        }
    }
}
