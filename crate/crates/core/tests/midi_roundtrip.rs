use proptest::prelude::*;
use tunegram_core::midi::{Tempo, TimeSignatureSpan};
use tunegram_core::{parse_smf, write_smf, Beat, NoteEvent, Song, Track};

#[derive(Debug, Clone)]
struct RawNote {
    pitch: u8,
    onset: u32,
    len: u32,
    velocity: u8,
}

fn track_strategy() -> impl Strategy<Value = (String, u8, u8, Vec<RawNote>)> {
    (
        "[A-Za-z ]{0,12}",
        0u8..128,
        0u8..16,
        prop::collection::vec(
            (0u8..128, 0u32..4000, 1u32..600, 1u8..128).prop_map(|(pitch, onset, len, velocity)| RawNote {
                pitch,
                onset,
                len,
                velocity,
            }),
            0..40,
        ),
    )
}

fn build_song(tpq: u16, raw: Vec<(String, u8, u8, Vec<RawNote>)>, sigs: Vec<(u32, u8, u8)>, tempos: Vec<(u32, u32)>) -> Song {
    let to_beat = |t: u32| Beat::new(i64::from(t), i64::from(tpq));
    let tracks = raw
        .into_iter()
        .map(|(name, program, channel, notes)| {
            let mut kept: Vec<RawNote> = Vec::new();
            for n in notes {
                let clash = kept
                    .iter()
                    .any(|k| k.pitch == n.pitch && k.onset < n.onset + n.len && n.onset < k.onset + k.len);
                if !clash {
                    kept.push(n);
                }
            }
            let mut t = Track::new(name.trim(), program, channel);
            t.notes = kept
                .into_iter()
                .map(|n| NoteEvent {
                    pitch: n.pitch,
                    onset: to_beat(n.onset),
                    duration: to_beat(n.len),
                    velocity: n.velocity,
                    channel,
                    track_index: 0,
                })
                .collect();
            t
        })
        .collect();
    let mut song = Song::new(tpq, tracks, 4, 4);
    let mut spans = vec![TimeSignatureSpan {
        start: Beat::from_integer(0),
        end: Beat::from_integer(0),
        numerator: 4,
        denominator: 4,
    }];
    let mut sigs = sigs;
    sigs.sort();
    sigs.dedup_by_key(|s| s.0);
    for (tick, num, den_pow) in sigs {
        let last = spans.last().unwrap();
        let den = 1u8 << den_pow;
        if (last.numerator, last.denominator) == (num, den) {
            continue;
        }
        let start = to_beat(tick * u32::from(tpq));
        if start == last.start {
            spans.last_mut().unwrap().numerator = num;
            spans.last_mut().unwrap().denominator = den;
            continue;
        }
        spans.push(TimeSignatureSpan { start, end: start, numerator: num, denominator: den });
    }
    let mut merged: Vec<TimeSignatureSpan> = Vec::new();
    for s in spans {
        match merged.last() {
            Some(l) if (l.numerator, l.denominator) == (s.numerator, s.denominator) => {}
            _ => merged.push(s),
        }
    }
    song.time_signatures = merged;
    let mut tempos = tempos;
    tempos.sort();
    tempos.dedup_by_key(|t| t.0);
    song.tempos = tempos
        .into_iter()
        .map(|(tick, us)| Tempo { start: to_beat(tick), micros_per_quarter: us })
        .collect();
    song.end = song.end.max(to_beat(5000));
    song.normalize();
    song
}

fn comparable(song: &Song) -> (Vec<(String, u8, u8, Vec<NoteEvent>)>, Vec<TimeSignatureSpan>, Vec<Tempo>, Beat) {
    (
        song.tracks
            .iter()
            .map(|t| (t.name.clone(), t.program, t.channel, t.notes.clone()))
            .collect(),
        song.time_signatures.clone(),
        song.tempos.clone(),
        song.end,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn write_then_parse_is_lossless(
        tpq in prop::sample::select(vec![96u16, 120, 384, 480, 960]),
        raw in prop::collection::vec(track_strategy(), 1..5),
        sigs in prop::collection::vec((0u32..8, 1u8..13, 0u8..4), 0..3),
        tempos in prop::collection::vec((0u32..5000, 200_000u32..1_500_000), 0..3),
    ) {
        let song = build_song(tpq, raw, sigs, tempos);
        let bytes = write_smf(&song).unwrap();
        let back = parse_smf(&bytes).unwrap();
        prop_assert!(back.warnings.is_empty(), "{:?}", back.warnings);
        prop_assert_eq!(comparable(&back), comparable(&song));
        prop_assert_eq!(write_smf(&back).unwrap(), bytes);
    }
}
