//! Chord detection against a direct brute-force restatement of the rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tunegram_core::harmony::{best_chord_in_bin, cost, CompatibilityTable, PitchClassSet, TemplateSet};
use tunegram_core::{Beat, NoteEvent};

/// Compatibility by interval size 0..=7; larger intervals are inversions.
const COMPAT: [u32; 8] = [0, 6, 2, 2, 2, 1, 4, 1];

const TEMPLATES: [(&str, &[i32]); 10] = [
    ("power", &[0, 7]),
    ("major", &[0, 4, 7]),
    ("minor", &[0, 3, 7]),
    ("diminished", &[0, 3, 6]),
    ("augmented", &[0, 4, 8]),
    ("dominant7", &[0, 4, 7, 10]),
    ("major7", &[0, 4, 7, 11]),
    ("minor7", &[0, 3, 7, 10]),
    ("sus4", &[0, 5, 7]),
    ("7aug-b9", &[0, 4, 8, 10, 13]),
];

fn dist(a: i32, b: i32) -> u32 {
    let d = (a - b).rem_euclid(12);
    COMPAT[d.min(12 - d) as usize]
}

fn oracle_cost(pcs: &[i32], root: i32, voices: &[i32]) -> u32 {
    let mut total = 0;
    for &p in pcs {
        let mut best = u32::MAX;
        for &v in voices {
            best = best.min(dist(p - root, v));
        }
        total += best;
    }
    for &v in voices {
        let mut best = u32::MAX;
        for &p in pcs {
            best = best.min(dist(p - root, v));
        }
        total += best;
    }
    total
}

fn oracle_root(notes: &[NoteEvent], start: Beat) -> i32 {
    let half = start + Beat::new(1, 2);
    let mut early: Vec<u8> = Vec::new();
    let mut held: Vec<u8> = Vec::new();
    let mut all: Vec<u8> = Vec::new();
    for n in notes {
        all.push(n.pitch);
        if n.onset >= start && n.onset < half {
            early.push(n.pitch);
        }
        if n.onset <= start && n.onset + n.duration > start {
            held.push(n.pitch);
        }
    }
    let pick = if !early.is_empty() {
        early
    } else if !held.is_empty() {
        held
    } else {
        all
    };
    i32::from(*pick.iter().min().unwrap() % 12)
}

fn oracle_best(notes: &[NoteEvent], start: Beat) -> (i32, &'static str) {
    let root = oracle_root(notes, start);
    let mut pcs: Vec<i32> = notes.iter().map(|n| i32::from(n.pitch % 12)).collect();
    pcs.sort_unstable();
    pcs.dedup();
    let mut best: Option<(u32, usize, usize)> = None;
    for (i, (_, voices)) in TEMPLATES.iter().enumerate() {
        let key = (oracle_cost(&pcs, root, voices), voices.len(), i);
        if best.is_none_or(|b| key < b) {
            best = Some(key);
        }
    }
    (root, TEMPLATES[best.unwrap().2].0)
}

fn random_bin(rng: &mut ChaCha8Rng) -> Vec<NoteEvent> {
    let k = rng.random_range(2..=6);
    let mut classes: Vec<u8> = (0..12).collect();
    for i in 0..k {
        let j = rng.random_range(i..12);
        classes.swap(i, j);
    }
    classes[..k]
        .iter()
        .map(|&pc| {
            let octave = rng.random_range(3..7);
            let onset = Beat::new(rng.random_range(-2..8), 4);
            NoteEvent {
                pitch: pc + 12 * octave,
                onset,
                duration: Beat::new(rng.random_range(1..8), 4),
                velocity: 80,
                channel: 0,
                track_index: 0,
            }
        })
        .collect()
}

#[test]
fn brute_force_agreement_on_random_bins() {
    let templates = TemplateSet::default();
    let table = CompatibilityTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Beat::from_integer(0);
    for case in 0..1000 {
        let notes = random_bin(&mut rng);
        let chord = best_chord_in_bin(&notes, start, &templates, &table).expect("non-empty bin");
        let (root, name) = oracle_best(&notes, start);
        assert_eq!(
            (i32::from(chord.root), chord.template.name.as_str()),
            (root, name),
            "case {case}: {notes:?}"
        );
    }
}

#[test]
fn costs_match_oracle_for_every_template_and_root() {
    let templates = TemplateSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..300 {
        let mask: u16 = rng.random_range(1..4096);
        let pcs: Vec<i32> = (0..12).filter(|i| mask & (1 << i) != 0).collect();
        let set = PitchClassSet(mask);
        for (t, (name, voices)) in templates.0.iter().zip(TEMPLATES) {
            assert_eq!(t.name, name);
            for root in 0..12 {
                assert_eq!(cost(set, t, root as u8), oracle_cost(&pcs, root, voices));
            }
        }
    }
}
