use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use tunegram_core::grammar::{assign_latents, expand, ExpandOptions, Grammar};
use tunegram_core::pipeline::AnalysisOptions;
use tunegram_core::synth::pop_song;
use tunegram_core::tonality::Mode;
use tunegram_core::{parse_smf, write_smf, Beat, NoteEvent, Song};
use tunegram_cvae::generate::diatonic_slot;
use tunegram_cvae::{generate, reharmonize, CvaeConfig, CvaeModel, Reharmonization};

fn model() -> CvaeModel {
    let mut model = CvaeModel::new(CvaeConfig {
        latent_dim: 6,
        hidden_dim: 8,
        recurrent_layers_per_coder: 2,
        aggregate_dim: 4,
        expand_dim: 8,
        ..CvaeConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let u = Uniform::new(-1.0, 1.0).unwrap();
    for m in &mut model.params.values {
        m.data.iter_mut().for_each(|v| *v = rng.sample(u));
    }
    model
}

fn in_span(notes: &[NoteEvent], start: i64, end: i64) -> Vec<(u8, Beat, Beat)> {
    notes
        .iter()
        .filter(|n| n.onset >= Beat::from_integer(start) && n.onset < Beat::from_integer(end))
        .map(|n| (n.pitch, n.onset - Beat::from_integer(start), n.duration))
        .collect()
}

fn shared_motif_song(sigma: f64, seed: u64) -> Song {
    let g = Grammar::parse("let x = I:2 in I M5(x) I M5(x) I").unwrap();
    let plan = expand(&g, "S", &ExpandOptions::default()).unwrap();
    let latents = assign_latents(&plan, 6, sigma, seed);
    generate(&model(), &plan, &latents, 0).unwrap()
}

#[test]
fn shared_sections_repeat_without_variation() {
    let song = shared_motif_song(0.0, 4);
    // Sections: I (0-4), x_1 (4-12), I (12-16), x_2 (16-24), I (24-28).
    let melody = &song.tracks[0].notes;
    let a = in_span(melody, 4, 12);
    assert!(!a.is_empty());
    assert_eq!(a, in_span(melody, 16, 24));
    let chords = &song.tracks[1].notes;
    assert_eq!(in_span(chords, 4, 12), in_span(chords, 16, 24));
    assert_eq!(song.end, Beat::from_integer(28));
}

#[test]
fn variations_share_chords_but_not_notes() {
    let song = shared_motif_song(0.8, 4);
    let melody = &song.tracks[0].notes;
    assert_ne!(in_span(melody, 4, 12), in_span(melody, 16, 24));
    let chords = &song.tracks[1].notes;
    assert_eq!(in_span(chords, 4, 12), in_span(chords, 16, 24));
}

#[test]
fn generation_is_byte_deterministic() {
    let a = write_smf(&shared_motif_song(0.2, 9)).unwrap();
    let b = write_smf(&shared_motif_song(0.2, 9)).unwrap();
    assert_eq!(a, b);
    let back = parse_smf(&a).unwrap();
    assert_eq!(back.tracks.len(), 2);
}

#[test]
fn all_minor_tonic_plan_keeps_one_chord() {
    let g = Grammar::parse("I:8 I:8").unwrap();
    let plan = expand(&g, "S", &ExpandOptions { mode: Mode::Minor, ..Default::default() }).unwrap();
    let latents = assign_latents(&plan, 6, 0.2, 1);
    let song = generate(&model(), &plan, &latents, 0).unwrap();
    let mut pcs: Vec<u8> = song.tracks[1].notes.iter().map(|n| n.pitch % 12).collect();
    pcs.sort();
    pcs.dedup();
    assert_eq!(pcs, vec![0, 3, 7]);
    assert_eq!(song.end, Beat::from_integer(64));
}

#[test]
fn reharmonization_runs_end_to_end() {
    let song = pop_song(7, Mode::Major, &[1, 5, 6, 4], 16, 2);
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let target = Reharmonization {
        slots: Some(vec![diatonic_slot(2, Mode::Minor), diatonic_slot(5, Mode::Minor)]),
        mode: Some(Mode::Minor),
        sample_latent: false,
    };
    let (out, segs) = reharmonize(&m, &song, "pop.mid", &AnalysisOptions::default(), &target, &mut rng).unwrap();
    assert_eq!(segs.len(), 2);
    assert_eq!(segs.iter().map(|s| s.start_measure).collect::<Vec<_>>(), vec![0, 8]);
    assert!(segs.iter().all(|s| s.condition.mode == Mode::Minor));
    assert!(!out.tracks[1].notes.is_empty());
    write_smf(&out).unwrap();

    let short = pop_song(0, Mode::Major, &[1, 4], 4, 2);
    assert!(reharmonize(&m, &short, "s.mid", &AnalysisOptions::default(), &target, &mut rng).is_err());
}
