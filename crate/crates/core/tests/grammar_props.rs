use std::collections::HashMap;

use proptest::prelude::*;
use tunegram_core::grammar::{assign_latents, expand, ExpandOptions, Grammar, PlannedChord};
use tunegram_core::tonality::Mode;

const SHARED_MOTIF: &str = "let x = I in I M5(x) I M5(x) I";

fn same_base_same_chords(g: &Grammar, seed: u64) {
    let plan = expand(g, g.first_rule(), &ExpandOptions { seed, ..Default::default() }).unwrap();
    let mut seen: HashMap<&str, &Vec<PlannedChord>> = HashMap::new();
    for s in &plan.sections {
        if let Some(prev) = seen.insert(&s.tag.base, &s.chords) {
            assert_eq!(prev, &s.chords, "base {}", s.tag.base);
        }
    }
}

proptest! {
    #[test]
    fn shared_bases_share_progressions(seed in any::<u64>()) {
        same_base_same_chords(&Grammar::default(), seed);
        let g = Grammar::parse(
            "S -> let a = P in let b = P in a b M5(a) a M3(b) b_4 | P P ;\n\
             P -> I IV | ii V I | vi:2 IV:1/2 V:3/2 ;",
        )
        .unwrap();
        same_base_same_chords(&g, seed);
    }

    #[test]
    fn modulations_compose(a in 1u32..15, b in 1u32..15, d in 0usize..7) {
        let numeral = ["I", "II", "III", "IV", "V", "VI", "VII"][d];
        let nested = Grammar::parse(&format!("M{a}(M{b}({numeral}))")).unwrap();
        let single = Grammar::parse(&format!("M{}({numeral})", a + b - 1)).unwrap();
        let opts = ExpandOptions::default();
        let x = expand(&nested, "S", &opts).unwrap();
        let y = expand(&single, "S", &opts).unwrap();
        prop_assert_eq!(&x.sections[0].chords, &y.sections[0].chords);
        prop_assert_eq!(
            usize::from(x.sections[0].chords[0].degree - 1),
            (d + (a + b - 2) as usize) % 7
        );
    }

    #[test]
    fn expansion_is_a_function_of_seed(seed in any::<u64>()) {
        let g = Grammar::default();
        let opts = ExpandOptions { seed, mode: Mode::Dorian, ..Default::default() };
        prop_assert_eq!(expand(&g, "Song", &opts).unwrap(), expand(&g, "Song", &opts).unwrap());
    }
}

#[test]
fn shared_motif_plan() {
    let g = Grammar::parse(SHARED_MOTIF).unwrap();
    let plan = expand(&g, "S", &ExpandOptions::default()).unwrap();
    assert_eq!(plan.sections.len(), 5);
    assert_eq!(plan.sections[1].chords, plan.sections[3].chords);
    assert_eq!(plan.sections[1].tag.base, plan.sections[3].tag.base);
    assert_eq!((plan.sections[1].tag.subscript, plan.sections[3].tag.subscript), (1, 2));
}

#[test]
fn minor_mode_qualities() {
    let g = Grammar::parse("I II III IV V VI VII").unwrap();
    let plan = expand(&g, "S", &ExpandOptions { mode: Mode::Minor, ..Default::default() }).unwrap();
    let q: Vec<String> = plan.sections[0].chords.iter().map(|c| c.qualities.to_string()).collect();
    let q: Vec<&str> = q.iter().map(String::as_str).collect();
    assert_eq!(q, ["{Pwr,Min}", "{Min,Dim}", "{Pwr,Maj}", "{Pwr,Min}", "{Pwr,Min}", "{Pwr,Maj}", "{Pwr,Maj}"]);
}

/// Expected squared distance between x_1 and x_2 latents is sigma^2 * dim.
#[test]
fn perturbation_variance() {
    let g = Grammar::parse(SHARED_MOTIF).unwrap();
    let plan = expand(&g, "S", &ExpandOptions::default()).unwrap();
    let (sigma, dim, draws) = (0.2, 16, 10_000u64);
    let mut total = 0.0;
    for seed in 0..draws {
        let a = assign_latents(&plan, dim, sigma, seed);
        total += a.sections[1].iter().zip(&a.sections[3]).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    let mean = total / draws as f64;
    let expected = sigma * sigma * dim as f64;
    assert!((mean - expected).abs() / expected < 0.05, "mean {mean}, expected {expected}");
}

#[test]
fn distinct_bases_are_independent() {
    let g = Grammar::parse("let x = I in let y = V in x y x").unwrap();
    let plan = expand(&g, "S", &ExpandOptions::default()).unwrap();
    let n = 4000;
    let mut sxy = 0.0;
    for seed in 0..n {
        let a = assign_latents(&plan, 1, 0.2, seed);
        sxy += a.base("x").unwrap()[0] * a.base("y").unwrap()[0];
    }
    assert!((sxy / n as f64).abs() < 0.06);
}
