//! Chord detection by template matching.
//!
//! Each bin contributes the set of pitch classes sounding inside it. The root
//! is the lowest note entering in the first half beat of the bin, and every
//! template is scored with a two-sided nearest-interval cost using interval
//! compatibility distances rather than raw semitone differences.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{NoteEvent, Song};
use crate::tonality::{pitch_class_name, Mode};
use crate::{Beat, PitchClass};

const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HarmonyError {
    #[error("bin has no notes")]
    NoRoot,
    #[error("template file line {line}: {message}")]
    Template { line: usize, message: String },
    #[error("chord root {root} is not diatonic to {tonic} {mode}")]
    OutOfMode { root: String, tonic: String, mode: Mode },
    #[error("song has no time signature")]
    NoTimeSignature,
}

/// Distances between interval classes used by the chord cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatibilityTable(pub [u32; 12]);

impl Default for CompatibilityTable {
    fn default() -> Self {
        // 0..=7 as published; 8..=11 mirror 4..=1.
        CompatibilityTable([0, 6, 2, 2, 2, 1, 4, 1, 2, 2, 2, 6])
    }
}

impl CompatibilityTable {
    pub fn distance(&self, semitones: i32) -> u32 {
        self.0[semitones.unsigned_abs() as usize % 12]
    }
}

pub fn compatibility_distance(semitones: i32) -> u32 {
    CompatibilityTable::default().distance(semitones)
}

/// Set of pitch classes as a 12-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PitchClassSet(pub u16);

impl PitchClassSet {
    pub fn from_pitches(pitches: impl IntoIterator<Item = u8>) -> Self {
        PitchClassSet(pitches.into_iter().fold(0, |m, p| m | 1 << (p % 12)))
    }

    pub fn insert(&mut self, pc: u8) {
        self.0 |= 1 << (pc % 12);
    }

    pub fn contains(&self, pc: u8) -> bool {
        self.0 & (1 << (pc % 12)) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..12u8).filter(|&pc| self.contains(pc))
    }

    pub fn transpose(&self, k: i32) -> Self {
        PitchClassSet::from_pitches(self.iter().map(|pc| (i32::from(pc) + k).rem_euclid(12) as u8))
    }
}

/// Quality flags of the condition encoding, derived from template intervals:
/// Pwr = perfect fifth, Maj = major third, Min = minor third, Dim = diminished
/// fifth, Aug = augmented fifth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Qualities {
    pub pwr: bool,
    pub maj: bool,
    pub min: bool,
    pub dim: bool,
    pub aug: bool,
}

impl Qualities {
    pub fn from_intervals(set: PitchClassSet) -> Self {
        Qualities {
            pwr: set.contains(7),
            maj: set.contains(4),
            min: set.contains(3),
            dim: set.contains(6),
            aug: set.contains(8),
        }
    }

    pub fn as_array(&self) -> [bool; 5] {
        [self.pwr, self.maj, self.min, self.dim, self.aug]
    }

    pub fn from_array(a: [bool; 5]) -> Self {
        Qualities {
            pwr: a[0],
            maj: a[1],
            min: a[2],
            dim: a[3],
            aug: a[4],
        }
    }
}

impl fmt::Display for Qualities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = ["Pwr", "Maj", "Min", "Dim", "Aug"];
        let set: Vec<&str> = self
            .as_array()
            .iter()
            .zip(names)
            .filter_map(|(&on, n)| on.then_some(n))
            .collect();
        write!(f, "{{{}}}", set.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChordTemplate {
    pub name: String,
    /// Intervals as written, possibly above an octave.
    pub intervals: Vec<u8>,
    /// Intervals reduced to pitch classes.
    pub voices: PitchClassSet,
    pub qualities: Qualities,
}

impl ChordTemplate {
    pub fn new(name: impl Into<String>, intervals: &[u8]) -> Self {
        let voices = PitchClassSet::from_pitches(intervals.iter().copied());
        ChordTemplate {
            name: name.into(),
            intervals: intervals.to_vec(),
            voices,
            qualities: Qualities::from_intervals(voices),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet(pub Vec<ChordTemplate>);

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }
}

impl TemplateSet {
    /// Parses `name: i0 i1 ...` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, HarmonyError> {
        let mut templates = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: &str| HarmonyError::Template {
                line: i + 1,
                message: message.to_string(),
            };
            let (name, rest) = line.split_once(':').ok_or_else(|| err("expected `name: intervals`"))?;
            let intervals = rest
                .split_whitespace()
                .map(|t| t.parse::<u8>().ok().filter(|&v| v < 24))
                .collect::<Option<Vec<u8>>>()
                .ok_or_else(|| err("intervals must be integers 0-23"))?;
            if !intervals.contains(&0) {
                return Err(err("template must contain the root interval 0"));
            }
            templates.push(ChordTemplate::new(name.trim(), &intervals));
        }
        if templates.is_empty() {
            return Err(HarmonyError::Template {
                line: 0,
                message: "no templates".into(),
            });
        }
        Ok(TemplateSet(templates))
    }

    pub fn load(path: &Path) -> Result<Self, HarmonyError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarmonyError::Template {
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn by_name(&self, name: &str) -> Option<&ChordTemplate> {
        self.0.iter().find(|t| t.name == name)
    }
}

/// Bidirectional nearest-interval cost of matching `pitches` to `template`
/// rooted at `root`.
pub fn cost_with(
    table: &CompatibilityTable,
    pitches: PitchClassSet,
    template: &ChordTemplate,
    root: PitchClass,
) -> u32 {
    let intervals: Vec<i32> = pitches
        .iter()
        .map(|p| (i32::from(p) - i32::from(root)).rem_euclid(12))
        .collect();
    let voices: Vec<i32> = template.voices.iter().map(i32::from).collect();
    let pitch_cost: u32 = intervals
        .iter()
        .map(|&p| voices.iter().map(|&v| table.distance(p - v)).min().unwrap_or(0))
        .sum();
    let chord_cost: u32 = voices
        .iter()
        .map(|&v| intervals.iter().map(|&p| table.distance(p - v)).min().unwrap_or(0))
        .sum();
    pitch_cost + chord_cost
}

pub fn cost(pitches: PitchClassSet, template: &ChordTemplate, root: PitchClass) -> u32 {
    cost_with(&CompatibilityTable::default(), pitches, template, root)
}

/// One-sided cost with plain circular semitone distance. Kept to show why
/// the compatibility table is needed: `{C,E,G}` against `{C,Eb,Gb}` scores 2.
pub fn naive_semitone_cost(pitches: PitchClassSet, template: &ChordTemplate, root: PitchClass) -> u32 {
    pitches
        .iter()
        .map(|p| {
            let p = (i32::from(p) - i32::from(root)).rem_euclid(12);
            template
                .voices
                .iter()
                .map(|v| {
                    let d = (p - i32::from(v)).rem_euclid(12);
                    d.min(12 - d) as u32
                })
                .min()
                .unwrap_or(0)
        })
        .sum()
}

/// Lowest note entering in the first half beat of the bin; failing that the
/// lowest note sounding at the bin start; failing that the lowest note.
pub fn find_root(bin_notes: &[NoteEvent], bin_start: Beat) -> Result<PitchClass, HarmonyError> {
    let upbeat = bin_start + Beat::new(1, 2);
    let lowest = |it: &mut dyn Iterator<Item = &NoteEvent>| it.map(|n| n.pitch).min();
    lowest(&mut bin_notes.iter().filter(|n| n.onset >= bin_start && n.onset < upbeat))
        .or_else(|| lowest(&mut bin_notes.iter().filter(|n| n.sounds_at(bin_start))))
        .or_else(|| lowest(&mut bin_notes.iter()))
        .map(|p| p % 12)
        .ok_or(HarmonyError::NoRoot)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chord {
    pub root: PitchClass,
    pub template: ChordTemplate,
    /// Position of the template in its collection.
    pub template_index: usize,
    pub cost: u32,
}

impl fmt::Display for Chord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", pitch_class_name(self.root), self.template.name)
    }
}

/// A detected chord over one bin; `chord` is `None` for a silent bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChordLabel {
    pub start: Beat,
    pub length: Beat,
    pub chord: Option<Chord>,
}

impl ChordLabel {
    pub fn end(&self) -> Beat {
        self.start + self.length
    }
}

/// Picks the template with the lowest cost for the pitch classes in the bin.
/// Ties prefer fewer distinct intervals, then earlier templates.
pub fn best_chord_for_set(
    pitches: PitchClassSet,
    root: PitchClass,
    templates: &TemplateSet,
    table: &CompatibilityTable,
) -> Option<Chord> {
    templates
        .0
        .iter()
        .enumerate()
        .map(|(i, t)| (cost_with(table, pitches, t, root), t.voices.len(), i))
        .min()
        .map(|(cost, _, i)| Chord {
            root,
            template: templates.0[i].clone(),
            template_index: i,
            cost,
        })
}

pub fn best_chord_in_bin(
    bin_notes: &[NoteEvent],
    bin_start: Beat,
    templates: &TemplateSet,
    table: &CompatibilityTable,
) -> Option<Chord> {
    let root = find_root(bin_notes, bin_start).ok()?;
    let pitches = PitchClassSet::from_pitches(bin_notes.iter().map(|n| n.pitch));
    best_chord_for_set(pitches, root, templates, table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinLength {
    Half,
    One,
    Two,
}

impl BinLength {
    pub fn measures(self) -> Beat {
        match self {
            BinLength::Half => Beat::new(1, 2),
            BinLength::One => Beat::from_integer(1),
            BinLength::Two => Beat::from_integer(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinPolicy {
    Fixed(BinLength),
    /// Per time-signature segment, the bin length with the lowest total cost
    /// per measure; ties go to the longer bin.
    Auto,
}

impl std::str::FromStr for BinPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "half" => Ok(BinPolicy::Fixed(BinLength::Half)),
            "one" => Ok(BinPolicy::Fixed(BinLength::One)),
            "two" => Ok(BinPolicy::Fixed(BinLength::Two)),
            "auto" => Ok(BinPolicy::Auto),
            _ => Err(format!("unknown bin policy {s:?} (half|one|two|auto)")),
        }
    }
}

#[derive(Debug, Clone)]
#[derive(Default)]
pub struct ChordDetector {
    pub templates: TemplateSet,
    pub table: CompatibilityTable,
}


impl ChordDetector {
    fn label_bins(&self, notes: &[&NoteEvent], start: Beat, end: Beat, bin: Beat) -> Vec<ChordLabel> {
        let mut labels = Vec::new();
        let mut t = start;
        while t < end {
            let bin_end = (t + bin).min(end);
            let inside: Vec<NoteEvent> = notes
                .iter()
                .filter(|n| n.overlaps(t, bin_end))
                .map(|n| (*n).clone())
                .collect();
            labels.push(ChordLabel {
                start: t,
                length: bin_end - t,
                chord: best_chord_in_bin(&inside, t, &self.templates, &self.table),
            });
            t = bin_end;
        }
        labels
    }

    /// Labels every bin of every constant-meter segment. `tracks` selects the
    /// tracks whose notes feed the bins; `None` uses all non-percussion tracks.
    pub fn detect(
        &self,
        song: &Song,
        tracks: Option<&[usize]>,
        policy: BinPolicy,
    ) -> Result<Vec<ChordLabel>, HarmonyError> {
        if song.time_signatures.is_empty() {
            return Err(HarmonyError::NoTimeSignature);
        }
        let notes: Vec<&NoteEvent> = song
            .tracks
            .iter()
            .enumerate()
            .filter(|(i, t)| tracks.map_or(!t.is_percussion(), |sel| sel.contains(i)))
            .flat_map(|(_, t)| t.notes.iter().filter(|n| !n.is_percussion()))
            .collect();

        let mut labels = Vec::new();
        for span in &song.time_signatures {
            if span.is_empty() {
                continue;
            }
            let measure = span.measure_length();
            let candidates: Vec<BinLength> = match policy {
                BinPolicy::Fixed(len) => vec![len],
                BinPolicy::Auto => vec![BinLength::Two, BinLength::One, BinLength::Half],
            };
            let mut best: Option<(Beat, Vec<ChordLabel>)> = None;
            for len in candidates {
                let seg = self.label_bins(&notes, span.start, span.end, len.measures() * measure);
                let total: u32 = seg.iter().filter_map(|l| l.chord.as_ref()).map(|c| c.cost).sum();
                let per_measure = Beat::from_integer(i64::from(total)) * measure / span.len();
                if best.as_ref().is_none_or(|(b, _)| per_measure < *b) {
                    best = Some((per_measure, seg));
                }
            }
            labels.extend(best.expect("at least one candidate").1);
        }
        Ok(labels)
    }
}

pub fn detect_chords(song: &Song, tracks: Option<&[usize]>, policy: BinPolicy) -> Result<Vec<ChordLabel>, HarmonyError> {
    ChordDetector::default().detect(song, tracks, policy)
}

/// Chord root as a scale degree of a key, with the template's quality flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleDegree {
    /// 1-based degree, 1 = I.
    pub degree: u8,
    pub qualities: Qualities,
}

const ROMAN: [&str; 7] = ["I", "II", "III", "IV", "V", "VI", "VII"];

pub fn roman(degree: u8) -> &'static str {
    ROMAN[usize::from(degree.clamp(1, 7) - 1)]
}

impl fmt::Display for ScaleDegree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", roman(self.degree), self.qualities)
    }
}

pub fn to_scale_degree(chord: &Chord, tonic: PitchClass, mode: Mode) -> Result<ScaleDegree, HarmonyError> {
    let offset = i32::from(chord.root) - i32::from(tonic);
    let step = mode.step_of(offset).ok_or_else(|| HarmonyError::OutOfMode {
        root: pitch_class_name(chord.root).to_string(),
        tonic: pitch_class_name(tonic).to_string(),
        mode,
    })?;
    Ok(ScaleDegree {
        degree: step as u8 + 1,
        qualities: chord.template.qualities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcs(v: &[u8]) -> PitchClassSet {
        PitchClassSet::from_pitches(v.iter().copied())
    }

    fn n(pitch: u8, onset: Beat, dur: Beat) -> NoteEvent {
        NoteEvent {
            pitch,
            onset,
            duration: dur,
            velocity: 80,
            channel: 0,
            track_index: 0,
        }
    }

    #[test]
    fn table_values() {
        let t = CompatibilityTable::default();
        let published = [0, 6, 2, 2, 2, 1, 4, 1];
        for (i, &d) in published.iter().enumerate() {
            assert_eq!(t.distance(i as i32), d);
        }
        for i in 1..12 {
            assert_eq!(t.distance(i), t.distance(12 - i));
            assert_eq!(t.distance(-i), t.distance(i));
        }
        assert_eq!(compatibility_distance(9), 2);
        assert!(t.0.iter().all(|&d| d <= 6));
    }

    #[test]
    fn cost_examples() {
        let maj = ChordTemplate::new("major", &[0, 4, 7]);
        let dim = ChordTemplate::new("diminished", &[0, 3, 6]);
        assert_eq!(cost(pcs(&[0, 4, 7]), &maj, 0), 0);
        assert_eq!(cost(pcs(&[0, 4]), &maj, 0), 1);
        assert_eq!(cost(pcs(&[0, 4, 7]), &dim, 0), 7);
        assert_eq!(naive_semitone_cost(pcs(&[0, 4, 7]), &dim, 0), 2);
    }

    #[test]
    fn root_fallback_chain() {
        let z = Beat::from_integer(0);
        let one = Beat::from_integer(1);
        let bin = [n(36, z, one * 4), n(64, z, one), n(67, one, one)];
        assert_eq!(find_root(&bin, z).unwrap(), 0);
        let bin = [n(40, z, one), n(31, one, one)];
        assert_eq!(find_root(&bin, z).unwrap(), 4);
        // Everything enters after the upbeat; a held A from before wins.
        let held = n(45, -one, one * 2);
        let bin = [held, n(36, one, one), n(60, one, one)];
        assert_eq!(find_root(&bin, z).unwrap(), 9);
        let bin = [n(48, one, one), n(40, one * 2, one)];
        assert_eq!(find_root(&bin, z).unwrap(), 4);
        assert_eq!(find_root(&[], z), Err(HarmonyError::NoRoot));
    }

    #[test]
    fn augmented_flat_nine_from_example() {
        // accompaniment A G Bb C# E plus melody A G F, bass A on the downbeat
        let z = Beat::from_integer(0);
        let two = Beat::from_integer(2);
        let bin: Vec<_> = [45u8, 55, 58, 61, 64, 69, 67, 65]
            .iter()
            .map(|&p| n(p, z, two))
            .collect();
        let c = best_chord_in_bin(&bin, z, &TemplateSet::default(), &CompatibilityTable::default()).unwrap();
        assert_eq!(c.root, 9);
        assert_eq!(c.template.name, "7aug-b9");
        assert_eq!(c.cost, 1);
    }

    #[test]
    fn scale_degrees() {
        let t = TemplateSet::default();
        let chord = |root, name: &str| Chord {
            root,
            template: t.by_name(name).unwrap().clone(),
            template_index: 0,
            cost: 0,
        };
        let g = to_scale_degree(&chord(7, "dominant7"), 0, Mode::Major).unwrap();
        assert_eq!(g.degree, 5);
        assert_eq!(g.qualities, Qualities { pwr: true, maj: true, ..Default::default() });
        assert!(matches!(
            to_scale_degree(&chord(10, "major"), 0, Mode::Major),
            Err(HarmonyError::OutOfMode { .. })
        ));
        let d = to_scale_degree(&chord(2, "minor"), 0, Mode::Major).unwrap();
        assert_eq!(d.degree, 2);
        assert_eq!(d.qualities, Qualities { pwr: true, min: true, ..Default::default() });
    }

    #[test]
    fn template_parse_errors() {
        assert!(TemplateSet::parse("").is_err());
        assert!(TemplateSet::parse("maj 0 4 7").is_err());
        assert!(TemplateSet::parse("maj: 4 7").is_err());
        assert!(TemplateSet::parse("maj: 0 x").is_err());
        let t = TemplateSet::parse("# c\nmaj: 0 4 7 # trailing\n").unwrap();
        assert_eq!(t.0.len(), 1);
    }
}
