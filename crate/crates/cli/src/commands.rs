//! One function per subcommand. Each returns a [`Report`] holding both the
//! human-readable text and the `--json` form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use tunegram_core::encoding::{read_dataset, ChordSlot, ExtractOutcome, SLOTS_PER_MEASURE};
use tunegram_core::grammar::{assign_latents, expand, ExpandOptions, Grammar, SectionPlan, DEFAULT_SIGMA};
use tunegram_core::harmony::{roman, to_scale_degree, ChordLabel};
use tunegram_core::melody::{identify_melody_with, MelodySelection};
use tunegram_core::pipeline::{analyze, extract_song, AnalysisOptions};
use tunegram_core::tonality::{parse_pitch_class, pitch_class_name, KeyEstimate, Mode};
use tunegram_core::{parse_smf, write_smf, Beat, Song};
use tunegram_cvae::checkpoint;
use tunegram_cvae::{generate, reharmonize, CvaeError, CvaeModel, Reharmonization, Trainer};

use crate::config::{hash_hex, PipelineConfig};
use crate::meta::{write_artifact, Provenance};
use crate::workers::{map_ordered, worker_count};
use crate::CliError;

/// Output of a command.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub json: serde_json::Value,
    /// Messages for stderr.
    pub warnings: Vec<String>,
}

impl Report {
    fn new(text: String, json: serde_json::Value) -> Self {
        Report {
            text,
            json,
            warnings: Vec::new(),
        }
    }
}

pub fn read_song(path: &Path) -> Result<Song, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_smf(&bytes).map_err(|source| CliError::Midi {
        path: path.to_path_buf(),
        source,
    })
}

fn write_song(song: &Song, path: &Path, provenance: Provenance) -> Result<Vec<u8>, CliError> {
    let bytes = write_smf(song).map_err(|source| CliError::Midi {
        path: path.to_path_buf(),
        source,
    })?;
    let provenance = Provenance {
        artifact_hash: hash_hex(&bytes),
        ..provenance
    };
    write_artifact(path, &bytes, &provenance)?;
    Ok(bytes)
}

/// 1-based measure number of `t`, following the song's meter changes.
fn measure_number(song: &Song, t: Beat) -> i64 {
    let mut whole = 0;
    for span in &song.time_signatures {
        let len = span.measure_length();
        if t < span.end || span.end <= span.start {
            return whole + ((t - span.start) / len).floor().to_integer() + 1;
        }
        whole += (span.len() / len).ceil().to_integer();
    }
    whole + 1
}

fn label_name(label: &ChordLabel, key: Option<&KeyEstimate>) -> String {
    let Some(chord) = &label.chord else {
        return "-".into();
    };
    let mut s = format!("{}:{}", pitch_class_name(chord.root), chord.template.name);
    if let Some(k) = key {
        if let Ok(d) = to_scale_degree(chord, k.tonic, k.mode) {
            let _ = write!(s, " ({})", roman(d.degree));
        }
    }
    s
}

fn chords_by_measure(song: &Song, labels: &[ChordLabel], key: Option<&KeyEstimate>) -> String {
    let mut out = String::new();
    let mut current = None;
    for l in labels {
        let m = measure_number(song, l.start);
        if current != Some(m) {
            if current.is_some() {
                out.push('\n');
            }
            let _ = write!(out, "  m{m}:");
            current = Some(m);
        } else {
            out.push_str(" |");
        }
        let _ = write!(out, " {}", label_name(l, key));
    }
    if !out.is_empty() {
        out.push('\n');
    }
    out
}

fn melody_table(song: &Song, sel: &MelodySelection) -> String {
    let mut out = String::new();
    let name = &song.tracks[sel.track].name;
    let total = sel.scores[sel.track].total;
    let _ = writeln!(out, "melody: track {} {name:?} (score {total:.3})", sel.track);
    let _ = writeln!(
        out,
        "  {:>3}  {:<20} {:<14} {:>7} {:>6} {:>7} {:>8} {:>8}",
        "#", "name", "category", "density", "range", "rubric", "entropy", "total"
    );
    for s in &sel.scores {
        let t = &song.tracks[s.track];
        let total = if s.empty { "empty".to_string() } else { format!("{:.3}", s.total) };
        let _ = writeln!(
            out,
            "  {:>3}  {:<20} {:<14} {:>7.3} {:>6} {:>7.2} {:>8.3} {:>8}",
            s.track,
            t.name.chars().take(20).collect::<String>(),
            format!("{:?}", s.category).to_lowercase(),
            s.density,
            if s.in_range { "yes" } else { "no" },
            s.rubric,
            s.entropy,
            total
        );
    }
    out
}

fn key_line(key: Option<&KeyEstimate>) -> String {
    match key {
        Some(k) => format!("key: {k} (confidence {:.3})\n", k.confidence),
        None => "key: none (no pitched notes)\n".into(),
    }
}

#[derive(Debug, Clone, Args)]
pub struct FileArgs {
    /// Standard MIDI file to read.
    pub file: PathBuf,
}

pub fn cmd_analyze(args: &FileArgs, cfg: &PipelineConfig) -> Result<Report, CliError> {
    let song = read_song(&args.file)?;
    let opts = cfg.analysis_options()?;
    let a = analyze(&song, &opts).map_err(|source| CliError::Analysis {
        path: args.file.clone(),
        source,
    })?;
    let mut text = format!("file: {}\n", args.file.display());
    text += &melody_table(&song, &a.melody);
    text += &key_line(a.key.as_ref());
    text += "chords:\n";
    text += &chords_by_measure(&song, &a.chords, a.key.as_ref());
    let json = json!({ "file": args.file, "analysis": a });
    Ok(Report::new(text, json))
}

pub fn cmd_identify_melody(args: &FileArgs, cfg: &PipelineConfig) -> Result<Report, CliError> {
    let song = read_song(&args.file)?;
    let opts = cfg.analysis_options()?;
    let sel = identify_melody_with(&song, &opts.instruments, &opts.weights).map_err(|e| CliError::Analysis {
        path: args.file.clone(),
        source: e.into(),
    })?;
    let json = json!({ "file": args.file, "melody": sel });
    Ok(Report::new(melody_table(&song, &sel), json))
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    /// Standard MIDI file to read.
    pub file: PathBuf,
    /// Bin length: half, one, two or auto (overrides the config).
    #[arg(long)]
    pub bins: Option<String>,
}

pub fn cmd_detect_chords(args: &DetectArgs, cfg: &PipelineConfig) -> Result<Report, CliError> {
    let mut cfg = cfg.clone();
    if let Some(b) = &args.bins {
        cfg.analysis.bins = b.clone();
        cfg.bins().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let opts = cfg.analysis_options()?;
    let song = read_song(&args.file)?;
    let a = analyze(&song, &opts).map_err(|source| CliError::Analysis {
        path: args.file.clone(),
        source,
    })?;
    let text = key_line(a.key.as_ref()) + &chords_by_measure(&song, &a.chords, a.key.as_ref());
    let json = json!({ "file": args.file, "key": a.key, "chords": a.chords });
    Ok(Report::new(text, json))
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    /// Directory of .mid/.midi files (not searched recursively).
    pub corpus: Option<PathBuf>,
    /// Output JSONL dataset.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractSummary {
    pub files_read: usize,
    pub files_skipped: Vec<String>,
    pub windows: usize,
    pub segments: usize,
    pub dropped: usize,
    pub drops: std::collections::BTreeMap<String, usize>,
}

fn midi_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Analyzes every file in the corpus; failures are counted, not fatal.
pub fn extract_corpus(
    files: &[PathBuf],
    opts: &AnalysisOptions,
    workers: usize,
) -> (ExtractOutcome, Vec<(PathBuf, String)>) {
    let results = map_ordered(files, workers, |path| {
        let song = read_song(path)?;
        let source = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        extract_song(&song, &source, opts).map_err(|source| CliError::Analysis {
            path: path.clone(),
            source,
        })
    });
    let mut all = ExtractOutcome::default();
    let mut skipped = Vec::new();
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(o) => all.merge(o),
            Err(e) => skipped.push((path.clone(), e.to_string())),
        }
    }
    (all, skipped)
}

pub fn cmd_extract(args: &ExtractArgs, cfg: &PipelineConfig) -> Result<Report, CliError> {
    let corpus = args
        .corpus
        .clone()
        .or_else(|| cfg.paths.corpus.clone())
        .ok_or_else(|| CliError::Usage("extract needs a corpus directory".into()))?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| CliError::Usage("extract needs --out".into()))?;
    let opts = cfg.analysis_options()?;
    let files = midi_files(&corpus)?;
    let (outcome, skipped) = extract_corpus(&files, &opts, worker_count());
    let text_out: String = outcome.segments.iter().map(|s| s.to_json_line() + "\n").collect();
    let summary = ExtractSummary {
        files_read: files.len() - skipped.len(),
        files_skipped: skipped.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect(),
        windows: outcome.windows(),
        segments: outcome.segments.len(),
        dropped: outcome.dropped(),
        drops: outcome.drops.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    };
    let prov = Provenance::new("extract", cfg.hash(), json!({}), text_out.as_bytes()).with("summary", &summary);
    write_artifact(&out, text_out.as_bytes(), &prov)?;
    let drops: Vec<String> = summary.drops.iter().map(|(k, v)| format!("{k} {v}")).collect();
    let text = format!(
        "files read {}, skipped {}; windows {}; segments kept {}; dropped {} ({})\n",
        summary.files_read,
        skipped.len(),
        summary.windows,
        summary.segments,
        summary.dropped,
        if drops.is_empty() { "none".into() } else { drops.join(", ") }
    );
    let mut report = Report::new(text, serde_json::to_value(&summary).expect("summary serializes"));
    if files.is_empty() {
        report.warnings.push(format!("no MIDI files in {}; wrote an empty dataset", corpus.display()));
    }
    for (p, e) in &skipped {
        report.warnings.push(format!("skipped {}: {e}", p.display()));
    }
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSONL dataset from `extract`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss history CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Override the configured step count.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_train(args: &TrainArgs, cfg: &PipelineConfig) -> Result<Report, CliError> {
    let data_path = args
        .data
        .clone()
        .or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| CliError::Usage("train needs --data".into()))?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| CliError::Usage("train needs --out".into()))?;
    let mut cfg = cfg.clone();
    if let Some(s) = args.steps {
        cfg.cvae.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.cvae.seed = s;
    }
    let text = std::fs::read_to_string(&data_path).map_err(|e| CliError::io(&data_path, e))?;
    let data = read_dataset(&text)?;
    if data.is_empty() {
        return Err(CvaeError::EmptyDataset.into());
    }
    let mut trainer = Trainer::new(CvaeModel::new(cfg.cvae.clone())?);
    let seeds = json!({ "model": cfg.cvae.seed });
    let csv_path = args.loss_csv.clone().unwrap_or_else(|| with_suffix(&out, ".loss.csv"));
    for _ in 0..cfg.cvae.steps {
        if let Err(e) = trainer.step(&data) {
            if let CvaeError::NonFinite { snapshot, .. } = &e {
                let failed = with_suffix(&out, ".failed");
                let bytes = checkpoint::to_bytes(snapshot);
                let prov = Provenance::new("train", cfg.hash(), seeds.clone(), &bytes);
                write_artifact(&failed, &bytes, &prov)?;
                let csv = trainer.history.to_csv();
                write_artifact(&csv_path, csv.as_bytes(), &Provenance::new("train", cfg.hash(), seeds, csv.as_bytes()))?;
            }
            return Err(e.into());
        }
    }
    let bytes = checkpoint::to_bytes(&trainer.model);
    let prov = Provenance::new("train", cfg.hash(), seeds.clone(), &bytes)
        .with("dataset_hash", hash_hex(text.as_bytes()))
        .with("segments", data.len());
    write_artifact(&out, &bytes, &prov)?;
    let csv = trainer.history.to_csv();
    write_artifact(&csv_path, csv.as_bytes(), &Provenance::new("train", cfg.hash(), seeds, csv.as_bytes()))?;
    let h = &trainer.history;
    let last = h.records.last();
    let summary = json!({
        "steps": h.len(),
        "parameters": trainer.model.parameter_count(),
        "final_reproduction": last.map(|r| r.reproduction),
        "final_kl": last.map(|r| r.kl),
        "checkpoint": out,
        "loss_csv": csv_path,
    });
    let text = format!(
        "trained {} steps on {} segments ({} parameters); final reproduction {:.4}, kl {:.4}\ncheckpoint {}\nloss history {}\n",
        h.len(),
        data.len(),
        trainer.model.parameter_count(),
        last.map_or(f64::NAN, |r| r.reproduction),
        last.map_or(f64::NAN, |r| r.kl),
        out.display(),
        csv_path.display()
    );
    Ok(Report::new(text, summary))
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output MIDI file.
    #[arg(long)]
    pub out: PathBuf,
    /// Grammar file (default: config, else the bundled grammar).
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    /// Start symbol (default: the first rule).
    #[arg(long)]
    pub start: Option<String>,
    /// Seed for grammar choices and latent draws (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Standard deviation of motif variations.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Tonic pitch class name, e.g. C, F#, Bb.
    #[arg(long, default_value = "C")]
    pub tonic: String,
    /// Mode the grammar's degrees are read in.
    #[arg(long, default_value = "major")]
    pub mode: String,
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    s.parse().map_err(|_| CliError::Usage(format!("unknown mode {s:?}")))
}

fn load_model(path: Option<&PathBuf>, cfg: &PipelineConfig) -> Result<CvaeModel, CliError> {
    let path = path
        .or(cfg.paths.checkpoint.as_ref())
        .ok_or_else(|| CliError::Usage("a --checkpoint is required".into()))?;
    Ok(checkpoint::load(path)?)
}

fn plan_text(plan: &SectionPlan) -> String {
    let mut s = String::new();
    for (i, sec) in plan.sections.iter().enumerate() {
        let _ = writeln!(s, "  {}: {sec}", i + 1);
    }
    s
}

pub fn cmd_generate(args: &GenerateArgs, cfg: &PipelineConfig) -> Result<Report, CliError> {
    let model = load_model(args.checkpoint.as_ref(), cfg)?;
    let grammar = match args.grammar.as_ref().or(cfg.paths.grammar.as_ref()) {
        Some(p) => Grammar::load(p)?,
        None => Grammar::default(),
    };
    let start = args.start.clone().unwrap_or_else(|| grammar.first_rule().to_string());
    let tonic = parse_pitch_class(&args.tonic).ok_or_else(|| CliError::Usage(format!("unknown tonic {:?}", args.tonic)))?;
    let mode = parse_mode(&args.mode)?;
    if args.sigma.is_nan() || args.sigma < 0.0 {
        return Err(CliError::Usage("--sigma must be non-negative".into()));
    }
    let (expand_seed, latent_seed) = match args.seed {
        Some(s) => (s, s),
        None => (cfg.seeds.expand, cfg.seeds.latents),
    };
    let plan = expand(
        &grammar,
        &start,
        &ExpandOptions {
            seed: expand_seed,
            mode,
            ..Default::default()
        },
    )?;
    let latents = assign_latents(&plan, model.config.latent_dim, args.sigma, latent_seed);
    let song = generate(&model, &plan, &latents, tonic)?;
    let seeds = json!({ "expand": expand_seed, "latents": latent_seed, "sigma": args.sigma });
    let prov = Provenance::new("generate", cfg.hash(), seeds, &[])
        .with("model_config_hash", hash_hex(serde_json::to_string(&model.config).expect("serializes").as_bytes()))
        .with("grammar", grammar.to_string())
        .with("start", &start);
    write_song(&song, &args.out, prov)?;
    let text = format!(
        "{} sections, {} measures, written to {}\n{}",
        plan.sections.len(),
        song.end / Beat::from_integer(4),
        args.out.display(),
        plan_text(&plan)
    );
    let json = json!({ "out": args.out, "plan": plan, "tags": plan.tags().map(|t| t.to_string()).collect::<Vec<_>>() });
    Ok(Report::new(text, json))
}

#[derive(Debug, Clone, Args)]
pub struct ReharmonizeArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Song to reharmonize.
    #[arg(long)]
    pub input: PathBuf,
    /// Output MIDI file.
    #[arg(long)]
    pub out: PathBuf,
    /// New progression in grammar notation, e.g. "ii V I:2"; repeated to
    /// fill each segment.
    #[arg(long)]
    pub chords: Option<String>,
    /// New mode; chords keep their degrees and take the new mode's triads.
    #[arg(long)]
    pub mode: Option<String>,
    /// Sample the latent instead of using the posterior mean.
    #[arg(long)]
    pub sample: bool,
    /// Seed for latent sampling (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Half-measure slots of a progression written in grammar notation.
pub fn progression_slots(text: &str, mode: Mode) -> Result<Vec<ChordSlot>, CliError> {
    let g = Grammar::parse(text)?;
    let plan = expand(&g, g.first_rule(), &ExpandOptions { mode, ..Default::default() })?;
    let mut slots = Vec::new();
    for c in plan.sections.iter().flat_map(|s| &s.chords) {
        let n = (c.measures * Beat::from_integer(SLOTS_PER_MEASURE as i64)).to_integer() as usize;
        slots.extend(std::iter::repeat_n(
            ChordSlot {
                degree: Some(c.degree),
                qualities: c.qualities,
            },
            n,
        ));
    }
    if slots.is_empty() {
        return Err(CliError::Usage("progression has no chords".into()));
    }
    Ok(slots)
}

pub fn cmd_reharmonize(args: &ReharmonizeArgs, cfg: &PipelineConfig) -> Result<Report, CliError> {
    let model = load_model(args.checkpoint.as_ref(), cfg)?;
    let song = read_song(&args.input)?;
    let mode = args.mode.as_deref().map(parse_mode).transpose()?;
    let slots = match &args.chords {
        Some(c) => Some(progression_slots(c, mode.unwrap_or(Mode::Major))?),
        None => None,
    };
    if slots.is_none() && mode.is_none() {
        return Err(CliError::Usage("give --chords, --mode or both".into()));
    }
    let target = Reharmonization {
        slots,
        mode,
        sample_latent: args.sample,
    };
    let seed = args.seed.unwrap_or(cfg.seeds.reharmonize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = args.input.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let opts = cfg.analysis_options()?;
    let (out, segs) = reharmonize(&model, &song, &source, &opts, &target, &mut rng)?;
    let prov = Provenance::new("reharmonize", cfg.hash(), json!({ "reharmonize": seed }), &[])
        .with("input_hash", hash_hex(&std::fs::read(&args.input).map_err(|e| CliError::io(&args.input, e))?));
    write_song(&out, &args.out, prov)?;
    let mut text = format!("reharmonized {} segment(s) into {}\n", segs.len(), args.out.display());
    for s in &segs {
        let slots: Vec<String> = s.condition.slots.iter().map(ChordSlot::to_string).collect();
        let _ = writeln!(
            text,
            "  {} (measure {}): {} {} | {}",
            s.id,
            s.start_measure + 1,
            pitch_class_name(s.tonic),
            s.condition.mode,
            slots.join(" ")
        );
    }
    let json = json!({
        "out": args.out,
        "segments": segs.iter().map(|s| json!({
            "id": s.id,
            "start_measure": s.start_measure,
            "tonic": s.tonic,
            "mode": s.condition.mode,
        })).collect::<Vec<_>>(),
    });
    Ok(Report::new(text, json))
}
