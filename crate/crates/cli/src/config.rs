//! Pipeline configuration file (TOML).
//!
//! ```toml
//! [paths]
//! grammar = "song.grammar"       # chord grammar for `generate`
//! templates = "templates.txt"    # chord templates
//! instruments = "instruments.toml"
//! rubric = "rubric.toml"         # melody rubric weights
//!
//! [analysis]
//! bins = "half"                  # half | one | two | auto
//! chords_without_melody = false
//!
//! [seeds]
//! expand = 0
//! latents = 0
//! reharmonize = 0
//!
//! [cvae]
//! hidden_dim = 64
//! steps = 10000
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tunegram_core::harmony::{BinPolicy, ChordDetector, TemplateSet};
use tunegram_core::melody::{InstrumentTable, RubricWeights};
use tunegram_core::pipeline::AnalysisOptions;
use tunegram_cvae::CvaeConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub grammar: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub instruments: Option<PathBuf>,
    pub rubric: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub bins: String,
    pub chords_without_melody: bool,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            bins: "half".into(),
            chords_without_melody: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub expand: u64,
    pub latents: u64,
    pub reharmonize: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub analysis: AnalysisSettings,
    pub seeds: Seeds,
    pub cvae: CvaeConfig,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file and checks that every input file it names exists.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.corpus,
            &mut p.dataset,
            &mut p.checkpoint,
            &mut p.grammar,
            &mut p.templates,
            &mut p.instruments,
            &mut p.rubric,
        ] {
            resolve(base, slot);
        }
        for (what, file) in [
            ("grammar", &p.grammar),
            ("templates", &p.templates),
            ("instruments", &p.instruments),
            ("rubric", &p.rubric),
        ] {
            if let Some(f) = file {
                if !f.is_file() {
                    return Err(CliError::Config(format!("{what} file {} does not exist", f.display())));
                }
            }
        }
        cfg.bins()?;
        cfg.cvae.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn bins(&self) -> Result<BinPolicy, CliError> {
        self.analysis.bins.parse().map_err(CliError::Config)
    }

    pub fn analysis_options(&self) -> Result<AnalysisOptions, CliError> {
        let data = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        let mut opts = AnalysisOptions {
            bins: self.bins()?,
            chords_without_melody: self.analysis.chords_without_melody,
            ..Default::default()
        };
        if let Some(p) = &self.paths.instruments {
            opts.instruments = InstrumentTable::load(p).map_err(|e| data(&e))?;
        }
        if let Some(p) = &self.paths.rubric {
            opts.weights = RubricWeights::load(p).map_err(|e| data(&e))?;
        }
        if let Some(p) = &self.paths.templates {
            opts.detector = ChordDetector {
                templates: TemplateSet::load(p).map_err(|e| data(&e))?,
                ..Default::default()
            };
        }
        Ok(opts)
    }

    /// SHA-256 of the config's canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hash_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = PipelineConfig::parse("[cvae]\nhidden_dim = 12\n[seeds]\nexpand = 4\n").unwrap();
        assert_eq!(cfg.cvae.hidden_dim, 12);
        assert_eq!(cfg.cvae.latent_dim, CvaeConfig::default().latent_dim);
        assert_eq!(cfg.seeds.expand, 4);
        assert!(PipelineConfig::parse("[cvae]\nhidden = 3\n").is_err());
        assert_ne!(cfg.hash(), PipelineConfig::default().hash());
        assert_eq!(cfg.hash(), cfg.clone().hash());
    }

    #[test]
    fn missing_inputs_are_rejected() {
        let dir = std::env::temp_dir().join(format!("tunegram-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.toml");
        std::fs::write(&path, "[paths]\ngrammar = \"nope.grammar\"\n").unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(CliError::Config(_))));
        std::fs::write(dir.join("g.grammar"), "I IV V I").unwrap();
        std::fs::write(&path, "[paths]\ngrammar = \"g.grammar\"\n").unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.grammar, Some(dir.join("g.grammar")));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
