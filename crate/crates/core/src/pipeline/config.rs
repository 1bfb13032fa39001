use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptors::AdaptorChoice;
use crate::corpus::{HarvestConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::estimator::SeConfig;
use crate::generator::GenConfig;
use crate::metrics::NgramWindow;
use crate::nn::TrainConfig;

use super::System;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// Generated partially-aligned corpus with labeled distractors.
    #[default]
    Synthetic,
    /// Raw sentences aligned against a triple store.
    Harvest,
    /// Pre-built records in JSON lines.
    Records,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    pub synthetic: SynthConfig,
    pub harvest: HarvestConfig,
    /// One whitespace-tokenized sentence per line (harvest).
    pub sentences: Option<PathBuf>,
    /// `head<TAB>relation<TAB>tail` lines (harvest).
    pub triples: Option<PathBuf>,
    /// `entity<TAB>alias` lines (harvest, optional).
    pub aliases: Option<PathBuf>,
    /// Records file (records).
    pub records: Option<PathBuf>,
}

/// Split sizes. Test records come first, then dev, then train, so growing
/// the train size only appends records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 2000,
            dev: 200,
            test: 100,
        }
    }
}

impl SplitConfig {
    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub merges: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { merges: 300 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub beam: usize,
    pub max_len: usize,
    pub alpha: f64,
    pub rbs: bool,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            beam: 4,
            max_len: 40,
            alpha: 0.1,
            rbs: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ngram_window: NgramWindow,
    pub systems: Vec<System>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ngram_window: NgramWindow::After,
            systems: System::TABLE.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub systems: Vec<System>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sizes: vec![500, 1000, 2000],
            systems: vec![System::S2ST, System::DSG],
        }
    }
}

/// Everything a run depends on besides its input files. The defaults are
/// desk-scale: small models that train on a single CPU in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Adaptor trained by `train-gen` and used by `decode` when no override is given.
    pub adaptor: AdaptorChoice,
    pub corpus: CorpusConfig,
    pub split: SplitConfig,
    pub tokenizer: TokenizerConfig,
    pub se: SeConfig,
    pub se_train: TrainConfig,
    pub generator: GenConfig,
    pub generator_train: TrainConfig,
    pub decoding: DecodingConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            adaptor: AdaptorChoice::Soft,
            corpus: CorpusConfig::default(),
            split: SplitConfig::default(),
            tokenizer: TokenizerConfig::default(),
            se: SeConfig {
                dim: 32,
                hidden: 64,
                ..SeConfig::default()
            },
            se_train: TrainConfig {
                lr: 3e-3,
                epochs: 5,
                ..TrainConfig::default()
            },
            generator: GenConfig {
                dim: 32,
                heads: 4,
                ff: 64,
                enc_layers: 1,
                dec_layers: 1,
            },
            generator_train: TrainConfig {
                lr: 2e-3,
                epochs: 10,
                ..TrainConfig::default()
            },
            decoding: DecodingConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative input paths inside it are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_owned()),
            _ => Error::Io(e),
        })?;
        let mut cfg = RunConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.corpus.sentences,
            &mut cfg.corpus.triples,
            &mut cfg.corpus.aliases,
            &mut cfg.corpus.records,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.se_train.validate()?;
        self.generator_train.validate()?;
        self.generator.validate()?;
        if self.se.dim == 0 || self.se.hidden == 0 {
            return bad("estimator dims must be positive".into());
        }
        if self.split.train == 0 || self.split.test == 0 {
            return bad("train and test splits must be non-empty".into());
        }
        let d = &self.decoding;
        if d.beam == 0 || d.max_len == 0 {
            return bad("beam and max_len must be at least 1".into());
        }
        if !(d.alpha >= 0.0 && d.alpha.is_finite()) {
            return bad(format!("alpha must be finite and non-negative, got {}", d.alpha));
        }
        if let Some(&s) = self.sweep.sizes.iter().find(|&&s| s == 0 || s > self.split.train) {
            return bad(format!("sweep size {s} must lie in 1..={}", self.split.train));
        }
        let c = &self.corpus;
        match c.kind {
            CorpusKind::Synthetic => {
                c.synthetic.validate()?;
                if c.synthetic.records < self.split.total() {
                    return bad(format!(
                        "synthetic corpus has {} records but the splits need {}",
                        c.synthetic.records,
                        self.split.total()
                    ));
                }
            }
            CorpusKind::Harvest => {
                if c.sentences.is_none() || c.triples.is_none() {
                    return bad("harvest corpus needs `sentences` and `triples` paths".into());
                }
                if !(0.0..=1.0).contains(&c.harvest.kappa) {
                    return Err(Error::InvalidThreshold(c.harvest.kappa));
                }
                if !(0.0..=1.0).contains(&c.harvest.min_recall) {
                    return Err(Error::InvalidThreshold(c.harvest.min_recall));
                }
            }
            CorpusKind::Records => {
                if c.records.is_none() {
                    return bad("records corpus needs a `records` path".into());
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; embedded in every artifact.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.se.omega_w, 0.05);
        assert_eq!(cfg.se.omega_c, 1.0);
        assert_eq!(cfg.decoding.alpha, 0.1);
        assert_eq!(cfg.corpus.harvest.kappa, 0.75);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[decoding]\nbeam = 2\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.decoding.beam, 2);
        assert_eq!(cfg.decoding.max_len, 40);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "sedd = 1",
            "[decoding]\nalpha = -1.0",
            "[split]\ntrain = 0",
            "[sweep]\nsizes = [5000]",
            "[corpus]\nkind = \"harvest\"",
            "[corpus.synthetic]\nrecords = 10",
            "[se_train]\nseed = 3",
            "[eval]\nsystems = [\"nope\"]",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
