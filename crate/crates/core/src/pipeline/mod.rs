//! Experiment driver: configuration, the in-memory experiment steps and the
//! file-backed commands behind the command-line tool.

mod commands;
mod config;
mod run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptors::AdaptorChoice;
use crate::error::{Error, Result};

pub use commands::{
    cmd_audit_overgen, cmd_decode, cmd_evaluate, cmd_harvest, cmd_sweep, cmd_train_gen, cmd_train_se, OvergenAudit,
    RunDir, Separation, SystemReport, TrendPoint, MANIFEST,
};
pub use config::{
    CorpusConfig, CorpusKind, DecodingConfig, EvalConfig, RunConfig, SplitConfig, SweepConfig, TokenizerConfig,
};
pub use run::{
    build_splits, corpus_stats, decode_records, fit_tokenizer, references, run_systems, score_decoded, train_estimator,
    train_generator, CorpusStats, Decoded, SplitStats, Splits, SystemResult,
};

/// A generator adaptor paired with a decoding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct System {
    pub adaptor: AdaptorChoice,
    pub rbs: bool,
}

impl System {
    /// Plain likelihood training, plain beam search.
    pub const S2ST: System = System::new(AdaptorChoice::None, false);
    /// Soft adaptor with rebalanced beam search.
    pub const DSG: System = System::new(AdaptorChoice::Soft, true);
    pub const DSG_NO_RBS: System = System::new(AdaptorChoice::Soft, false);
    pub const DSG_NO_SA: System = System::new(AdaptorChoice::None, true);
    pub const DSG_H: System = System::new(AdaptorChoice::Hard, true);
    pub const DSG_A: System = System::new(AdaptorChoice::Attention, true);

    pub const TABLE: [System; 6] = [
        System::S2ST,
        System::DSG,
        System::DSG_NO_RBS,
        System::DSG_NO_SA,
        System::DSG_H,
        System::DSG_A,
    ];

    pub const fn new(adaptor: AdaptorChoice, rbs: bool) -> Self {
        System { adaptor, rbs }
    }

    pub fn name(self) -> String {
        let named = match (self.adaptor, self.rbs) {
            (AdaptorChoice::None, false) => "s2st",
            (AdaptorChoice::None, true) => "dsg-no-sa",
            (AdaptorChoice::Soft, true) => "dsg",
            (AdaptorChoice::Soft, false) => "dsg-no-rbs",
            (AdaptorChoice::Hard, true) => "dsg-h",
            (AdaptorChoice::Hard, false) => "dsg-h-no-rbs",
            (AdaptorChoice::Attention, true) => "dsg-a",
            (AdaptorChoice::Attention, false) => "dsg-a-no-rbs",
        };
        named.to_owned()
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AdaptorChoice::None,
            AdaptorChoice::Soft,
            AdaptorChoice::Hard,
            AdaptorChoice::Attention,
        ]
        .into_iter()
        .flat_map(|a| [System::new(a, false), System::new(a, true)])
        .find(|sys| sys.name() == s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown system `{s}`")))
    }
}

impl TryFrom<String> for System {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<System> for String {
    fn from(s: System) -> String {
        s.name()
    }
}
