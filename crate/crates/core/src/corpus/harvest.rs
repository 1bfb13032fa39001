use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::{detect_entities, filter_records, pair_entities, retrieve_triple, Gazetteer, Record, TripleStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestConfig {
    /// Similarity threshold for retrieval.
    pub kappa: f64,
    /// Entity-recall cutoff for keeping a sentence.
    pub min_recall: f64,
    /// Capitalized-run fallback in the entity detector (`0` disables it).
    pub capitalized_min_run: usize,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        HarvestConfig {
            kappa: 0.75,
            min_recall: 0.3,
            capitalized_min_run: 2,
        }
    }
}

/// Extracts triples for each tokenized sentence and keeps the sentences whose
/// entity-recall passes the cutoff. Sentences with no retrievable triple are
/// dropped.
pub fn harvest(sentences: &[Vec<String>], store: &TripleStore, cfg: &HarvestConfig) -> Result<Vec<Record>> {
    let mut gazetteer = Gazetteer::new(store.entity_names());
    gazetteer.capitalized_min_run = (cfg.capitalized_min_run > 0).then_some(cfg.capitalized_min_run);
    let mut records = Vec::new();
    for sentence in sentences {
        if sentence.is_empty() {
            continue;
        }
        let spans = detect_entities(sentence, &gazetteer);
        let mut seen = HashSet::new();
        let mut triples = Vec::new();
        for (a, b) in pair_entities(&spans) {
            if let Some(hit) = retrieve_triple((&a, &b), store, cfg.kappa)? {
                if seen.insert(hit.index) {
                    triples.push(hit.triple);
                }
            }
        }
        if triples.is_empty() {
            continue;
        }
        records.push(Record::new(triples, sentence.clone())?);
    }
    filter_records(records, cfg.min_recall)
}
