use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{KBTriple, Record, TripleStore};

const RELATIONS: [&str; 20] = [
    "developed by",
    "located in",
    "born in",
    "member of",
    "genre",
    "author of",
    "capital of",
    "instance of",
    "part of",
    "founded by",
    "educated at",
    "plays for",
    "directed by",
    "published by",
    "spouse of",
    "country",
    "occupation",
    "headquartered in",
    "composed by",
    "named after",
];

const ENTITY_ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const ENTITY_VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const NOISE_ONSETS: &[&str] = &["ch", "sh", "th", "wh", "qu", "x", "j", "y"];
const NOISE_VOWELS: &[&str] = &["ou", "ei", "ay", "oo"];

/// Parameters of the synthetic partially-aligned corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub records: usize,
    pub entities: usize,
    pub relations: usize,
    pub min_triples: usize,
    pub max_triples: usize,
    /// Fraction `rho` of distractor tokens injected per sentence, in `[0, 1)`.
    pub noise_rate: f64,
    /// Size of the distractor vocabulary, disjoint from the template words.
    pub noise_vocab: usize,
    /// Probability that a distractor is drawn from the words tied to one of
    /// the record's relations instead of uniformly.
    pub noise_affinity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            records: 2300,
            entities: 120,
            relations: 12,
            min_triples: 1,
            max_triples: 3,
            noise_rate: 0.3,
            noise_vocab: 24,
            noise_affinity: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic corpus: {m}")));
        if self.records == 0 || self.entities < 2 || self.relations == 0 || self.noise_vocab == 0 {
            return bad(
                "record, entity, relation and noise-vocabulary counts must be positive (at least two entities)",
            );
        }
        if self.relations > RELATIONS.len() {
            return bad(&format!("at most {} relations are available", RELATIONS.len()));
        }
        if self.min_triples == 0 || self.min_triples > self.max_triples {
            return bad("need 1 <= min_triples <= max_triples");
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad("noise_rate must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.noise_affinity) {
            return bad("noise_affinity must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Number of distractors for a clean sentence of `m` tokens: `ceil(rho * m)`,
/// computed with a small slack so that e.g. `0.3 * 10` gives 3.
pub(crate) fn noise_count(rho: f64, m: usize) -> usize {
    let x = rho * m as f64;
    (x - 1e-9).ceil().max(0.0) as usize
}

fn make_word(rng: &mut ChaCha8Rng, onsets: &[&str], vowels: &[&str], syllables: usize) -> String {
    (0..syllables)
        .map(|_| format!("{}{}", onsets.choose(rng).unwrap(), vowels.choose(rng).unwrap()))
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct World {
    entities: Vec<String>,
    relations: Vec<&'static str>,
    /// Per entity: (relation index, tail entity index).
    facts: Vec<Vec<(usize, usize)>>,
    noise_words: Vec<String>,
}

impl World {
    fn generate(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> World {
        let mut used = HashSet::new();
        let mut pool = Vec::new();
        while pool.len() < cfg.entities {
            let syl = rng.gen_range(2..=3);
            let w = capitalize(&make_word(rng, ENTITY_ONSETS, ENTITY_VOWELS, syl));
            if used.insert(w.to_lowercase()) {
                pool.push(w);
            }
        }
        let mut names = HashSet::new();
        let mut entities = Vec::new();
        while entities.len() < cfg.entities {
            let name = if rng.gen_bool(0.5) {
                pool.choose(rng).unwrap().clone()
            } else {
                format!("{} {}", pool.choose(rng).unwrap(), pool.choose(rng).unwrap())
            };
            if names.insert(name.clone()) {
                entities.push(name);
            }
        }
        let relation_words: HashSet<&str> = RELATIONS.iter().flat_map(|r| r.split(' ')).collect();
        let mut noise_words = Vec::new();
        while noise_words.len() < cfg.noise_vocab {
            let w = make_word(rng, NOISE_ONSETS, NOISE_VOWELS, 2);
            if !used.contains(&w) && !relation_words.contains(w.as_str()) && used.insert(w.clone()) {
                noise_words.push(w);
            }
        }
        let relations: Vec<&'static str> = RELATIONS[..cfg.relations].to_vec();
        let facts = (0..cfg.entities)
            .map(|e| {
                let k =
                    rng.gen_range(cfg.max_triples.min(relations.len())..=(cfg.max_triples + 2).min(relations.len()));
                let mut rels: Vec<usize> = (0..relations.len()).collect();
                rels.shuffle(rng);
                rels.truncate(k);
                rels.into_iter()
                    .map(|r| {
                        let mut t = rng.gen_range(0..cfg.entities);
                        while t == e {
                            t = rng.gen_range(0..cfg.entities);
                        }
                        (r, t)
                    })
                    .collect()
            })
            .collect();
        World {
            entities,
            relations,
            facts,
            noise_words,
        }
    }

    fn triple(&self, subject: usize, (rel, tail): (usize, usize)) -> KBTriple {
        KBTriple::new(&self.entities[subject], self.relations[rel], &self.entities[tail])
            .expect("generated fields are non-empty")
    }

    fn tied_noise(&self, rel: usize) -> [usize; 2] {
        let n = self.noise_words.len();
        [(2 * rel) % n, (2 * rel + 1) % n]
    }
}

/// Generates a corpus whose sentences verbalize their triples and carry
/// `ceil(rho * m)` injected distractor tokens at random positions.
///
/// Each sentence names its subject once, then every fact's relation and tail
/// words. Distractors are labeled in `noise_mask`. Deterministic per seed.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<Vec<Record>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::generate(cfg, &mut rng);
    let mut out = Vec::with_capacity(cfg.records);
    for _ in 0..cfg.records {
        let subject = rng.gen_range(0..cfg.entities);
        let facts = &world.facts[subject];
        let n = rng.gen_range(cfg.min_triples..=cfg.max_triples).min(facts.len());
        let chosen: Vec<(usize, usize)> = facts.choose_multiple(&mut rng, n).copied().collect();

        let mut text: Vec<String> = super::tokenize(&world.entities[subject]);
        for &(rel, tail) in &chosen {
            text.extend(super::tokenize(world.relations[rel]));
            text.extend(super::tokenize(&world.entities[tail]));
        }
        let mut labeled: Vec<(String, u8)> = text.into_iter().map(|w| (w, 0)).collect();
        for _ in 0..noise_count(cfg.noise_rate, labeled.len()) {
            let word = if rng.gen_bool(cfg.noise_affinity) {
                let rel = chosen.choose(&mut rng).unwrap().0;
                *world.tied_noise(rel).choose(&mut rng).unwrap()
            } else {
                rng.gen_range(0..world.noise_words.len())
            };
            let pos = rng.gen_range(0..=labeled.len());
            labeled.insert(pos, (world.noise_words[word].clone(), 1));
        }
        let triples = chosen.iter().map(|&f| world.triple(subject, f)).collect();
        let (text, mask): (Vec<String>, Vec<u8>) = labeled.into_iter().unzip();
        let mut rec = Record::new(triples, text)?;
        rec.noise_mask = Some(mask);
        out.push(rec);
    }
    Ok(out)
}

/// The full fact base behind [`synth_corpus`] for the same config and seed.
pub fn synth_store(cfg: &SynthConfig, seed: u64) -> Result<TripleStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::generate(cfg, &mut rng);
    let triples = world
        .facts
        .iter()
        .enumerate()
        .flat_map(|(s, fs)| fs.iter().map(move |&f| (s, f)))
        .map(|(s, f)| world.triple(s, f))
        .collect();
    TripleStore::new(triples, BTreeMap::new())
}

impl Record {
    /// The record with its labeled distractors removed and recall recomputed.
    /// Records without a noise mask come back unchanged.
    pub fn without_noise(&self) -> Record {
        let Some(mask) = &self.noise_mask else {
            return self.clone();
        };
        let text: Vec<String> = self
            .text
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m == 0)
            .map(|(w, _)| w.clone())
            .collect();
        Record {
            entity_recall: super::entity_recall(&self.triples, &text),
            noise_mask: Some(vec![0; text.len()]),
            triples: self.triples.clone(),
            text,
        }
    }
}
