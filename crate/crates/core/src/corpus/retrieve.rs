use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

use super::{EntitySpan, KBTriple};

/// Which way a retrieved triple lines up with the queried entity pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// First entity matches the head, second the tail (`d = 1`).
    Forward,
    /// First entity matches the tail, second the head (`d = 0`).
    Reversed,
}

impl Orientation {
    pub fn d(self) -> u8 {
        match self {
            Orientation::Forward => 1,
            Orientation::Reversed => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTriple {
    /// Position of the triple in the store.
    pub index: usize,
    pub triple: KBTriple,
    pub orientation: Orientation,
    pub score: f64,
}

#[derive(Clone, Debug)]
struct EntityDoc {
    variants: Vec<String>,
    tokens: HashSet<String>,
}

/// Local triple store with alias-expanded entity names and a tf-idf term index.
#[derive(Clone, Debug)]
pub struct TripleStore {
    triples: Vec<KBTriple>,
    aliases: BTreeMap<String, Vec<String>>,
    entities: Vec<EntityDoc>,
    entity_ids: HashMap<String, usize>,
    ends: Vec<(usize, usize)>,
    idf: HashMap<String, f64>,
}

fn fold_tokens(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().map(str::to_lowercase)
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)` over case-folded characters.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.to_lowercase().chars().collect();
    let b: Vec<char> = b.to_lowercase().chars().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    1.0 - prev[b.len()] as f64 / longest as f64
}

impl TripleStore {
    /// Builds the store. Every alias key must name an entity that occurs as a
    /// head or tail of some triple.
    pub fn new(triples: Vec<KBTriple>, aliases: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut entity_ids: HashMap<String, usize> = HashMap::new();
        let mut names: Vec<String> = Vec::new();
        let mut ends = Vec::with_capacity(triples.len());
        for t in &triples {
            let mut id_of = |name: &str| {
                *entity_ids.entry(name.to_owned()).or_insert_with(|| {
                    names.push(name.to_owned());
                    names.len() - 1
                })
            };
            let h = id_of(&t.head);
            let tl = id_of(&t.tail);
            ends.push((h, tl));
        }
        for canonical in aliases.keys() {
            if !entity_ids.contains_key(canonical) {
                return Err(Error::InvalidConfig(format!(
                    "alias entry `{canonical}` matches no stored triple"
                )));
            }
        }
        let entities: Vec<EntityDoc> = names
            .iter()
            .map(|name| {
                let mut variants = vec![name.to_lowercase()];
                if let Some(alts) = aliases.get(name) {
                    variants.extend(alts.iter().map(|a| a.to_lowercase()));
                }
                let tokens = variants.iter().flat_map(|v| fold_tokens(v)).collect();
                EntityDoc { variants, tokens }
            })
            .collect();
        let mut df: HashMap<String, usize> = HashMap::new();
        for e in &entities {
            for tok in &e.tokens {
                *df.entry(tok.clone()).or_default() += 1;
            }
        }
        let n = entities.len() as f64;
        let idf = df
            .into_iter()
            .map(|(tok, c)| (tok, ((n + 1.0) / (c as f64 + 1.0)).ln() + 1.0))
            .collect();
        Ok(TripleStore {
            triples,
            aliases,
            entities,
            entity_ids,
            ends,
            idf,
        })
    }

    pub fn triples(&self) -> &[KBTriple] {
        &self.triples
    }

    pub fn aliases(&self) -> &BTreeMap<String, Vec<String>> {
        &self.aliases
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Canonical names and aliases of every stored entity.
    pub fn entity_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entity_ids.keys().cloned().collect();
        out.extend(self.aliases.values().flatten().cloned());
        out.sort();
        out.dedup();
        out
    }

    fn idf(&self, tok: &str) -> f64 {
        // Unseen terms get the weight of a term with document frequency 0.
        self.idf
            .get(tok)
            .copied()
            .unwrap_or_else(|| (self.entities.len() as f64 + 1.0).ln() + 1.0)
    }

    fn doc_term_score(&self, query_tokens: &HashSet<String>, doc: &EntityDoc) -> f64 {
        let mut shared: Vec<&String> = query_tokens.intersection(&doc.tokens).collect();
        shared.sort();
        shared.into_iter().map(|t| self.idf(t)).sum()
    }

    fn doc_similarity(query: &str, doc: &EntityDoc) -> f64 {
        doc.variants
            .iter()
            .map(|v| edit_similarity(query, v))
            .fold(0.0, f64::max)
    }

    fn entity_doc(&self, entity: &str) -> Option<&EntityDoc> {
        self.entity_ids.get(entity).map(|&i| &self.entities[i])
    }

    /// Single-term matching score `g(query, entity)`: summed idf of the
    /// case-folded tokens shared with any name variant of `entity`.
    pub fn term_score(&self, query: &str, entity: &str) -> f64 {
        let q: HashSet<String> = fold_tokens(query).collect();
        self.entity_doc(entity).map_or(0.0, |doc| self.doc_term_score(&q, doc))
    }

    /// String similarity `l(query, entity)`: best edit similarity over the
    /// entity's name variants.
    pub fn name_similarity(&self, query: &str, entity: &str) -> f64 {
        self.entity_doc(entity)
            .map_or(0.0, |doc| Self::doc_similarity(query, doc))
    }

    /// Reads a tab-separated triple file and an optional `canonical\talias` file.
    pub fn load<R1: BufRead, R2: BufRead>(triples: R1, aliases: Option<R2>) -> Result<Self> {
        let mut ts = Vec::new();
        for (i, line) in triples.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::parse(
                    format!("triple store line {}", i + 1),
                    "expected head<TAB>relation<TAB>tail",
                ));
            }
            ts.push(KBTriple::new(parts[0], parts[1], parts[2])?);
        }
        let mut al: BTreeMap<String, Vec<String>> = BTreeMap::new();
        if let Some(r) = aliases {
            for (i, line) in r.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let (canon, alias) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::parse(format!("alias line {}", i + 1), "expected canonical<TAB>alias"))?;
                al.entry(canon.trim().to_owned())
                    .or_default()
                    .push(alias.trim().to_owned());
            }
        }
        TripleStore::new(ts, al)
    }

    pub fn write_triples<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.triples {
            writeln!(w, "{}\t{}\t{}", t.head, t.relation, t.tail)?;
        }
        Ok(())
    }

    pub fn write_aliases<W: Write>(&self, mut w: W) -> Result<()> {
        for (canon, alts) in &self.aliases {
            for a in alts {
                writeln!(w, "{canon}\t{a}")?;
            }
        }
        Ok(())
    }
}

/// Finds the stored triple whose head and tail best match the entity pair,
/// in either orientation, subject to the similarity threshold `kappa` on the
/// two ends that the orientation binds.
///
/// Ties go to the earlier triple, then to the forward orientation.
pub fn retrieve_triple(
    pair: (&EntitySpan, &EntitySpan),
    store: &TripleStore,
    kappa: f64,
) -> Result<Option<ScoredTriple>> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::InvalidThreshold(kappa));
    }
    if store.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (first, second) = (&pair.0.surface, &pair.1.surface);
    let first_toks: HashSet<String> = fold_tokens(first).collect();
    let second_toks: HashSet<String> = fold_tokens(second).collect();
    // Per-entity scores, shared by every triple mentioning the entity.
    let score_all = |query: &str, toks: &HashSet<String>| -> Vec<(f64, f64)> {
        store
            .entities
            .iter()
            .map(|doc| (TripleStore::doc_similarity(query, doc), store.doc_term_score(toks, doc)))
            .collect()
    };
    let a = score_all(first, &first_toks);
    let b = score_all(second, &second_toks);

    let mut best: Option<(usize, Orientation, f64)> = None;
    for (idx, &(h, t)) in store.ends.iter().enumerate() {
        let candidates = [(Orientation::Forward, a[h], b[t]), (Orientation::Reversed, b[h], a[t])];
        for (orientation, head_side, tail_side) in candidates {
            if head_side.0 < kappa || tail_side.0 < kappa {
                continue;
            }
            let score = head_side.1 + tail_side.1;
            if best.is_none_or(|(_, _, s)| score > s) {
                best = Some((idx, orientation, score));
            }
        }
    }
    Ok(best.map(|(index, orientation, score)| ScoredTriple {
        index,
        triple: store.triples[index].clone(),
        orientation,
        score,
    }))
}
