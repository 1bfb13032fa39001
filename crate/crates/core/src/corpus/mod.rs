//! Partially-aligned corpora: triples, records, alignment scoring and I/O.
//!
//! A [`Record`] pairs a list of knowledge-base triples with a target sentence.
//! The sentence may mention facts that none of the triples carry; how much of
//! it the triples cover is measured by [`entity_recall`].

mod detect;
mod harvest;
mod retrieve;
mod synth;

pub use detect::{detect_entities, pair_entities, EntitySpan, Gazetteer};
pub use harvest::{harvest, HarvestConfig};
pub use retrieve::{edit_similarity, retrieve_triple, Orientation, ScoredTriple, TripleStore};
pub use synth::{synth_corpus, synth_store, SynthConfig};

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Literal separator placed between linearized triples.
pub const KBSEP: &str = "KBSEP";

/// Splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

fn normalize_field(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A knowledge-base fact `<head, relation, tail>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KBTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl KBTriple {
    /// Builds a triple, collapsing internal whitespace. Every field must be
    /// non-empty after normalization.
    pub fn new(head: &str, relation: &str, tail: &str) -> Result<Self> {
        let (head, relation, tail) = (normalize_field(head), normalize_field(relation), normalize_field(tail));
        if head.is_empty() || relation.is_empty() || tail.is_empty() {
            return Err(Error::InvalidTriple(format!(
                "<{head}, {relation}, {tail}> has an empty field"
            )));
        }
        Ok(KBTriple { head, relation, tail })
    }

    pub fn fields(&self) -> [&str; 3] {
        [&self.head, &self.relation, &self.tail]
    }
}

impl Serialize for KBTriple {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.fields().serialize(s)
    }
}

impl<'de> Deserialize<'de> for KBTriple {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [h, r, t] = <[String; 3]>::deserialize(d)?;
        KBTriple::new(&h, &r, &t).map_err(serde::de::Error::custom)
    }
}

/// One training example: triples, their target sentence and its entity-recall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub triples: Vec<KBTriple>,
    #[serde(with = "joined_text")]
    pub text: Vec<String>,
    pub entity_recall: f64,
    /// Per-token noise labels (1 = injected distractor). Synthetic corpora
    /// only; never consumed by the models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_mask: Option<Vec<u8>>,
}

mod joined_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(text: &[String], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&text.join(" "))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
        let s = String::deserialize(d)?;
        Ok(super::tokenize(&s))
    }
}

impl Record {
    /// Deduplicates the triples (first occurrence wins) and computes recall.
    pub fn new(triples: Vec<KBTriple>, text: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        let triples: Vec<KBTriple> = triples.into_iter().filter(|t| seen.insert(t.clone())).collect();
        if triples.is_empty() {
            return Err(Error::InvalidConfig("record without triples".into()));
        }
        if text.is_empty() {
            return Err(Error::InvalidConfig("record with empty text".into()));
        }
        let entity_recall = entity_recall(&triples, &text);
        Ok(Record {
            triples,
            text,
            entity_recall,
            noise_mask: None,
        })
    }
}

/// Case-folded word set of every head, relation and tail.
pub fn triple_words(triples: &[KBTriple]) -> HashSet<String> {
    triples
        .iter()
        .flat_map(|t| t.fields())
        .flat_map(str::split_whitespace)
        .map(str::to_lowercase)
        .collect()
}

/// Fraction of text tokens that occur in any triple field (case-folded exact
/// word match). Returns 0 for empty text.
pub fn entity_recall<S: AsRef<str>>(triples: &[KBTriple], text: &[S]) -> f64 {
    if text.is_empty() {
        return 0.0;
    }
    let words = triple_words(triples);
    let covered = text
        .iter()
        .filter(|w| words.contains(&w.as_ref().to_lowercase()))
        .count();
    covered as f64 / text.len() as f64
}

/// Keeps the records whose entity-recall is at least `min_recall`, in order.
pub fn filter_records(records: Vec<Record>, min_recall: f64) -> Result<Vec<Record>> {
    if !(0.0..=1.0).contains(&min_recall) {
        return Err(Error::InvalidThreshold(min_recall));
    }
    Ok(records.into_iter().filter(|r| r.entity_recall >= min_recall).collect())
}

/// Concatenates head, relation and tail words of every triple, with
/// [`KBSEP`] between consecutive triples.
pub fn linearize(triples: &[KBTriple]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, t) in triples.iter().enumerate() {
        if i > 0 {
            out.push(KBSEP.to_owned());
        }
        out.extend(t.fields().iter().flat_map(|f| f.split_whitespace()).map(str::to_owned));
    }
    out
}

/// Writes records as JSON lines.
pub fn write_jsonl<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON-lines records, skipping blank lines.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::parse(format!("corpus line {}", i + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

/// Mean entity-recall over a corpus (0 when empty).
pub fn mean_entity_recall(records: &[Record]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.entity_recall).sum::<f64>() / records.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: &str, r: &str, tl: &str) -> KBTriple {
        KBTriple::new(h, r, tl).unwrap()
    }

    #[test]
    fn triple_rejects_blank_fields() {
        assert!(KBTriple::new("  ", "r", "t").is_err());
        assert_eq!(t(" Steve   Jobs ", "founded", "Apple").head, "Steve Jobs");
    }

    #[test]
    fn recall_of_partial_sentence() {
        let text = tokenize("Alice plays chess");
        let r = entity_recall(&[t("Alice", "sport", "chess")], &text);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn recall_of_covered_sentence_is_one() {
        let text = tokenize("alice SPORT Chess");
        assert_eq!(entity_recall(&[t("Alice", "sport", "chess")], &text), 1.0);
    }

    #[test]
    fn filter_thresholds() {
        let recs = vec![
            Record::new(vec![t("Alice", "sport", "chess")], tokenize("Alice plays chess")).unwrap(),
            Record::new(vec![t("Bob", "born in", "Paris")], tokenize("Bob born in Paris")).unwrap(),
        ];
        assert_eq!(filter_records(recs.clone(), 0.0).unwrap(), recs);
        let kept = filter_records(recs.clone(), 1.0).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].text[0], "Bob");
        assert!(filter_records(recs, 1.5).is_err());
    }

    #[test]
    fn linearize_with_separator() {
        assert_eq!(linearize(&[t("A", "r", "B")]), ["A", "r", "B"]);
        assert_eq!(
            linearize(&[t("A", "r", "B"), t("C", "s", "D")]),
            ["A", "r", "B", KBSEP, "C", "s", "D"]
        );
        // |h|+|r|+|t| per triple plus one separator: (2+2+1) + (1+1+3) + 1 = 11
        let lin = linearize(&[
            t("Company of", "developed by", "Relic"),
            t("X", "genre", "real time strategy"),
        ]);
        assert_eq!(lin.len(), 11);
    }

    #[test]
    fn record_deduplicates_triples() {
        let r = Record::new(vec![t("A", "r", "B"), t("A", "r", "B")], tokenize("A r B")).unwrap();
        assert_eq!(r.triples.len(), 1);
    }

    #[test]
    fn jsonl_round_trip_keeps_fields() {
        let mut r = Record::new(vec![t("A b", "r", "C")], tokenize("A b r C x")).unwrap();
        r.noise_mask = Some(vec![0, 0, 0, 0, 1]);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&r)).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.contains(r#""triples":[["A b","r","C"]]"#));
        assert!(line.contains(r#""text":"A b r C x""#));
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![r]);
    }
}
