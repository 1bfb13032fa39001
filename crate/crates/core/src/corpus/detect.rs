use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// A detected entity mention over token positions `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    fn from_tokens(tokens: &[String], start: usize, end: usize) -> Self {
        EntitySpan {
            surface: tokens[start..end].join(" "),
            start,
            end,
        }
    }
}

/// Known entity names, pre-tokenized, plus the capitalized-run fallback.
#[derive(Clone, Debug, Default)]
pub struct Gazetteer {
    entries: HashSet<Vec<String>>,
    max_len: usize,
    /// Minimum length of a run of capitalized tokens that counts as an entity
    /// when no gazetteer entry matches. `None` disables the rule.
    pub capitalized_min_run: Option<usize>,
}

impl Gazetteer {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut g = Gazetteer {
            capitalized_min_run: Some(2),
            ..Default::default()
        };
        for n in names {
            g.insert(n.as_ref());
        }
        g
    }

    pub fn insert(&mut self, name: &str) {
        let toks = super::tokenize(name);
        if toks.is_empty() {
            return;
        }
        self.max_len = self.max_len.max(toks.len());
        self.entries.insert(toks);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Length of the longest entry starting at `i`, if any.
    fn longest_at(&self, tokens: &[String], i: usize) -> Option<usize> {
        let upper = self.max_len.min(tokens.len() - i);
        (1..=upper)
            .rev()
            .find(|&len| self.entries.contains(&tokens[i..i + len]))
    }
}

fn is_capitalized(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_uppercase)
}

/// Leftmost-longest gazetteer matching with a capitalized-run fallback.
/// Spans never overlap and come back in left-to-right order.
pub fn detect_entities(tokens: &[String], gazetteer: &Gazetteer) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if let Some(len) = gazetteer.longest_at(tokens, i) {
            spans.push(EntitySpan::from_tokens(tokens, i, i + len));
            i += len;
            continue;
        }
        if let Some(min_run) = gazetteer.capitalized_min_run {
            let mut end = i;
            while end < tokens.len()
                && is_capitalized(&tokens[end])
                && (end == i || gazetteer.longest_at(tokens, end).is_none())
            {
                end += 1;
            }
            if end - i >= min_run.max(1) {
                spans.push(EntitySpan::from_tokens(tokens, i, end));
                i = end;
                continue;
            }
        }
        i += 1;
    }
    spans
}

/// All ordered pairs of distinct detected entities.
pub fn pair_entities(entities: &[EntitySpan]) -> Vec<(EntitySpan, EntitySpan)> {
    let mut out = Vec::with_capacity(entities.len() * entities.len().saturating_sub(1));
    for (i, a) in entities.iter().enumerate() {
        for (j, b) in entities.iter().enumerate() {
            if i != j {
                out.push((a.clone(), b.clone()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    #[test]
    fn detects_gazetteer_phrases() {
        let g = Gazetteer::new(["Company of Heroes", "Relic Entertainment"]);
        let toks = tokenize("Company of Heroes is developed by Relic Entertainment");
        let spans = detect_entities(&toks, &g);
        assert_eq!(
            spans,
            vec![
                EntitySpan {
                    surface: "Company of Heroes".into(),
                    start: 0,
                    end: 3
                },
                EntitySpan {
                    surface: "Relic Entertainment".into(),
                    start: 6,
                    end: 8
                },
            ]
        );
    }

    #[test]
    fn nothing_to_detect() {
        let g = Gazetteer::new(Vec::<String>::new());
        assert!(detect_entities(&tokenize("the cat sat"), &g).is_empty());
    }

    #[test]
    fn leftmost_longest_forbids_overlap() {
        let g = Gazetteer::new(["A B", "B C"]);
        let spans = detect_entities(&tokenize("A B C"), &g);
        assert_eq!(
            spans,
            vec![EntitySpan {
                surface: "A B".into(),
                start: 0,
                end: 2
            }]
        );
    }

    #[test]
    fn longest_entry_wins_at_same_start() {
        let g = Gazetteer::new(["New", "New York", "New York City"]);
        let spans = detect_entities(&tokenize("in New York City today"), &g);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].surface, "New York City");
    }

    #[test]
    fn capitalized_run_stops_at_gazetteer_entry() {
        let g = Gazetteer::new(["Apple Inc"]);
        let spans = detect_entities(&tokenize("Hello World Apple Inc rocks"), &g);
        let surfaces: Vec<_> = spans.iter().map(|s| s.surface.as_str()).collect();
        assert_eq!(surfaces, ["Hello World", "Apple Inc"]);
    }

    #[test]
    fn capitalized_rule_can_be_disabled() {
        let mut g = Gazetteer::new(Vec::<String>::new());
        g.capitalized_min_run = None;
        assert!(detect_entities(&tokenize("Steve Jobs founded Apple"), &g).is_empty());
    }

    #[test]
    fn pairs_exclude_diagonal() {
        let a = EntitySpan {
            surface: "a".into(),
            start: 0,
            end: 1,
        };
        let b = EntitySpan {
            surface: "b".into(),
            start: 1,
            end: 2,
        };
        assert!(pair_entities(&[]).is_empty());
        assert!(pair_entities(std::slice::from_ref(&a)).is_empty());
        assert_eq!(
            pair_entities(&[a.clone(), b.clone()]),
            vec![(a.clone(), b.clone()), (b, a)]
        );
    }
}
