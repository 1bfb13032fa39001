//! Byte-pair-encoding subword tokenizer with an end-of-word suffix marker.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const KBSEP: u32 = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", crate::corpus::KBSEP];

/// Suffix appended to the last symbol of every word.
pub const END_OF_WORD: &str = "</w>";

/// Bijection between token strings and ids. Ids 0..=4 are the specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_of: Vec<String>,
    id_of: HashMap<String, u32>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Vocab {
            token_of: Vec::new(),
            id_of: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        v
    }

    fn push(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.id_of.get(tok) {
            return id;
        }
        let id = self.token_of.len() as u32;
        self.token_of.push(tok.to_owned());
        self.id_of.insert(tok.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<u32> {
        self.id_of.get(tok).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.token_of.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vocab,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut out: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
    if let Some(last) = out.last_mut() {
        last.push_str(END_OF_WORD);
    }
    out
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

fn is_special_word(w: &str) -> bool {
    SPECIALS.contains(&w)
}

/// Learns up to `num_merges` merges by repeatedly fusing the most frequent
/// adjacent symbol pair. Ties go to the lexicographically smallest pair.
/// Special tokens in the corpus are not split or merged.
pub fn train_bpe<S: AsRef<str>>(corpus: &[Vec<S>], num_merges: usize) -> Result<BpeModel> {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for sentence in corpus {
        for w in sentence {
            let w = w.as_ref();
            if !w.is_empty() && !is_special_word(w) {
                *freq.entry(w.to_owned()).or_default() += 1;
            }
        }
    }
    if freq.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, usize)> = freq.into_iter().map(|(w, c)| (word_symbols(&w), c)).collect();

    let mut vocab = Vocab::with_specials();
    let mut base: Vec<&String> = words.iter().flat_map(|(s, _)| s.iter()).collect();
    base.sort();
    base.dedup();
    let base: Vec<String> = base.into_iter().cloned().collect();
    for s in &base {
        vocab.push(s);
    }

    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += c;
            }
        }
        let Some(((l, r), _)) = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (l, r) = (l.to_owned(), r.to_owned());
        for (syms, _) in words.iter_mut() {
            if syms.len() > 1 {
                *syms = merge_pair(syms, &l, &r);
            }
        }
        vocab.push(&format!("{l}{r}"));
        merges.push((l, r));
    }
    Ok(BpeModel::from_parts(merges, vocab))
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, vocab: Vocab) -> Self {
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        BpeModel { merges, ranks, vocab }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Subword symbols of a single word, applying merges by rank.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r);
            let Some((_, pair)) = best else { break };
            let (l, r) = (pair[0].clone(), pair[1].clone());
            syms = merge_pair(&syms, &l, &r);
        }
        syms
    }

    /// Ids for one whitespace-free word.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(pos) = SPECIALS.iter().position(|s| *s == word) {
            return vec![pos as u32];
        }
        self.segment(word)
            .iter()
            .map(|s| self.vocab.id(s).unwrap_or(UNK))
            .collect()
    }

    /// Encodes whitespace-separated text. Unknown symbols map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().flat_map(|w| self.encode_word(w)).collect()
    }

    /// Encodes pre-split words, returning ids and the source word index of each id.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> (Vec<u32>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut owner = Vec::new();
        for (i, w) in words.iter().enumerate() {
            let piece = self.encode_word(w.as_ref());
            owner.extend(std::iter::repeat_n(i, piece.len()));
            ids.extend(piece);
        }
        (ids, owner)
    }

    /// Joins subwords back into space-separated words. PAD, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let tok = self.vocab.token(id).unwrap_or(SPECIALS[UNK as usize]);
            if Vocab::is_special(id) {
                if !out.is_empty() && !out.ends_with(' ') {
                    out.push(' ');
                }
                out.push_str(tok);
                out.push(' ');
            } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                out.push_str(stem);
                out.push(' ');
            } else {
                out.push_str(tok);
            }
        }
        out.trim_end().to_owned()
    }

    pub fn write_merges<W: Write>(&self, mut w: W) -> Result<()> {
        for (l, r) in &self.merges {
            writeln!(w, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn write_vocab<W: Write>(&self, mut w: W) -> Result<()> {
        for t in self.vocab.tokens() {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    /// Restores a model from its merges and vocab files.
    pub fn load<R1: BufRead, R2: BufRead>(merges: R1, vocab: R2) -> Result<Self> {
        let mut ms = Vec::new();
        for (i, line) in merges.lines().enumerate() {
            let line = line?;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(format!("merges line {}", i + 1), "expected `left right`"))?;
            ms.push((l.to_owned(), r.to_owned()));
        }
        let mut v = Vocab {
            token_of: Vec::new(),
            id_of: HashMap::new(),
        };
        for line in vocab.lines() {
            v.push(&line?);
        }
        if v.len() < SPECIALS.len() || v.token_of[..SPECIALS.len()] != SPECIALS {
            return Err(Error::parse("vocab file", "special tokens missing from ids 0..=4"));
        }
        Ok(BpeModel::from_parts(ms, v))
    }

    /// Hex SHA-256 of the merges and vocab files.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        self.write_merges(&mut buf).expect("in-memory write");
        self.write_vocab(&mut buf).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| crate::corpus::tokenize(l)).collect()
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = train_bpe(&corpus(&["ab ba"]), 0).unwrap();
        assert!(m.merges().is_empty());
        let toks: Vec<&str> = m.vocab().tokens().iter().map(String::as_str).collect();
        assert_eq!(&toks[..5], SPECIALS);
        assert_eq!(&toks[5..], ["a", "a</w>", "b", "b</w>"]);
    }

    #[test]
    fn most_frequent_pair_first() {
        let m = train_bpe(&corpus(&["aaab", "aaab"]), 1).unwrap();
        assert_eq!(m.merges(), [("a".to_owned(), "a".to_owned())]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // (a,b</w>) and (c,d</w>) both occur once.
        let m = train_bpe(&corpus(&["cd ab"]), 1).unwrap();
        assert_eq!(m.merges()[0], ("a".to_owned(), "b</w>".to_owned()));
    }

    #[test]
    fn deterministic_training() {
        let c = corpus(&["the cat sat on the mat", "a cat and a hat"]);
        assert_eq!(train_bpe(&c, 20).unwrap(), train_bpe(&c, 20).unwrap());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(train_bpe::<String>(&[], 3), Err(Error::EmptyCorpus)));
        assert!(matches!(train_bpe(&corpus(&["   "]), 3), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn encode_round_trip_and_unknowns() {
        let lines = ["Company of Heroes is developed by Relic", "the cat sat KBSEP on mats"];
        let m = train_bpe(&corpus(&lines), 30).unwrap();
        for l in lines {
            assert_eq!(m.decode(&m.encode(l)), l);
        }
        assert!(m.encode("").is_empty());
        assert!(m.encode("zebra").contains(&UNK));
        assert_eq!(m.encode("KBSEP"), [KBSEP]);
    }

    #[test]
    fn merges_never_produce_specials() {
        let m = train_bpe(&corpus(&["<s> x </s> KBSEP y <pad>"]), 50).unwrap();
        for (l, r) in m.merges() {
            assert!(!SPECIALS.contains(&format!("{l}{r}").as_str()));
        }
        assert_eq!(m.encode("<s> KBSEP"), [BOS, KBSEP]);
    }

    #[test]
    fn files_round_trip() {
        let m = train_bpe(&corpus(&["lower lowest newer newest"]), 10).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        m.write_merges(&mut a).unwrap();
        m.write_vocab(&mut b).unwrap();
        assert_eq!(BpeModel::load(&a[..], &b[..]).unwrap(), m);
    }
}
