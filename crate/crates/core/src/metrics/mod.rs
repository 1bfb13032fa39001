//! Corpus BLEU, ROUGE-L, entity-recall and the over-generation n-gram audit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{entity_recall, triple_words, KBTriple};
use crate::error::{Error, Result};

const STOPWORD_LIST: &str = include_str!("stopwords.txt");

/// The shipped 150-word English stopword list.
pub fn stopwords() -> HashSet<String> {
    STOPWORD_LIST.lines().map(str::to_owned).collect()
}

fn check_pairs<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::EmptyInput);
    }
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            expected: refs.len(),
            actual: hyps.len(),
        });
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-4 with uniform weights, clipped counts, one reference
/// per hypothesis and the standard brevity penalty. No smoothing: any order
/// without a match gives 0.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Mean LCS F-measure `(1 + b^2) P R / (R + b^2 P)` with `b = 1.2`.
pub fn rouge_l<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let l = lcs_len(h, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / h.len() as f64;
            let rc = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .sum();
    Ok(total / hyps.len() as f64)
}

/// Whether over-generation n-grams are taken before or after stopword removal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NgramWindow {
    #[default]
    After,
    Before,
}

/// For each `n` in `1..=n_max`, the number of n-grams containing at least one
/// over-generated word, summed over the corpus. A word is over-generated when
/// it is not a stopword and occurs in none of its triples' fields
/// (case-folded).
pub fn overgen_ngrams<S: AsRef<str>>(
    hyps: &[Vec<S>],
    triples: &[Vec<KBTriple>],
    stop: &HashSet<String>,
    n_max: usize,
    window: NgramWindow,
) -> Result<BTreeMap<usize, usize>> {
    if n_max == 0 {
        return Err(Error::InvalidConfig("n_max must be at least 1".into()));
    }
    if hyps.len() != triples.len() {
        return Err(Error::LengthMismatch {
            expected: triples.len(),
            actual: hyps.len(),
        });
    }
    let mut counts: BTreeMap<usize, usize> = (1..=n_max).map(|n| (n, 0)).collect();
    for (h, ts) in hyps.iter().zip(triples) {
        let words = triple_words(ts);
        let flags: Vec<bool> = h
            .iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter_map(|w| {
                let is_stop = stop.contains(&w);
                match (is_stop, window) {
                    (true, NgramWindow::After) => None,
                    (true, NgramWindow::Before) => Some(false),
                    (false, _) => Some(!words.contains(&w)),
                }
            })
            .collect();
        for n in 1..=n_max.min(flags.len()) {
            *counts.get_mut(&n).expect("initialized") += flags.windows(n).filter(|w| w.contains(&true)).count();
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub rouge_l: f64,
    pub entity_recall_mean: f64,
    pub overgen_counts: BTreeMap<usize, usize>,
}

/// Scores detokenized hypotheses against references and their source triples.
pub fn evaluate<S: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<S>],
    triples: &[Vec<KBTriple>],
    window: NgramWindow,
) -> Result<EvalReport> {
    check_pairs(hyps, refs)?;
    let recall = hyps.iter().zip(triples).map(|(h, t)| entity_recall(t, h)).sum::<f64>() / hyps.len() as f64;
    Ok(EvalReport {
        bleu: bleu(hyps, refs)?,
        rouge_l: rouge_l(hyps, refs)?,
        entity_recall_mean: recall,
        overgen_counts: overgen_ngrams(hyps, triples, &stopwords(), 5, window)?,
    })
}

/// Plain-text table with one row per named report.
pub fn report_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("system                 BLEU    ROUGE_L  recall   1g     2g     3g     4g     5g\n");
    for (name, r) in rows {
        let _ = write!(
            out,
            "{name:<22} {:>6.4}  {:>6.4}   {:>6.4}",
            r.bleu, r.rouge_l, r.entity_recall_mean
        );
        for n in 1..=5 {
            let _ = write!(out, " {:>6}", r.overgen_counts.get(&n).copied().unwrap_or(0));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn corpus(xs: &[&str]) -> Vec<Vec<String>> {
        xs.iter().map(|s| toks(s)).collect()
    }

    #[test]
    fn stopword_list_has_150_unique_lowercase_entries() {
        let s = stopwords();
        assert_eq!(s.len(), 150);
        assert_eq!(STOPWORD_LIST.lines().count(), 150);
        assert!(s.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let a = corpus(&["the cat sat on the mat", "a b c d e"]);
        assert!((bleu(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = corpus(&["x y z w v u", "p q r s t"]);
        assert_eq!(bleu(&a, &b).unwrap(), 0.0);
        assert!(matches!(bleu::<String>(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn bleu_two_sentence_hand_case() {
        // hyp1 "a b c d e" vs ref1 "a b c d f": 1g 4/5, 2g 3/4, 3g 2/3, 4g 1/2
        // hyp2 "a a b c" vs ref2 "a b c d": 1g 3/4 (clipped a), 2g 2/3, 3g 1/2, 4g 0/1
        // totals: 7/9, 5/7, 3/5, 1/3; c = 9, r = 9
        let h = corpus(&["a b c d e", "a a b c"]);
        let r = corpus(&["a b c d f", "a b c d"]);
        let want = ((7.0f64 / 9.0).ln() + (5.0f64 / 7.0).ln() + (3.0f64 / 5.0).ln() + (1.0f64 / 3.0).ln()) / 4.0;
        assert!((bleu(&h, &r).unwrap() - want.exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_hand_case() {
        // hyp "a b c d" vs ref "a b c d e f": all precisions 1, BP = exp(1 - 6/4)
        let h = corpus(&["a b c d"]);
        let r = corpus(&["a b c d e f"]);
        assert!((bleu(&h, &r).unwrap() - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_cases() {
        let a = corpus(&["a b c"]);
        assert_eq!(rouge_l(&a, &a).unwrap(), 1.0);
        assert_eq!(rouge_l(&a, &corpus(&["x y"])).unwrap(), 0.0);
        let v = rouge_l(&a, &corpus(&["a c"])).unwrap();
        let (p, r, b2) = (2.0 / 3.0, 1.0, 1.44);
        assert!((v - (1.0 + b2) * p * r / (r + b2 * p)).abs() < 1e-12);
        assert!((v - 0.829932).abs() < 1e-6);
        // LCS "b d" of "a b x d" and "b y d": P = 2/4, R = 2/3
        let v = rouge_l(&corpus(&["a b x d"]), &corpus(&["b y d"])).unwrap();
        let (p, r) = (0.5, 2.0 / 3.0);
        assert!((v - 2.44 * p * r / (r + 1.44 * p)).abs() < 1e-12);
    }

    fn triple(h: &str, r: &str, t: &str) -> KBTriple {
        KBTriple::new(h, r, t).unwrap()
    }

    #[test]
    fn overgen_cases() {
        let ts = vec![vec![triple("Alpha", "born in", "Beta Town")]];
        let stop = stopwords();
        let clean = overgen_ngrams(&corpus(&["Alpha born in Beta Town"]), &ts, &stop, 5, NgramWindow::After).unwrap();
        assert!(clean.values().all(|&c| c == 0));
        let one = overgen_ngrams(
            &corpus(&["Alpha born zed Beta Town"]),
            &ts,
            &stop,
            5,
            NgramWindow::After,
        )
        .unwrap();
        assert_eq!(one[&1], 1);
        assert_eq!(one[&2], 2);
        assert_eq!(one[&3], 3);
        assert_eq!(one[&4], 2);
        assert_eq!(one[&5], 1);
    }

    #[test]
    fn overgen_window_flag() {
        let ts = vec![vec![triple("Alpha", "born", "Beta")]];
        let stop = stopwords();
        let h = corpus(&["Alpha the zed of Beta"]);
        let after = overgen_ngrams(&h, &ts, &stop, 3, NgramWindow::After).unwrap();
        let before = overgen_ngrams(&h, &ts, &stop, 3, NgramWindow::Before).unwrap();
        // after removal: Alpha zed Beta
        assert_eq!((after[&1], after[&2], after[&3]), (1, 2, 1));
        // before: windows over all five words containing position 2
        assert_eq!((before[&1], before[&2], before[&3]), (1, 2, 3));
    }

    #[test]
    fn evaluate_self_is_perfect_bleu() {
        let refs = corpus(&["Alpha born in Beta Town", "Gamma plays for Delta"]);
        let ts = vec![
            vec![triple("Alpha", "born in", "Beta Town")],
            vec![triple("Gamma", "plays for", "Delta")],
        ];
        let r = evaluate(&refs, &refs, &ts, NgramWindow::After).unwrap();
        assert_eq!(r.bleu, 1.0);
        assert_eq!(r.rouge_l, 1.0);
        assert_eq!(r.entity_recall_mean, 1.0);
        assert!(report_table(&[("gold".into(), r)]).contains("1.0000"));
    }

    proptest::proptest! {
        #[test]
        fn scores_bounded(
            h in proptest::collection::vec(proptest::collection::vec("[a-e]", 0..8), 1..4),
            r in proptest::collection::vec(proptest::collection::vec("[a-e]", 1..8), 4),
        ) {
            let r = &r[..h.len()];
            let b = bleu(&h, r).unwrap();
            let l = rouge_l(&h, r).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&b));
            proptest::prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
        }

        #[test]
        fn adding_an_overgenerated_word_never_lowers_counts(
            words in proptest::collection::vec("[a-d]", 0..8),
            at in 0usize..9,
        ) {
            let ts = vec![vec![triple("a b", "c", "d")]];
            let stop = stopwords();
            let mut more = words.clone();
            more.insert(at.min(words.len()), "zzz".to_owned());
            for w in [NgramWindow::After, NgramWindow::Before] {
                let x = overgen_ngrams(std::slice::from_ref(&words), &ts, &stop, 5, w).unwrap();
                let y = overgen_ngrams(&[more.clone()], &ts, &stop, 5, w).unwrap();
                for n in 1..=5 {
                    proptest::prop_assert!(y[&n] >= x[&n]);
                }
            }
        }
    }
}
