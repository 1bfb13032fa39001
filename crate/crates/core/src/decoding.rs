//! Beam search over any next-token scorer, optionally rebalanced by
//! per-vocabulary supportiveness.

use std::cmp::Ordering;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::estimator::{support_matrix, support_vector, SeModel, Side};
use crate::generator::{GenModel, Memory};
use crate::tokenizer::{Vocab, EOS};

/// Next-token distribution given the tokens generated so far.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary after `prefix` (generated tokens only).
    fn log_probs(&self, prefix: &[u32]) -> Vec<f64>;
}

/// A generator conditioned on one encoded source.
pub struct GenScorer<'a> {
    model: &'a GenModel,
    memory: Memory,
}

impl<'a> GenScorer<'a> {
    pub fn new(model: &'a GenModel, src: &[u32]) -> Result<Self> {
        Ok(GenScorer {
            model,
            memory: model.encode(src)?,
        })
    }
}

impl StepScorer for GenScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn log_probs(&self, prefix: &[u32]) -> Vec<f64> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(EOS);
        input.extend_from_slice(prefix);
        self.model.next_log_probs(&self.memory, &input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Cumulative search score, including any rebalancing terms.
    pub score: f64,
    /// Cumulative model log-probability.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Score divided by length, used for the final ranking.
    pub fn normalized(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }

    /// Tokens without the closing EOS.
    pub fn body(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized()
        .total_cmp(&a.normalized())
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-normalized beam search. Candidates are ranked by cumulative score
/// with ties going to the earlier beam entry and then the smaller token id.
/// A hypothesis finishes on EOS or at `max_len` tokens and leaves the beam.
pub fn beam_search<S: StepScorer>(scorer: &S, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    search(scorer, beam, max_len, None)
}

/// Beam search where every non-special token `v` adds `alpha * log sigmoid(s_v)`
/// to the step score. `sigma` holds the per-vocabulary supportiveness.
pub fn rebalanced_beam_search<S: StepScorer>(
    scorer: &S,
    sigma: &[f64],
    beam: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be a finite non-negative number, got {alpha}"
        )));
    }
    if sigma.len() != scorer.vocab_size() {
        return Err(Error::LengthMismatch {
            expected: scorer.vocab_size(),
            actual: sigma.len(),
        });
    }
    if alpha == 0.0 {
        return search(scorer, beam, max_len, None);
    }
    let bonus: Vec<f64> = sigma.iter().map(|&s| alpha * s.ln()).collect();
    search(scorer, beam, max_len, Some(&bonus))
}

fn search<S: StepScorer>(scorer: &S, beam: usize, max_len: usize, bonus: Option<&[f64]>) -> Result<Vec<Hypothesis>> {
    if beam == 0 || max_len == 0 {
        return Err(Error::InvalidConfig("beam and max_len must be at least 1".into()));
    }
    let vocab = scorer.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        log_prob: 0.0,
        finished: false,
    }];
    let mut done = Vec::new();
    while !live.is_empty() {
        let mut cand: Vec<(f64, f64, usize, u32)> = Vec::with_capacity(live.len() * vocab);
        for (hi, h) in live.iter().enumerate() {
            let lp = scorer.log_probs(&h.tokens);
            if lp.len() != vocab {
                return Err(Error::LengthMismatch {
                    expected: vocab,
                    actual: lp.len(),
                });
            }
            for (v, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let step = match bonus {
                    Some(b) => l + b[v],
                    None => l,
                };
                cand.push((h.score + step, h.log_prob + l, hi, v as u32));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        cand.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (score, log_prob, hi, v) in cand {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(v);
            let finished = v == EOS || tokens.len() >= max_len;
            let h = Hypothesis {
                tokens,
                score,
                log_prob,
                finished,
            };
            if finished {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    done.sort_by(rank);
    Ok(done)
}

/// Target-side estimator features of every vocabulary entry. The estimator
/// is position-wise, so these are computed once and reused for every input.
#[derive(Clone, Debug)]
pub struct VocabFeatures {
    features: Array2<f64>,
}

impl VocabFeatures {
    pub fn new(se: &SeModel) -> Result<Self> {
        let ids: Vec<u32> = (0..se.vocab_size() as u32).collect();
        Ok(VocabFeatures {
            features: se.extract_features(&ids, Side::Target)?,
        })
    }
}

/// `sigmoid(s_v)` of the source for every vocabulary entry `v`, with
/// special tokens fixed at 1 so they are never penalized.
pub fn vocab_supportiveness(src: &[u32], se: &SeModel, vocab: &VocabFeatures) -> Result<Vec<f64>> {
    let fk = se.extract_features(src, Side::Source)?;
    let sv = support_vector(&support_matrix(&fk, &vocab.features)?);
    Ok(sv
        .sigma
        .into_iter()
        .enumerate()
        .map(|(v, s)| if Vocab::is_special(v as u32) { 1.0 } else { s })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::log_sum_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Random but fixed distribution per prefix.
    struct TableScorer {
        vocab: usize,
        seed: u64,
    }

    impl StepScorer for TableScorer {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn log_probs(&self, prefix: &[u32]) -> Vec<f64> {
            let key = prefix
                .iter()
                .fold(self.seed, |h, &t| h.wrapping_mul(31).wrapping_add(u64::from(t) + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let raw: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let z = log_sum_exp(raw.iter().copied());
            raw.into_iter().map(|x| x - z).collect()
        }
    }

    fn exhaustive<S: StepScorer>(s: &S, max_len: usize, bonus: &[f64]) -> Hypothesis {
        let mut best: Option<Hypothesis> = None;
        let mut stack = vec![(Vec::<u32>::new(), 0.0, 0.0)];
        while let Some((tokens, score, lp)) = stack.pop() {
            let dist = s.log_probs(&tokens);
            for v in 0..s.vocab_size() as u32 {
                let mut t = tokens.clone();
                t.push(v);
                let sc = score + dist[v as usize] + bonus[v as usize];
                let l = lp + dist[v as usize];
                if v == EOS || t.len() == max_len {
                    let h = Hypothesis {
                        tokens: t,
                        score: sc,
                        log_prob: l,
                        finished: true,
                    };
                    if best.as_ref().is_none_or(|b| rank(&h, b) == Ordering::Less) {
                        best = Some(h);
                    }
                } else {
                    stack.push((t, sc, l));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        for seed in 0..5 {
            let s = TableScorer { vocab: 6, seed };
            let got = beam_search(&s, 6usize.pow(4), 4).unwrap();
            let want = exhaustive(&s, 4, &[0.0; 6]);
            assert_eq!(got[0].tokens, want.tokens);
            assert!((got[0].score - want.score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..5 {
            let s = TableScorer { vocab: 6, seed };
            let got = beam_search(&s, 1, 6).unwrap();
            assert_eq!(got.len(), 1);
            let mut tokens = Vec::new();
            while tokens.len() < 6 {
                let lp = s.log_probs(&tokens);
                let best = (0..6).fold(0, |b, v| if lp[v] > lp[b] { v } else { b });
                tokens.push(best as u32);
                if best as u32 == EOS {
                    break;
                }
            }
            assert_eq!(got[0].tokens, tokens);
        }
    }

    #[test]
    fn hypotheses_end_in_eos_or_max_len() {
        let s = TableScorer { vocab: 6, seed: 9 };
        for h in beam_search(&s, 5, 4).unwrap() {
            assert!(h.finished);
            assert!(h.tokens.last() == Some(&EOS) || h.tokens.len() == 4);
            assert!(h.tokens[..h.tokens.len() - 1].iter().all(|&t| t != EOS));
        }
    }

    #[test]
    fn zero_alpha_is_identical() {
        let s = TableScorer { vocab: 6, seed: 2 };
        let sigma = [1.0, 1.0, 1.0, 0.2, 0.7, 0.01];
        let a = beam_search(&s, 3, 5).unwrap();
        let b = rebalanced_beam_search(&s, &sigma, 3, 5, 0.0).unwrap();
        assert_eq!(a, b);
        assert!(rebalanced_beam_search(&s, &sigma, 3, 5, -1.0).is_err());
    }

    struct TieScorer;

    impl StepScorer for TieScorer {
        fn vocab_size(&self) -> usize {
            6
        }

        fn log_probs(&self, prefix: &[u32]) -> Vec<f64> {
            let mut p = vec![1e-6; 6];
            if prefix.is_empty() {
                p[4] = 0.5;
                p[5] = 0.5;
            } else {
                p[EOS as usize] = 1.0;
            }
            let z: f64 = p.iter().sum();
            p.into_iter().map(|x| (x / z).ln()).collect()
        }
    }

    #[test]
    fn large_alpha_flips_a_tie_toward_support() {
        let sigma = [1.0, 1.0, 1.0, 1.0, 0.3, 0.9];
        let plain = beam_search(&TieScorer, 2, 3).unwrap();
        assert_eq!(plain[0].tokens, vec![4, EOS]);
        let re = rebalanced_beam_search(&TieScorer, &sigma, 2, 3, 5.0).unwrap();
        assert_eq!(re[0].tokens, vec![5, EOS]);
        assert_eq!(re[0].log_prob, plain[1].log_prob);
    }

    #[test]
    fn rebalancing_only_changes_scores() {
        // with a bonus that is constant over non-special tokens, membership and order are unchanged
        let s = TableScorer { vocab: 6, seed: 4 };
        let a = beam_search(&s, 4, 4).unwrap();
        let b = search(&s, 4, 4, Some(&[0.0; 6])).unwrap();
        assert_eq!(a, b);
        let mut seen = HashMap::new();
        for h in &a {
            *seen.entry(h.tokens.clone()).or_insert(0) += 1;
        }
        assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn vocab_supportiveness_shape_and_specials() {
        let se = SeModel::new(12, 4, 8, 1);
        let vf = VocabFeatures::new(&se).unwrap();
        let sig = vocab_supportiveness(&[5, 6, 7], &se, &vf).unwrap();
        assert_eq!(sig.len(), 12);
        for v in 0..12u32 {
            if Vocab::is_special(v) {
                assert_eq!(sig[v as usize], 1.0);
            } else {
                assert!(sig[v as usize] > 0.0 && sig[v as usize] < 1.0);
                let direct = se.token_supportiveness(&[5, 6, 7], &[v]).unwrap()[0];
                assert!((sig[v as usize] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuted_vocabulary_permutes_supportiveness() {
        let se = SeModel::new(12, 4, 8, 1);
        let ids: Vec<u32> = (5..12).collect();
        let mut rev = ids.clone();
        rev.reverse();
        let a = se.token_supportiveness(&[5, 6], &ids).unwrap();
        let mut b = se.token_supportiveness(&[5, 6], &rev).unwrap();
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn wider_beams_never_lower_the_top_score() {
        for seed in 0..300 {
            let s = TableScorer {
                vocab: 6,
                seed: 100 + seed,
            };
            let best = exhaustive(&s, 4, &[0.0; 6]).normalized();
            let mut last = f64::NEG_INFINITY;
            for beam in (1..=12).chain([64, 1296]) {
                let top = beam_search(&s, beam, 4).unwrap()[0].normalized();
                assert!(top <= best + 1e-12);
                assert!(top >= last - 1e-12, "seed {seed}, beam {beam}");
                last = top;
            }
            assert!((last - best).abs() < 1e-12);
        }
    }
}
