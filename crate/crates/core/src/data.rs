//! Records as subword id sequences.

use crate::corpus::{linearize, Record};
use crate::tokenizer::BpeModel;

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// Linearized triples.
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    /// Per target subword, whether its word is a labeled distractor.
    pub tgt_noise: Option<Vec<bool>>,
}

pub fn encode_record(bpe: &BpeModel, rec: &Record) -> Encoded {
    let (src, _) = bpe.encode_words(&linearize(&rec.triples));
    let (tgt, owner) = bpe.encode_words(&rec.text);
    let tgt_noise = rec
        .noise_mask
        .as_ref()
        .map(|m| owner.iter().map(|&o| m[o] != 0).collect());
    Encoded { src, tgt, tgt_noise }
}

pub fn encode_all(bpe: &BpeModel, recs: &[Record]) -> Vec<Encoded> {
    recs.iter().map(|r| encode_record(bpe, r)).collect()
}

/// Word sequences the tokenizer is trained on: every linearized source and every text.
pub fn tokenizer_corpus(recs: &[Record]) -> Vec<Vec<String>> {
    recs.iter()
        .flat_map(|r| [linearize(&r.triples), r.text.clone()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::KBTriple;
    use crate::tokenizer::{train_bpe, KBSEP};

    #[test]
    fn noise_labels_follow_subwords() {
        let t = vec![
            KBTriple::new("Abo", "born in", "Deli").unwrap(),
            KBTriple::new("Abo", "genre", "Pop").unwrap(),
        ];
        let mut rec = Record::new(t, "Abo zzqx born in Deli".split(' ').map(str::to_owned).collect()).unwrap();
        rec.noise_mask = Some(vec![0, 1, 0, 0, 0]);
        let bpe = train_bpe(&tokenizer_corpus(std::slice::from_ref(&rec)), 5).unwrap();
        let e = encode_record(&bpe, &rec);
        let noise = e.tgt_noise.unwrap();
        assert_eq!(noise.len(), e.tgt.len());
        let noisy: Vec<u32> = e.tgt.iter().zip(&noise).filter(|(_, &n)| n).map(|(&t, _)| t).collect();
        assert_eq!(bpe.decode(&noisy), "zzqx");
        assert!(e.src.contains(&KBSEP));
    }
}
