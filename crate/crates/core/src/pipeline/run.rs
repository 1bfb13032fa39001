use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptors::AdaptorChoice;
use crate::corpus::{harvest, mean_entity_recall, read_jsonl, synth_corpus, tokenize, Record, TripleStore};
use crate::data::{encode_all, encode_record, tokenizer_corpus};
use crate::decoding::{beam_search, rebalanced_beam_search, vocab_supportiveness, GenScorer, VocabFeatures};
use crate::error::{Error, Result};
use crate::estimator::{train_se, SeExample, SeModel};
use crate::generator::{mean_nll, train_gen, GenExample, GenModel};
use crate::metrics::{evaluate, EvalReport};
use crate::nn::{EpochLoss, TrainConfig};
use crate::seed::derive_seed;
use crate::tokenizer::{train_bpe, BpeModel};

use super::{CorpusKind, RunConfig, System};

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Record>,
    pub dev: Vec<Record>,
    pub test: Vec<Record>,
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingInput(path.to_owned())),
        Err(e) => Err(e.into()),
    }
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("corpus needs a `{what}` path")))
}

/// Builds or reads the corpus and cuts it into test, dev and train, in that order.
pub fn build_splits(cfg: &RunConfig) -> Result<Splits> {
    let c = &cfg.corpus;
    let records = match c.kind {
        CorpusKind::Synthetic => synth_corpus(&c.synthetic, derive_seed(cfg.seed, "corpus"))?,
        CorpusKind::Harvest => {
            let store = TripleStore::load(
                open(required(&c.triples, "triples")?)?,
                c.aliases.as_deref().map(open).transpose()?,
            )?;
            let mut sentences = Vec::new();
            for line in open(required(&c.sentences, "sentences")?)?.lines() {
                sentences.push(tokenize(&line?));
            }
            harvest(&sentences, &store, &c.harvest)?
        }
        CorpusKind::Records => read_jsonl(open(required(&c.records, "records")?)?)?,
    };
    let (test_n, dev_n) = (cfg.split.test, cfg.split.dev);
    if records.len() <= test_n + dev_n {
        return Err(Error::EmptyCorpus);
    }
    let mut it = records.into_iter();
    let test: Vec<Record> = it.by_ref().take(test_n).collect();
    let dev: Vec<Record> = it.by_ref().take(dev_n).collect();
    let train: Vec<Record> = it.take(cfg.split.train).collect();
    if train.len() < cfg.split.train {
        log::warn!(
            "corpus provides {} training records, {} requested",
            train.len(),
            cfg.split.train
        );
    }
    Ok(Splits { train, dev, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub records: usize,
    pub relation_types: usize,
    pub mean_entity_recall: f64,
    pub mean_text_words: f64,
    pub mean_triples: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train: SplitStats,
    pub dev: SplitStats,
    pub test: SplitStats,
    /// Distinct relations over all splits.
    pub relation_types: usize,
}

fn split_stats(recs: &[Record]) -> SplitStats {
    let n = recs.len().max(1) as f64;
    let rels: BTreeSet<&str> = recs
        .iter()
        .flat_map(|r| &r.triples)
        .map(|t| t.relation.as_str())
        .collect();
    SplitStats {
        records: recs.len(),
        relation_types: rels.len(),
        mean_entity_recall: mean_entity_recall(recs),
        mean_text_words: recs.iter().map(|r| r.text.len()).sum::<usize>() as f64 / n,
        mean_triples: recs.iter().map(|r| r.triples.len()).sum::<usize>() as f64 / n,
    }
}

pub fn corpus_stats(s: &Splits) -> CorpusStats {
    let rels: BTreeSet<&str> = [&s.train, &s.dev, &s.test]
        .into_iter()
        .flatten()
        .flat_map(|r| &r.triples)
        .map(|t| t.relation.as_str())
        .collect();
    CorpusStats {
        train: split_stats(&s.train),
        dev: split_stats(&s.dev),
        test: split_stats(&s.test),
        relation_types: rels.len(),
    }
}

pub fn fit_tokenizer(cfg: &RunConfig, train: &[Record]) -> Result<BpeModel> {
    train_bpe(&tokenizer_corpus(train), cfg.tokenizer.merges)
}

fn seeded(t: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..t.clone() }
}

pub fn train_estimator(cfg: &RunConfig, bpe: &BpeModel, train: &[Record]) -> Result<(SeModel, Vec<EpochLoss>)> {
    let enc = encode_all(bpe, train);
    let data: Vec<SeExample> = enc
        .iter()
        .map(|e| SeExample {
            src: &e.src,
            tgt: &e.tgt,
        })
        .collect();
    let model = SeModel::new(
        bpe.vocab().len(),
        cfg.se.dim,
        cfg.se.hidden,
        derive_seed(cfg.seed, "se-init"),
    );
    train_se(
        &data,
        model,
        &seeded(&cfg.se_train, derive_seed(cfg.seed, "se-train")),
        &cfg.se,
    )
}

/// Trains the generator under `adaptor`; the estimator is required for the
/// hard and soft adaptors. Returns the model, its loss curve and the mean
/// dev-set token NLL.
pub fn train_generator(
    cfg: &RunConfig,
    bpe: &BpeModel,
    train: &[Record],
    dev: &[Record],
    se: Option<&SeModel>,
    adaptor: AdaptorChoice,
) -> Result<(GenModel, Vec<EpochLoss>, f64)> {
    let enc = encode_all(bpe, train);
    let sigma: Vec<Vec<f64>> = match (adaptor.needs_estimator(), se) {
        (false, _) => Vec::new(),
        (true, None) => return Err(Error::MissingSeModel(adaptor.name())),
        (true, Some(se)) => enc
            .iter()
            .map(|e| se.token_supportiveness(&e.src, &e.tgt))
            .collect::<Result<_>>()?,
    };
    let data: Vec<GenExample> = enc
        .iter()
        .enumerate()
        .map(|(i, e)| GenExample {
            src: &e.src,
            tgt: &e.tgt,
            sigma: sigma.get(i).map(Vec::as_slice),
        })
        .collect();
    let model = GenModel::new(
        bpe.vocab().len(),
        cfg.generator.clone(),
        derive_seed(cfg.seed, "gen-init"),
    )?;
    let tc = seeded(&cfg.generator_train, derive_seed(cfg.seed, "gen-train"));
    let (model, log) = train_gen(&data, model, adaptor, &tc)?;
    let dev_enc = encode_all(bpe, dev);
    let dev_nll = mean_nll(&model, dev_enc.iter().map(|e| (&e.src[..], &e.tgt[..])))?;
    Ok((model, log, dev_nll))
}

/// Best hypothesis for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub text: String,
    /// Model log-probability of the hypothesis, EOS included.
    pub log_prob: f64,
}

pub fn decode_records(
    cfg: &RunConfig,
    bpe: &BpeModel,
    model: &GenModel,
    se: Option<&SeModel>,
    records: &[Record],
    rbs: bool,
) -> Result<Vec<Decoded>> {
    let d = &cfg.decoding;
    let rebalance = match (rbs, se) {
        (false, _) => None,
        (true, None) => return Err(Error::MissingSeModel("rebalanced beam search")),
        (true, Some(se)) => Some((se, VocabFeatures::new(se)?)),
    };
    records
        .iter()
        .map(|r| {
            let src = encode_record(bpe, r).src;
            let scorer = GenScorer::new(model, &src)?;
            let hyps = match &rebalance {
                Some((se, vf)) => {
                    let sigma = vocab_supportiveness(&src, se, vf)?;
                    rebalanced_beam_search(&scorer, &sigma, d.beam, d.max_len, d.alpha)?
                }
                None => beam_search(&scorer, d.beam, d.max_len)?,
            };
            let best = &hyps[0];
            Ok(Decoded {
                text: bpe.decode(best.body()),
                log_prob: best.log_prob,
            })
        })
        .collect()
}

/// Test references with labeled distractors removed.
pub fn references(records: &[Record]) -> Vec<Vec<String>> {
    records.iter().map(|r| r.without_noise().text).collect()
}

pub fn score_decoded(cfg: &RunConfig, decoded: &[Decoded], records: &[Record]) -> Result<EvalReport> {
    let hyps: Vec<Vec<String>> = decoded.iter().map(|d| tokenize(&d.text)).collect();
    let triples: Vec<_> = records.iter().map(|r| r.triples.clone()).collect();
    evaluate(&hyps, &references(records), &triples, cfg.eval.ngram_window)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemResult {
    pub system: System,
    pub report: EvalReport,
    pub decoded: Vec<Decoded>,
}

/// Trains what `systems` need on the first `train_size` training records
/// (all when `None`), then decodes and scores the test split.
pub fn run_systems(
    cfg: &RunConfig,
    splits: &Splits,
    train_size: Option<usize>,
    systems: &[System],
) -> Result<Vec<SystemResult>> {
    let n = train_size.unwrap_or(splits.train.len()).min(splits.train.len());
    let train = &splits.train[..n];
    let bpe = fit_tokenizer(cfg, train)?;
    let needs_se = systems.iter().any(|s| s.rbs || s.adaptor.needs_estimator());
    let se = if needs_se {
        Some(train_estimator(cfg, &bpe, train)?.0)
    } else {
        None
    };
    let mut gens: BTreeMap<AdaptorChoice, GenModel> = BTreeMap::new();
    let mut out = Vec::with_capacity(systems.len());
    for &system in systems {
        let gen = match gens.entry(system.adaptor) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                e.insert(train_generator(cfg, &bpe, train, &splits.dev, se.as_ref(), system.adaptor)?.0)
            }
        };
        let decoded = decode_records(cfg, &bpe, gen, se.as_ref(), &splits.test, system.rbs)?;
        let report = score_decoded(cfg, &decoded, &splits.test)?;
        out.push(SystemResult {
            system,
            report,
            decoded,
        });
    }
    Ok(out)
}
