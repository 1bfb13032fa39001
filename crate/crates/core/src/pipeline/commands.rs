use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::adaptors::AdaptorChoice;
use crate::corpus::{read_jsonl, tokenize, triple_words, write_jsonl, Record};
use crate::data::encode_all;
use crate::error::{Error, Result};
use crate::estimator::{supportiveness_by_label, SeModel};
use crate::generator::GenModel;
use crate::metrics::{evaluate, report_table, stopwords, EvalReport};
use crate::nn::{Checkpoint, EpochLoss};
use crate::tokenizer::BpeModel;

use super::run::open;
use super::{
    build_splits, corpus_stats, decode_records, fit_tokenizer, references, run_systems, score_decoded, train_estimator,
    train_generator, CorpusStats, Decoded, RunConfig, Splits, System,
};

/// File listing the run's config hash and the SHA-256 of every artifact.
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    files: BTreeMap<String, String>,
}

/// Output directory of one run. Every file goes through [`RunDir::write`], so
/// the manifest always matches the directory contents.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Opens or creates `root` for `cfg`. A directory produced under a
    /// different config is refused rather than mixed.
    pub fn open(root: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root)?;
        let hash = cfg.hash();
        let path = root.join(MANIFEST);
        let manifest = if path.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
            if m.config_hash != hash {
                return Err(Error::InvalidConfig(format!(
                    "{} was produced with config {}, current config is {}",
                    root.display(),
                    m.config_hash,
                    hash
                )));
            }
            m
        } else {
            Manifest {
                config_hash: hash,
                files: BTreeMap::new(),
            }
        };
        let mut dir = RunDir {
            root: root.to_owned(),
            manifest,
        };
        if !dir.manifest.files.contains_key("config.toml") {
            dir.write("config.toml", cfg.to_toml().as_bytes())?;
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Path of an artifact an earlier command must have produced.
    pub fn input(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingInput(p))
        }
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        self.manifest
            .files
            .insert(rel.to_owned(), hex::encode(Sha256::digest(bytes)));
        let m = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(self.root.join(MANIFEST), m)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn write_checkpoint(&mut self, rel: &str, ckpt: &Checkpoint) -> Result<()> {
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes)?;
        self.write(rel, &bytes)
    }
}

fn loss_csv(log: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,loss\n");
    for e in log {
        let _ = writeln!(s, "{},{:.10}", e.epoch, e.loss);
    }
    s
}

fn load_splits(dir: &RunDir) -> Result<Splits> {
    let read = |name: &str| -> Result<Vec<Record>> { read_jsonl(open(&dir.input(&format!("corpus/{name}.jsonl"))?)?) };
    Ok(Splits {
        train: read("train")?,
        dev: read("dev")?,
        test: read("test")?,
    })
}

fn load_tokenizer(dir: &RunDir) -> Result<BpeModel> {
    BpeModel::load(
        open(&dir.input("tokenizer/merges.txt")?)?,
        open(&dir.input("tokenizer/vocab.txt")?)?,
    )
}

/// Loads a checkpoint and checks it belongs to this run and tokenizer.
fn load_checkpoint(dir: &RunDir, rel: &str, bpe: &BpeModel) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(&dir.input(rel)?)?;
    let fp = ckpt.meta.get("tokenizer").and_then(|v| v.as_str());
    if fp != Some(bpe.fingerprint().as_str()) {
        return Err(Error::parse(rel, "checkpoint was trained with a different tokenizer"));
    }
    Ok(ckpt)
}

fn load_se(dir: &RunDir, bpe: &BpeModel) -> Result<SeModel> {
    SeModel::from_params(load_checkpoint(dir, "se/model.ckpt", bpe)?.params)
}

fn gen_path(adaptor: AdaptorChoice) -> String {
    format!("gen/{}/model.ckpt", adaptor.name())
}

fn load_gen(dir: &RunDir, cfg: &RunConfig, bpe: &BpeModel, adaptor: AdaptorChoice) -> Result<GenModel> {
    GenModel::from_params(
        load_checkpoint(dir, &gen_path(adaptor), bpe)?.params,
        cfg.generator.clone(),
    )
}

fn decode_path(system: System) -> String {
    format!("decode/{system}.tsv")
}

/// Builds the corpus splits and fits the tokenizer on the training split.
pub fn cmd_harvest(cfg: &RunConfig, out: &Path) -> Result<CorpusStats> {
    let mut dir = RunDir::open(out, cfg)?;
    let splits = build_splits(cfg)?;
    for (name, recs) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, recs)?;
        dir.write(&format!("corpus/{name}.jsonl"), &buf)?;
    }
    let stats = corpus_stats(&splits);
    dir.write_json(
        "corpus/stats.json",
        &json!({"config_hash": dir.config_hash(), "stats": stats}),
    )?;
    let bpe = fit_tokenizer(cfg, &splits.train)?;
    let (mut merges, mut vocab) = (Vec::new(), Vec::new());
    bpe.write_merges(&mut merges)?;
    bpe.write_vocab(&mut vocab)?;
    dir.write("tokenizer/merges.txt", &merges)?;
    dir.write("tokenizer/vocab.txt", &vocab)?;
    log::info!(
        "harvest: {} train / {} dev / {} test records, vocab {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        bpe.vocab().len()
    );
    Ok(stats)
}

/// Mean token supportiveness on clean and distractor dev tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub clean: f64,
    pub noise: f64,
}

pub fn cmd_train_se(cfg: &RunConfig, out: &Path) -> Result<(Vec<EpochLoss>, Option<Separation>)> {
    let mut dir = RunDir::open(out, cfg)?;
    let splits = load_splits(&dir)?;
    let bpe = load_tokenizer(&dir)?;
    let (se, log) = train_estimator(cfg, &bpe, &splits.train)?;
    let meta = json!({"config_hash": dir.config_hash(), "tokenizer": bpe.fingerprint(), "kind": "estimator"});
    dir.write_checkpoint("se/model.ckpt", &Checkpoint::new(se.params.clone(), meta))?;
    dir.write("se/loss.csv", loss_csv(&log).as_bytes())?;

    let dev = encode_all(&bpe, &splits.dev);
    let labeled: Vec<_> = dev
        .iter()
        .filter_map(|e| e.tgt_noise.as_ref().map(|n| (&e.src[..], &e.tgt[..], &n[..])))
        .collect();
    let sep = if labeled.is_empty() {
        None
    } else {
        let (clean, noise) = supportiveness_by_label(&se, labeled)?;
        Some(Separation { clean, noise })
    };
    let mut report = String::new();
    match sep {
        Some(s) => {
            let _ = writeln!(report, "dev clean tokens\t{:.6}", s.clean);
            let _ = writeln!(report, "dev noise tokens\t{:.6}", s.noise);
            let _ = writeln!(report, "separation\t{:.6}", s.clean - s.noise);
        }
        None => report.push_str("dev split carries no noise labels\n"),
    }
    dir.write("se/supportiveness.txt", report.as_bytes())?;
    Ok((log, sep))
}

/// Trains the generator under `adaptor`. Returns its loss curve and dev NLL.
pub fn cmd_train_gen(cfg: &RunConfig, out: &Path, adaptor: AdaptorChoice) -> Result<(Vec<EpochLoss>, f64)> {
    let mut dir = RunDir::open(out, cfg)?;
    let splits = load_splits(&dir)?;
    let bpe = load_tokenizer(&dir)?;
    let se = if adaptor.needs_estimator() {
        Some(load_se(&dir, &bpe).map_err(|e| match e {
            Error::MissingInput(_) => Error::MissingSeModel(adaptor.name()),
            e => e,
        })?)
    } else {
        None
    };
    let (model, log, dev_nll) = train_generator(cfg, &bpe, &splits.train, &splits.dev, se.as_ref(), adaptor)?;
    let meta = json!({
        "config_hash": dir.config_hash(),
        "tokenizer": bpe.fingerprint(),
        "kind": "generator",
        "adaptor": adaptor.name(),
    });
    let base = format!("gen/{}", adaptor.name());
    dir.write_checkpoint(&gen_path(adaptor), &Checkpoint::new(model.params, meta))?;
    dir.write(&format!("{base}/loss.csv"), loss_csv(&log).as_bytes())?;
    dir.write_json(&format!("{base}/dev.json"), &json!({"dev_token_nll": dev_nll}))?;
    Ok((log, dev_nll))
}

/// Decodes the test split with `system` and writes `id<TAB>text<TAB>log_prob` lines.
pub fn cmd_decode(cfg: &RunConfig, out: &Path, system: System) -> Result<Vec<Decoded>> {
    let mut dir = RunDir::open(out, cfg)?;
    decode_into(&mut dir, cfg, system)
}

fn decode_into(dir: &mut RunDir, cfg: &RunConfig, system: System) -> Result<Vec<Decoded>> {
    let splits = load_splits(dir)?;
    let bpe = load_tokenizer(dir)?;
    let gen = load_gen(dir, cfg, &bpe, system.adaptor)?;
    let se = if system.rbs { Some(load_se(dir, &bpe)?) } else { None };
    let decoded = decode_records(cfg, &bpe, &gen, se.as_ref(), &splits.test, system.rbs)?;
    let mut tsv = String::new();
    for (i, d) in decoded.iter().enumerate() {
        let _ = writeln!(tsv, "{i}\t{}\t{:.10}", d.text, d.log_prob);
    }
    dir.write(&decode_path(system), tsv.as_bytes())?;
    Ok(decoded)
}

fn read_decoded(path: &Path) -> Result<Vec<Decoded>> {
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line?;
        let what = || format!("{} line {}", path.display(), n + 1);
        let mut parts = line.split('\t');
        let (Some(id), Some(text), Some(lp), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(what(), "expected three tab-separated fields"));
        };
        if id.parse::<usize>().ok() != Some(out.len()) {
            return Err(Error::parse(what(), format!("unexpected id `{id}`")));
        }
        let log_prob = lp.parse().map_err(|e| Error::parse(what(), e))?;
        out.push(Decoded {
            text: text.to_owned(),
            log_prob,
        });
    }
    Ok(out)
}

/// Decoded test output for `system`, produced now if no earlier decode exists.
fn decoded_for(dir: &mut RunDir, cfg: &RunConfig, system: System) -> Result<Vec<Decoded>> {
    match dir.input(&decode_path(system)) {
        Ok(p) => read_decoded(&p),
        Err(_) => decode_into(dir, cfg, system),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: System,
    pub report: EvalReport,
}

/// Scores every configured system on the test split. References scored
/// against themselves are included as a `gold` sanity row.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<Vec<SystemReport>> {
    let mut dir = RunDir::open(out, cfg)?;
    let test = load_splits(&dir)?.test;
    let mut rows = Vec::new();
    for &system in &cfg.eval.systems {
        let decoded = decoded_for(&mut dir, cfg, system)?;
        if decoded.len() != test.len() {
            return Err(Error::LengthMismatch {
                expected: test.len(),
                actual: decoded.len(),
            });
        }
        rows.push(SystemReport {
            system,
            report: score_decoded(cfg, &decoded, &test)?,
        });
    }
    let refs = references(&test);
    let triples: Vec<_> = test.iter().map(|r| r.triples.clone()).collect();
    let gold = evaluate(&refs, &refs, &triples, cfg.eval.ngram_window)?;

    let mut table: Vec<(String, EvalReport)> = rows.iter().map(|r| (r.system.name(), r.report.clone())).collect();
    table.push(("gold".to_owned(), gold.clone()));
    dir.write_json(
        "eval/report.json",
        &json!({"config_hash": dir.config_hash(), "systems": rows, "gold": gold}),
    )?;
    dir.write("eval/report.txt", report_table(&table).as_bytes())?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub train_size: usize,
    pub system: System,
    pub report: EvalReport,
}

/// Retrains the sweep systems on growing prefixes of the training split.
/// Each size fits its own tokenizer, estimator and generators.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<TrendPoint>> {
    let mut dir = RunDir::open(out, cfg)?;
    let splits = load_splits(&dir)?;
    let mut points = Vec::new();
    for &size in &cfg.sweep.sizes {
        if size > splits.train.len() {
            return Err(Error::InvalidConfig(format!(
                "sweep size {size} exceeds the {} training records",
                splits.train.len()
            )));
        }
        log::info!("sweep: training on {size} records");
        for r in run_systems(cfg, &splits, Some(size), &cfg.sweep.systems)? {
            points.push(TrendPoint {
                train_size: size,
                system: r.system,
                report: r.report,
            });
        }
    }
    let table: Vec<(String, EvalReport)> = points
        .iter()
        .map(|p| (format!("{}@{}", p.system, p.train_size), p.report.clone()))
        .collect();
    dir.write_json(
        "sweep/trend.json",
        &json!({"config_hash": dir.config_hash(), "points": points}),
    )?;
    dir.write("sweep/trend.txt", report_table(&table).as_bytes())?;
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OvergenAudit {
    pub system: System,
    pub overgen_counts: BTreeMap<usize, usize>,
    /// Hypothesis tokens that are neither stopwords nor triple words.
    pub unsupported_tokens: usize,
    pub total_tokens: usize,
    /// Most frequent unsupported words, ties broken alphabetically.
    pub top_words: Vec<(String, usize)>,
}

const TOP_WORDS: usize = 20;

/// Over-generation breakdown for every system with a decode file.
pub fn cmd_audit_overgen(cfg: &RunConfig, out: &Path) -> Result<Vec<OvergenAudit>> {
    let mut dir = RunDir::open(out, cfg)?;
    let test = load_splits(&dir)?.test;
    let stop = stopwords();
    let mut audits = Vec::new();
    for &system in &cfg.eval.systems {
        let Ok(path) = dir.input(&decode_path(system)) else {
            continue;
        };
        let decoded = read_decoded(&path)?;
        let report = score_decoded(cfg, &decoded, &test)?;
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0;
        for (d, rec) in decoded.iter().zip(&test) {
            let words = triple_words(&rec.triples);
            for w in tokenize(&d.text) {
                total += 1;
                let w = w.to_lowercase();
                if !stop.contains(&w) && !words.contains(&w) {
                    *freq.entry(w).or_default() += 1;
                }
            }
        }
        let unsupported = freq.values().sum();
        let mut top: Vec<(String, usize)> = freq.into_iter().collect();
        top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        top.truncate(TOP_WORDS);
        audits.push(OvergenAudit {
            system,
            overgen_counts: report.overgen_counts,
            unsupported_tokens: unsupported,
            total_tokens: total,
            top_words: top,
        });
    }
    if audits.is_empty() {
        return Err(Error::MissingInput(dir.path("decode")));
    }
    let mut txt = String::new();
    for a in &audits {
        let _ = writeln!(
            txt,
            "{}: {} of {} tokens unsupported; n-gram counts {:?}",
            a.system, a.unsupported_tokens, a.total_tokens, a.overgen_counts
        );
        for (w, c) in &a.top_words {
            let _ = writeln!(txt, "  {w}\t{c}");
        }
    }
    dir.write_json(
        "audit/overgen.json",
        &json!({"config_hash": dir.config_hash(), "systems": audits}),
    )?;
    dir.write("audit/overgen.txt", txt.as_bytes())?;
    Ok(audits)
}
