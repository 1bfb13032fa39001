//! Small pre-norm transformer encoder-decoder with hand-written backward pass.
//!
//! Token embeddings are shared by the encoder input, the decoder input and
//! the output projection; inputs are scaled by `sqrt(d)` and get sinusoidal
//! positions. The decoder reads the target shifted right with EOS in front
//! and predicts the target followed by EOS.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptors::{attention_supportiveness, hard_adapt, AdaptorChoice};
use crate::error::{Error, Result};
use crate::nn::layers::{
    attention, attention_backward, linear, linear_backward, log_softmax_rows, norm, norm_backward, relu, relu_backward,
    AttnCache, NormCache,
};
use crate::nn::{adam_step, init_params, AdamState, EpochLoss, Init, ParamSet, ParamSpec, TrainConfig};
use crate::seed::derive_seed;
use crate::tokenizer::EOS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            dim: 64,
            heads: 4,
            ff: 128,
            enc_layers: 2,
            dec_layers: 2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "generator dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ff == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::InvalidConfig(
                "generator needs positive ff width and at least one layer per stack".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenModel {
    pub params: ParamSet,
    pub cfg: GenConfig,
    vocab_size: usize,
}

/// Sinusoidal position table, `len x d`.
pub fn positions(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn norm_spec(name: &str, d: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.gamma"), &[d], Init::Ones),
        ParamSpec::new(format!("{name}.beta"), &[d], Init::Zeros),
    ]
}

fn linear_spec(name: &str, i: usize, o: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.w"), &[i, o], Init::ScaledUniform),
        ParamSpec::new(format!("{name}.b"), &[o], Init::Zeros),
    ]
}

fn attn_spec(name: &str, d: usize) -> Vec<ParamSpec> {
    ["q", "k", "v", "o"]
        .iter()
        .flat_map(|x| linear_spec(&format!("{name}.{x}"), d, d))
        .collect()
}

struct FfCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    h: Array2<f64>,
}

struct EncLayerCache {
    n1: NormCache,
    att: AttnCache,
    n2: NormCache,
    ff: FfCache,
}

struct DecLayerCache {
    n1: NormCache,
    att: AttnCache,
    n2: NormCache,
    cross: AttnCache,
    n3: NormCache,
    ff: FfCache,
}

/// Encoder output plus what the backward pass needs.
pub struct Memory {
    /// `|K'| x d`.
    pub states: Array2<f64>,
    tokens: Vec<u32>,
    layers: Vec<EncLayerCache>,
    fin: NormCache,
}

struct DecodeCache {
    inputs: Vec<u32>,
    layers: Vec<DecLayerCache>,
    fin: NormCache,
    out: Array2<f64>,
    log_probs: Array2<f64>,
}

/// Per-position loss and cross-attention for one teacher-forced pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// `-log p(target_t | target_<t, source)`.
    pub nll: Vec<f64>,
    /// Final decoder layer's cross-attention, one `|T| x |K'|` matrix per head.
    pub attention: Vec<Array2<f64>>,
}

impl GenModel {
    pub fn new(vocab_size: usize, cfg: GenConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut spec = vec![
            ParamSpec::new("emb", &[vocab_size, d], Init::Uniform((1.0 / d as f64).sqrt())),
            ParamSpec::new("out.b", &[vocab_size], Init::Zeros),
        ];
        for l in 0..cfg.enc_layers {
            let p = format!("enc.{l}");
            spec.extend(norm_spec(&format!("{p}.ln1"), d));
            spec.extend(attn_spec(&format!("{p}.att"), d));
            spec.extend(norm_spec(&format!("{p}.ln2"), d));
            spec.extend(linear_spec(&format!("{p}.ff1"), d, cfg.ff));
            spec.extend(linear_spec(&format!("{p}.ff2"), cfg.ff, d));
        }
        spec.extend(norm_spec("enc.ln", d));
        for l in 0..cfg.dec_layers {
            let p = format!("dec.{l}");
            spec.extend(norm_spec(&format!("{p}.ln1"), d));
            spec.extend(attn_spec(&format!("{p}.att"), d));
            spec.extend(norm_spec(&format!("{p}.ln2"), d));
            spec.extend(attn_spec(&format!("{p}.cross"), d));
            spec.extend(norm_spec(&format!("{p}.ln3"), d));
            spec.extend(linear_spec(&format!("{p}.ff1"), d, cfg.ff));
            spec.extend(linear_spec(&format!("{p}.ff2"), cfg.ff, d));
        }
        spec.extend(norm_spec("dec.ln", d));
        Ok(GenModel {
            params: init_params(&spec, seed),
            cfg,
            vocab_size,
        })
    }

    pub fn from_params(params: ParamSet, cfg: GenConfig) -> Result<Self> {
        if !params.contains("emb") {
            return Err(Error::parse("generator checkpoint", "missing `emb`"));
        }
        let vocab_size = params.get("emb").shape()[0];
        let model = GenModel::new(vocab_size, cfg, 0)?;
        if !model.params.same_layout(&params) {
            return Err(Error::parse(
                "generator checkpoint",
                "parameter layout does not match config",
            ));
        }
        Ok(GenModel { params, ..model })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn check_ids(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&id) => Err(Error::OutOfVocab {
                id,
                vocab_size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn embed(&self, tokens: &[u32]) -> Array2<f64> {
        let d = self.cfg.dim;
        let emb = self.params.mat("emb");
        let scale = (d as f64).sqrt();
        let mut x = positions(tokens.len(), d);
        for (mut row, &t) in x.rows_mut().into_iter().zip(tokens) {
            row.scaled_add(scale, &emb.row(t as usize));
        }
        x
    }

    fn embed_backward(&self, grads: &mut ParamSet, tokens: &[u32], dx: &Array2<f64>) {
        let scale = (self.cfg.dim as f64).sqrt();
        let mut g = grads.mat_mut("emb");
        for (row, &t) in dx.rows().into_iter().zip(tokens) {
            g.row_mut(t as usize).scaled_add(scale, &row);
        }
    }

    fn ff(&self, name: &str, x: Array2<f64>) -> (Array2<f64>, FfCache) {
        let pre = linear(&self.params, &format!("{name}.ff1"), &x);
        let h = relu(&pre);
        let y = linear(&self.params, &format!("{name}.ff2"), &h);
        (y, FfCache { x, pre, h })
    }

    fn ff_backward(&self, grads: &mut ParamSet, name: &str, c: &FfCache, dy: &Array2<f64>) -> Array2<f64> {
        let dh = linear_backward(&self.params, grads, &format!("{name}.ff2"), &c.h, dy);
        let dpre = relu_backward(&c.pre, &dh);
        linear_backward(&self.params, grads, &format!("{name}.ff1"), &c.x, &dpre)
    }

    /// Encodes the linearized source; one memory row per source position.
    pub fn encode(&self, src: &[u32]) -> Result<Memory> {
        if src.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.check_ids(src)?;
        let h = self.cfg.heads;
        let mut x = self.embed(src);
        let mut layers = Vec::with_capacity(self.cfg.enc_layers);
        for l in 0..self.cfg.enc_layers {
            let p = format!("enc.{l}");
            let (a, n1) = norm(&self.params, &format!("{p}.ln1"), &x);
            let (att_out, att) = attention(&self.params, &format!("{p}.att"), &a, &a, h, false);
            x += &att_out;
            let (b, n2) = norm(&self.params, &format!("{p}.ln2"), &x);
            let (f, ff) = self.ff(&p, b);
            x += &f;
            layers.push(EncLayerCache { n1, att, n2, ff });
        }
        let (states, fin) = norm(&self.params, "enc.ln", &x);
        Ok(Memory {
            states,
            tokens: src.to_vec(),
            layers,
            fin,
        })
    }

    fn encode_backward(&self, grads: &mut ParamSet, mem: &Memory, dstates: &Array2<f64>) {
        let mut dx = norm_backward(&self.params, grads, "enc.ln", &mem.fin, dstates);
        for (l, c) in mem.layers.iter().enumerate().rev() {
            let p = format!("enc.{l}");
            let db = self.ff_backward(grads, &p, &c.ff, &dx);
            dx += &norm_backward(&self.params, grads, &format!("{p}.ln2"), &c.n2, &db);
            let (dq, dkv) = attention_backward(&self.params, grads, &format!("{p}.att"), &c.att, &dx);
            let da = dq + dkv;
            dx += &norm_backward(&self.params, grads, &format!("{p}.ln1"), &c.n1, &da);
        }
        self.embed_backward(grads, &mem.tokens, &dx);
    }

    /// Decoder stack over `inputs`; logits are computed for rows `from..`.
    fn decode_forward(&self, inputs: &[u32], mem: &Memory, from: usize) -> DecodeCache {
        let h = self.cfg.heads;
        let mut y = self.embed(inputs);
        let mut layers = Vec::with_capacity(self.cfg.dec_layers);
        for l in 0..self.cfg.dec_layers {
            let p = format!("dec.{l}");
            let (a, n1) = norm(&self.params, &format!("{p}.ln1"), &y);
            let (sa, att) = attention(&self.params, &format!("{p}.att"), &a, &a, h, true);
            y += &sa;
            let (b, n2) = norm(&self.params, &format!("{p}.ln2"), &y);
            let (ca, cross) = attention(&self.params, &format!("{p}.cross"), &b, &mem.states, h, false);
            y += &ca;
            let (c, n3) = norm(&self.params, &format!("{p}.ln3"), &y);
            let (f, ff) = self.ff(&p, c);
            y += &f;
            layers.push(DecLayerCache {
                n1,
                att,
                n2,
                cross,
                n3,
                ff,
            });
        }
        let (out, fin) = norm(&self.params, "dec.ln", &y);
        let mut logits = out.slice(s![from.., ..]).dot(&self.params.mat("emb").t());
        logits += &self.params.vector("out.b");
        DecodeCache {
            inputs: inputs.to_vec(),
            layers,
            fin,
            out,
            log_probs: log_softmax_rows(&logits),
        }
    }

    /// Returns the gradient with respect to the memory states.
    fn decode_backward(
        &self,
        grads: &mut ParamSet,
        c: &DecodeCache,
        mem: &Memory,
        dlogits: &Array2<f64>,
    ) -> Array2<f64> {
        grads.vector_mut("out.b").scaled_add(1.0, &dlogits.sum_axis(Axis(0)));
        grads.mat_mut("emb").scaled_add(1.0, &dlogits.t().dot(&c.out));
        let dout = dlogits.dot(&self.params.mat("emb"));
        let mut dy = norm_backward(&self.params, grads, "dec.ln", &c.fin, &dout);
        let mut dmem = Array2::zeros(mem.states.raw_dim());
        for (l, lc) in c.layers.iter().enumerate().rev() {
            let p = format!("dec.{l}");
            let dc = self.ff_backward(grads, &p, &lc.ff, &dy);
            dy += &norm_backward(&self.params, grads, &format!("{p}.ln3"), &lc.n3, &dc);
            let (db, dm) = attention_backward(&self.params, grads, &format!("{p}.cross"), &lc.cross, &dy);
            dmem += &dm;
            dy += &norm_backward(&self.params, grads, &format!("{p}.ln2"), &lc.n2, &db);
            let (dq, dkv) = attention_backward(&self.params, grads, &format!("{p}.att"), &lc.att, &dy);
            let da = dq + dkv;
            dy += &norm_backward(&self.params, grads, &format!("{p}.ln1"), &lc.n1, &da);
        }
        self.embed_backward(grads, &c.inputs, &dy);
        dmem
    }

    /// Teacher-forced pass. `shifted` is `[EOS] + T` and `target` is `T + [EOS]`.
    pub fn decode_nll(&self, shifted: &[u32], target: &[u32], mem: &Memory) -> Result<DecodeOutput> {
        Ok(self.decode_nll_cached(shifted, target, mem)?.0)
    }

    fn decode_nll_cached(&self, shifted: &[u32], target: &[u32], mem: &Memory) -> Result<(DecodeOutput, DecodeCache)> {
        if shifted.len() != target.len() {
            return Err(Error::LengthMismatch {
                expected: target.len(),
                actual: shifted.len(),
            });
        }
        if shifted.first() != Some(&EOS) {
            return Err(Error::InvalidConfig("decoder input must start with EOS".into()));
        }
        self.check_ids(shifted)?;
        self.check_ids(target)?;
        let c = self.decode_forward(shifted, mem, 0);
        let nll = target
            .iter()
            .enumerate()
            .map(|(t, &y)| -c.log_probs[[t, y as usize]])
            .collect();
        let attention = c.layers.last().expect("at least one decoder layer").cross.probs.clone();
        Ok((DecodeOutput { nll, attention }, c))
    }

    /// Log-probabilities of the token following `prefix` (which starts with EOS).
    pub fn next_log_probs(&self, mem: &Memory, prefix: &[u32]) -> Vec<f64> {
        let c = self.decode_forward(prefix, mem, prefix.len() - 1);
        c.log_probs.row(0).to_vec()
    }

    /// `sum_t w_t * nll_t` for one example, accumulating `scale` times its
    /// gradient when `grads` is given. Weights of `None` mean all ones;
    /// attention-derived weights are treated as constants.
    pub fn weighted_nll(
        &self,
        src: &[u32],
        tgt: &[u32],
        weights: Weights<'_>,
        grads: Option<(&mut ParamSet, f64)>,
    ) -> Result<f64> {
        let (shifted, target) = teacher_pair(tgt);
        let mem = self.encode(src)?;
        let (out, cache) = self.decode_nll_cached(&shifted, &target, &mem)?;
        let w: Vec<f64> = match weights {
            Weights::Uniform => vec![1.0; target.len()],
            Weights::Given(w) => {
                if w.len() != target.len() {
                    return Err(Error::LengthMismatch {
                        expected: target.len(),
                        actual: w.len(),
                    });
                }
                w.to_vec()
            }
            Weights::Attention => attention_supportiveness(&out.attention),
        };
        let loss: f64 = out.nll.iter().zip(&w).map(|(l, w)| l * w).sum();
        if let Some((grads, scale)) = grads {
            let mut dlogits = cache.log_probs.mapv(f64::exp);
            for (t, (&y, &wt)) in target.iter().zip(&w).enumerate() {
                dlogits[[t, y as usize]] -= 1.0;
                dlogits.row_mut(t).mapv_inplace(|v| v * wt * scale);
            }
            let dmem = self.decode_backward(grads, &cache, &mem, &dlogits);
            self.encode_backward(grads, &mem, &dmem);
        }
        Ok(loss)
    }
}

/// Per-position loss weights for [`GenModel::weighted_nll`].
#[derive(Clone, Copy, Debug)]
pub enum Weights<'a> {
    Uniform,
    Given(&'a [f64]),
    Attention,
}

/// `([EOS] + T, T + [EOS])`.
pub fn teacher_pair(tgt: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut shifted = Vec::with_capacity(tgt.len() + 1);
    shifted.push(EOS);
    shifted.extend_from_slice(tgt);
    let mut target = tgt.to_vec();
    target.push(EOS);
    (shifted, target)
}

/// One training pair; `sigma` is the estimator's supportiveness of each target token.
#[derive(Clone, Debug)]
pub struct GenExample<'a> {
    pub src: &'a [u32],
    pub tgt: &'a [u32],
    pub sigma: Option<&'a [f64]>,
}

/// Teacher-forced Adam training under an adaptor. The batch loss is the
/// adapted token loss divided by the number of target positions in the batch.
pub fn train_gen(
    data: &[GenExample<'_>],
    mut model: GenModel,
    adaptor: AdaptorChoice,
    cfg: &TrainConfig,
) -> Result<(GenModel, Vec<EpochLoss>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if adaptor.needs_estimator() {
        if let Some(e) = data.iter().find(|e| e.sigma.is_none_or(|s| s.len() != e.tgt.len())) {
            return match e.sigma {
                None => Err(Error::MissingSeModel(adaptor.name())),
                Some(s) => Err(Error::LengthMismatch {
                    expected: e.tgt.len(),
                    actual: s.len(),
                }),
            };
        }
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gen-order"));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gen-hard"));
    let mut state = AdamState::new(&model.params);
    let mut grads = model.params.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut total, mut tokens) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<(usize, Vec<u32>)> = batch
                .iter()
                .map(|&i| {
                    let e = &data[i];
                    let tgt = match (adaptor, e.sigma) {
                        (AdaptorChoice::Hard, Some(s)) => hard_adapt(e.tgt, s, &mut drop_rng),
                        _ => Ok(e.tgt.to_vec()),
                    }?;
                    Ok((i, tgt))
                })
                .collect::<Result<_>>()?;
            let count: usize = items.iter().map(|(_, t)| t.len() + 1).sum();
            let scale = 1.0 / count as f64;
            grads.fill_zero();
            for (i, tgt) in &items {
                let e = &data[*i];
                let soft: Vec<f64>;
                let weights = match adaptor {
                    AdaptorChoice::Soft => {
                        soft = e.sigma.expect("checked above").iter().copied().chain([1.0]).collect();
                        Weights::Given(&soft)
                    }
                    AdaptorChoice::Attention => Weights::Attention,
                    AdaptorChoice::None | AdaptorChoice::Hard => Weights::Uniform,
                };
                total += model.weighted_nll(e.src, tgt, weights, Some((&mut grads, scale)))?;
            }
            tokens += count;
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::NonFiniteGradient(name.to_owned()));
            }
            adam_step(&mut model.params, &grads, &mut state, cfg)?;
        }
        let mean = total / tokens.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        log::info!(
            "generator epoch {epoch} ({}): mean token loss {mean:.4}",
            adaptor.name()
        );
        log.push(EpochLoss { epoch, loss: mean });
    }
    Ok((model, log))
}

/// Mean per-token negative log-likelihood, unweighted.
pub fn mean_nll<'a>(model: &GenModel, data: impl IntoIterator<Item = (&'a [u32], &'a [u32])>) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for (src, tgt) in data {
        total += model.weighted_nll(src, tgt, Weights::Uniform, None)?;
        count += tgt.len() + 1;
    }
    Ok(total / count.max(1) as f64)
}

/// Memory states as `d x |K'|`, one column per source position.
pub fn memory_columns(mem: &Memory) -> Array2<f64> {
    mem.states.t().to_owned()
}
