//! Supportiveness estimator.
//!
//! Source (linearized triples) and target tokens go through separate
//! position-wise extractors `emb -> norm -> FW2(ReLU(FW1)) -> norm`. The
//! final normalization has no gain or bias, so every feature vector has
//! norm close to `sqrt(d)` and the support matrix stays bounded. The
//! support matrix `M = F_K^T F_T` scores every source/target token pair and
//! each target token's supportiveness is the log-sum-exp of its column.
//! Training contrasts the real target with a negative sample drawn from the
//! target unigram distribution (margin loss), rewards identical source
//! tokens (word-consistent loss) and penalizes a source token supporting too
//! much (concentration loss).

use ndarray::{Array1, Array2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    linear, linear_backward, norm, norm_backward, normalize, normalize_backward, relu, relu_backward, NormCache,
};
use crate::nn::{
    adam_step, init_params, log_sum_exp, sigmoid, AdamState, EpochLoss, Init, ParamSet, ParamSpec, TrainConfig,
};
use crate::seed::derive_seed;

/// Which axis the word-consistent log-softmax normalizes over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordLossAxis {
    /// For each target token, over all source tokens.
    #[default]
    Source,
    /// For each source token, over all target tokens.
    Target,
}

/// What the concentration loss sums along each source row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConcentrationForm {
    /// `max_i sum_j sigmoid(M_ij)`, bounded by the target length.
    #[default]
    Sigmoid,
    /// `max_i sum_j M_ij` on the raw support matrix.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeConfig {
    pub dim: usize,
    pub hidden: usize,
    pub omega_w: f64,
    pub omega_c: f64,
    pub word_axis: WordLossAxis,
    pub concentration: ConcentrationForm,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig {
            dim: 64,
            hidden: 256,
            omega_w: 0.05,
            omega_c: 1.0,
            word_axis: WordLossAxis::Source,
            concentration: ConcentrationForm::Sigmoid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Source => "src",
            Side::Target => "tgt",
        }
    }
}

/// Two extractors sharing a vocabulary but not weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SeModel {
    pub params: ParamSet,
    vocab_size: usize,
    dim: usize,
    hidden: usize,
}

struct SideCache {
    tokens: Vec<u32>,
    n1: NormCache,
    a1: Array2<f64>,
    h_pre: Array2<f64>,
    h: Array2<f64>,
    n2: NormCache,
}

/// `|K'| x m` matrix; entry `(i, j)` is how much source token `i` supports target token `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportMatrix(pub Array2<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct SupportVector {
    /// Column log-sum-exp of the support matrix.
    pub s: Vec<f64>,
    /// `sigmoid(s)`.
    pub sigma: Vec<f64>,
}

impl SeModel {
    pub fn new(vocab_size: usize, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut spec = Vec::new();
        for side in [Side::Source, Side::Target] {
            let p = side.prefix();
            spec.extend([
                ParamSpec::new(format!("{p}.emb"), &[vocab_size, dim], Init::Uniform(1.0)),
                ParamSpec::new(format!("{p}.nl1.gamma"), &[dim], Init::Ones),
                ParamSpec::new(format!("{p}.nl1.beta"), &[dim], Init::Zeros),
                ParamSpec::new(format!("{p}.fw1.w"), &[dim, hidden], Init::ScaledUniform),
                ParamSpec::new(format!("{p}.fw1.b"), &[hidden], Init::Zeros),
                ParamSpec::new(format!("{p}.fw2.w"), &[hidden, dim], Init::ScaledUniform),
                ParamSpec::new(format!("{p}.fw2.b"), &[dim], Init::Zeros),
            ]);
        }
        SeModel {
            params: init_params(&spec, seed),
            vocab_size,
            dim,
            hidden,
        }
    }

    /// Rebuilds a model around loaded parameters.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let shape = |n: &str| -> Result<Vec<usize>> {
            if params.contains(n) {
                Ok(params.get(n).shape().to_vec())
            } else {
                Err(Error::parse("estimator checkpoint", format!("missing `{n}`")))
            }
        };
        let emb = shape("src.emb")?;
        let fw1 = shape("src.fw1.w")?;
        let model = SeModel::new(emb[0], emb[1], fw1[1], 0);
        if !model.params.same_layout(&params) {
            return Err(Error::parse("estimator checkpoint", "unexpected parameter layout"));
        }
        Ok(SeModel { params, ..model })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn check_ids(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&id) => Err(Error::OutOfVocab {
                id,
                vocab_size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Position-wise features with one row per token (`len x d`).
    fn forward_rows(&self, tokens: &[u32], side: Side) -> Result<(Array2<f64>, SideCache)> {
        self.check_ids(tokens)?;
        let p = side.prefix();
        let emb = self.params.mat(&format!("{p}.emb"));
        let mut x = Array2::zeros((tokens.len(), self.dim));
        for (mut row, &t) in x.rows_mut().into_iter().zip(tokens) {
            row.assign(&emb.row(t as usize));
        }
        let (a1, n1) = norm(&self.params, &format!("{p}.nl1"), &x);
        let h_pre = linear(&self.params, &format!("{p}.fw1"), &a1);
        let h = relu(&h_pre);
        let y = linear(&self.params, &format!("{p}.fw2"), &h);
        let (out, n2) = normalize(&y);
        Ok((
            out,
            SideCache {
                tokens: tokens.to_vec(),
                n1,
                a1,
                h_pre,
                h,
                n2,
            },
        ))
    }

    fn backward_rows(&self, side: Side, cache: &SideCache, dout: &Array2<f64>, grads: &mut ParamSet) {
        let p = side.prefix();
        let dy = normalize_backward(&cache.n2, dout);
        let dh = linear_backward(&self.params, grads, &format!("{p}.fw2"), &cache.h, &dy);
        let dh_pre = relu_backward(&cache.h_pre, &dh);
        let da1 = linear_backward(&self.params, grads, &format!("{p}.fw1"), &cache.a1, &dh_pre);
        let dx = norm_backward(&self.params, grads, &format!("{p}.nl1"), &cache.n1, &da1);
        let mut gemb = grads.mat_mut(&format!("{p}.emb"));
        for (row, &t) in dx.rows().into_iter().zip(&cache.tokens) {
            gemb.row_mut(t as usize).scaled_add(1.0, &row);
        }
    }

    /// Feature matrix `d x len`; column `j` depends on token `j` only.
    pub fn extract_features(&self, tokens: &[u32], side: Side) -> Result<Array2<f64>> {
        Ok(self.forward_rows(tokens, side)?.0.reversed_axes())
    }

    /// Supportiveness of the source for each target token.
    pub fn support(&self, src: &[u32], tgt: &[u32]) -> Result<SupportVector> {
        let fk = self.extract_features(src, Side::Source)?;
        let ft = self.extract_features(tgt, Side::Target)?;
        Ok(support_vector(&support_matrix(&fk, &ft)?))
    }

    /// `sigmoid(s_j)` for each target token.
    pub fn token_supportiveness(&self, src: &[u32], tgt: &[u32]) -> Result<Vec<f64>> {
        Ok(self.support(src, tgt)?.sigma)
    }
}

/// `M = F_K^T F_T` for features stored `d x len`.
pub fn support_matrix(fk: &Array2<f64>, ft: &Array2<f64>) -> Result<SupportMatrix> {
    if fk.nrows() != ft.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "source features have dim {}, target features {}",
            fk.nrows(),
            ft.nrows()
        )));
    }
    Ok(SupportMatrix(fk.t().dot(ft)))
}

/// `s_j = log sum_i exp(M_ij)` with `sigmoid(s)` attached.
pub fn support_vector(m: &SupportMatrix) -> SupportVector {
    let s: Vec<f64> =
        m.0.columns()
            .into_iter()
            .map(|c| log_sum_exp(c.iter().copied()))
            .collect();
    let sigma = s.iter().map(|&x| sigmoid(x)).collect();
    SupportVector { s, sigma }
}

/// `sum sigmoid(s_neg) - sum sigmoid(s_pos)`.
pub fn loss_margin(pos: &SupportVector, neg: &SupportVector) -> f64 {
    neg.sigma.iter().sum::<f64>() - pos.sigma.iter().sum::<f64>()
}

/// Negative log-softmax of `M` at every position whose source and target
/// tokens are identical, normalized along `axis`.
pub fn loss_word_consistent(m: &SupportMatrix, src: &[u32], tgt: &[u32], axis: WordLossAxis) -> f64 {
    let m = &m.0;
    let mut loss = 0.0;
    match axis {
        WordLossAxis::Source => {
            for (j, &t) in tgt.iter().enumerate() {
                let col = m.column(j);
                let mut lse = None;
                for (i, &k) in src.iter().enumerate() {
                    if k == t {
                        let z = *lse.get_or_insert_with(|| log_sum_exp(col.iter().copied()));
                        loss -= col[i] - z;
                    }
                }
            }
        }
        WordLossAxis::Target => {
            for (i, &k) in src.iter().enumerate() {
                let row = m.row(i);
                let mut lse = None;
                for (j, &t) in tgt.iter().enumerate() {
                    if k == t {
                        let z = *lse.get_or_insert_with(|| log_sum_exp(row.iter().copied()));
                        loss -= row[j] - z;
                    }
                }
            }
        }
    }
    loss
}

/// Largest row sum of `M` (or of `sigmoid(M)`), with the first maximal row on ties.
pub fn loss_concentration(m: &SupportMatrix, form: ConcentrationForm) -> f64 {
    concentration_row(m, form).1
}

fn concentration_row(m: &SupportMatrix, form: ConcentrationForm) -> (usize, f64) {
    let sums = match form {
        ConcentrationForm::Raw => m.0.sum_axis(Axis(1)),
        ConcentrationForm::Sigmoid => m.0.mapv(sigmoid).sum_axis(Axis(1)),
    };
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in sums.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Empirical token distribution over training targets (raw counts).
#[derive(Clone, Debug, PartialEq)]
pub struct UnigramDist {
    counts: Vec<f64>,
}

impl UnigramDist {
    pub fn from_targets<'a>(vocab_size: usize, targets: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut counts = vec![0.0; vocab_size];
        for t in targets {
            for &id in t {
                counts[id as usize] += 1.0;
            }
        }
        UnigramDist { counts }
    }

    pub fn from_counts(counts: Vec<f64>) -> Self {
        UnigramDist { counts }
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }
}

/// Draws `|target|` tokens i.i.d. from `dist` restricted to tokens absent from `target`.
pub fn sample_negative<R: Rng>(target: &[u32], dist: &UnigramDist, rng: &mut R) -> Result<Vec<u32>> {
    let mut weights = dist.counts.clone();
    for &t in target {
        if let Some(w) = weights.get_mut(t as usize) {
            *w = 0.0;
        }
    }
    let sampler = WeightedIndex::new(&weights).map_err(|_| Error::DegenerateDistribution)?;
    Ok((0..target.len()).map(|_| sampler.sample(rng) as u32).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SeLoss {
    pub margin: f64,
    pub word: f64,
    pub concentration: f64,
    pub total: f64,
}

fn word_grad(m: &Array2<f64>, src: &[u32], tgt: &[u32], axis: WordLossAxis) -> Array2<f64> {
    let mut d = Array2::zeros(m.raw_dim());
    match axis {
        WordLossAxis::Source => {
            for (j, &t) in tgt.iter().enumerate() {
                let matches = src.iter().filter(|&&k| k == t).count();
                if matches == 0 {
                    continue;
                }
                let col = m.column(j);
                let z = log_sum_exp(col.iter().copied());
                for (i, &k) in src.iter().enumerate() {
                    d[[i, j]] = matches as f64 * (col[i] - z).exp() - f64::from(u8::from(k == t));
                }
            }
        }
        WordLossAxis::Target => {
            for (i, &k) in src.iter().enumerate() {
                let matches = tgt.iter().filter(|&&t| t == k).count();
                if matches == 0 {
                    continue;
                }
                let row = m.row(i);
                let z = log_sum_exp(row.iter().copied());
                for (j, &t) in tgt.iter().enumerate() {
                    d[[i, j]] = matches as f64 * (row[j] - z).exp() - f64::from(u8::from(k == t));
                }
            }
        }
    }
    d
}

/// Gradient of `sum_j c_j * sigmoid(lse_i M_ij)` with respect to `M`.
fn sigma_sum_grad(m: &Array2<f64>, sv: &SupportVector, coeff: f64) -> Array2<f64> {
    let mut d = Array2::zeros(m.raw_dim());
    for (j, (&s, &sg)) in sv.s.iter().zip(&sv.sigma).enumerate() {
        let ds = coeff * sg * (1.0 - sg);
        for i in 0..m.nrows() {
            d[[i, j]] = ds * (m[[i, j]] - s).exp();
        }
    }
    d
}

/// One term of the estimator loss, or their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Margin,
    Word,
    Concentration,
    Total,
}

/// Evaluates `L_m + omega_w L_w + omega_c L_c` for one example and, when
/// `grads` is given, accumulates `scale` times its gradient.
pub fn se_loss(
    model: &SeModel,
    src: &[u32],
    tgt: &[u32],
    neg: &[u32],
    cfg: &SeConfig,
    grads: Option<(&mut ParamSet, f64)>,
) -> Result<SeLoss> {
    se_term_loss(model, src, tgt, neg, cfg, LossTerm::Total, grads)
}

/// Like [`se_loss`], but the gradient covers only `term` (unweighted for a
/// single term). The returned parts are always complete.
pub fn se_term_loss(
    model: &SeModel,
    src: &[u32],
    tgt: &[u32],
    neg: &[u32],
    cfg: &SeConfig,
    term: LossTerm,
    grads: Option<(&mut ParamSet, f64)>,
) -> Result<SeLoss> {
    let (fk, ck) = model.forward_rows(src, Side::Source)?;
    let (ft, ct) = model.forward_rows(tgt, Side::Target)?;
    let (fneg, cn) = model.forward_rows(neg, Side::Target)?;
    let m = SupportMatrix(fk.dot(&ft.t()));
    let mn = SupportMatrix(fk.dot(&fneg.t()));
    let sv = support_vector(&m);
    let svn = support_vector(&mn);
    let margin = loss_margin(&sv, &svn);
    let word = loss_word_consistent(&m, src, tgt, cfg.word_axis);
    let (top_row, concentration) = concentration_row(&m, cfg.concentration);
    let loss = SeLoss {
        margin,
        word,
        concentration,
        total: margin + cfg.omega_w * word + cfg.omega_c * concentration,
    };
    let Some((grads, scale)) = grads else {
        return Ok(loss);
    };
    let (cm, cw, cc) = match term {
        LossTerm::Margin => (1.0, 0.0, 0.0),
        LossTerm::Word => (0.0, 1.0, 0.0),
        LossTerm::Concentration => (0.0, 0.0, 1.0),
        LossTerm::Total => (1.0, cfg.omega_w, cfg.omega_c),
    };
    let mut dm = sigma_sum_grad(&m.0, &sv, -cm);
    if cw != 0.0 {
        dm.scaled_add(cw, &word_grad(&m.0, src, tgt, cfg.word_axis));
    }
    let top = m.0.row(top_row);
    match cfg.concentration {
        ConcentrationForm::Raw => dm.row_mut(top_row).mapv_inplace(|v| v + cc),
        ConcentrationForm::Sigmoid => {
            for (d, &x) in dm.row_mut(top_row).iter_mut().zip(top.iter()) {
                let sg = sigmoid(x);
                *d += cc * sg * (1.0 - sg);
            }
        }
    }
    dm *= scale;
    let mut dmn = sigma_sum_grad(&mn.0, &svn, cm);
    dmn *= scale;

    let dfk = dm.dot(&ft) + dmn.dot(&fneg);
    let dft = dm.t().dot(&fk);
    let dfn = dmn.t().dot(&fk);
    model.backward_rows(Side::Source, &ck, &dfk, grads);
    model.backward_rows(Side::Target, &ct, &dft, grads);
    model.backward_rows(Side::Target, &cn, &dfn, grads);
    Ok(loss)
}

/// One source/target pair for estimator training.
#[derive(Clone, Debug)]
pub struct SeExample<'a> {
    pub src: &'a [u32],
    pub tgt: &'a [u32],
}

/// Mini-batch Adam on the mean estimator loss. Deterministic per `cfg.seed`.
pub fn train_se(
    data: &[SeExample<'_>],
    model: SeModel,
    cfg: &TrainConfig,
    se: &SeConfig,
) -> Result<(SeModel, Vec<EpochLoss>)> {
    let dist = UnigramDist::from_targets(model.vocab_size, data.iter().map(|e| e.tgt));
    train_se_with(data, &dist, model, cfg, se)
}

/// [`train_se`] with an explicit negative-sampling distribution.
pub fn train_se_with(
    data: &[SeExample<'_>],
    dist: &UnigramDist,
    mut model: SeModel,
    cfg: &TrainConfig,
    se: &SeConfig,
) -> Result<(SeModel, Vec<EpochLoss>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if dist.counts.len() != model.vocab_size {
        return Err(Error::DimensionMismatch(format!(
            "unigram distribution over {} ids, vocabulary has {}",
            dist.counts.len(),
            model.vocab_size
        )));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "se-order"));
    let mut neg_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "se-negatives"));
    let mut state = AdamState::new(&model.params);
    let mut grads = model.params.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let mut negs = Vec::with_capacity(batch.len());
            for &i in batch {
                match sample_negative(data[i].tgt, dist, &mut neg_rng) {
                    Ok(n) => negs.push((i, n)),
                    Err(Error::DegenerateDistribution) => {
                        log::warn!("record {i}: no negative sample possible, skipped")
                    }
                    Err(e) => return Err(e),
                }
            }
            if negs.is_empty() {
                continue;
            }
            let scale = 1.0 / negs.len() as f64;
            for (i, neg) in &negs {
                let l = se_loss(&model, data[*i].src, data[*i].tgt, neg, se, Some((&mut grads, scale)))?;
                total += l.total;
                seen += 1;
            }
            adam_step(&mut model.params, &grads, &mut state, cfg)?;
        }
        let mean = total / seen.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        log::info!("estimator epoch {epoch}: mean loss {mean:.4}");
        log.push(EpochLoss { epoch, loss: mean });
    }
    Ok((model, log))
}

/// Mean `sigmoid(s)` of the labeled clean and noise target tokens.
pub fn supportiveness_by_label<'a>(
    model: &SeModel,
    data: impl IntoIterator<Item = (&'a [u32], &'a [u32], &'a [bool])>,
) -> Result<(f64, f64)> {
    let (mut clean, mut noise) = ((0.0, 0usize), (0.0, 0usize));
    for (src, tgt, is_noise) in data {
        let sigma = model.token_supportiveness(src, tgt)?;
        for (s, &n) in sigma.iter().zip(is_noise) {
            let acc = if n { &mut noise } else { &mut clean };
            acc.0 += s;
            acc.1 += 1;
        }
    }
    Ok((clean.0 / clean.1.max(1) as f64, noise.0 / noise.1.max(1) as f64))
}

/// Columnwise softmax of `M`, used by the tests and diagnostics.
pub fn column_softmax(m: &SupportMatrix) -> Array2<f64> {
    let mut out = m.0.clone();
    for mut col in out.columns_mut() {
        let z = log_sum_exp(col.iter().copied());
        col.mapv_inplace(|v| (v - z).exp());
    }
    out
}

/// Row sums of `M`.
pub fn row_sums(m: &SupportMatrix) -> Array1<f64> {
    m.0.sum_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use ndarray::array;

    fn sv(s: &[f64]) -> SupportVector {
        SupportVector {
            s: s.to_vec(),
            sigma: s.iter().map(|&x| sigmoid(x)).collect(),
        }
    }

    #[test]
    fn identity_features_give_identity_matrix() {
        let f = Array2::<f64>::eye(3);
        assert_eq!(support_matrix(&f, &f).unwrap().0, Array2::<f64>::eye(3));
        let a = array![[1.0], [0.0]];
        let b = array![[0.0], [1.0]];
        assert_eq!(support_matrix(&a, &b).unwrap().0, array![[0.0]]);
        assert!(support_matrix(&Array2::zeros((3, 2)), &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn matrix_matches_naive_triple_loop() {
        let fk = array![[0.3, -1.2], [0.5, 0.7], [-0.4, 2.0]];
        let ft = array![[1.0, 0.1, -0.5, 0.2], [0.0, -2.0, 0.4, 1.1], [0.9, 0.3, -0.8, 0.6]];
        let m = support_matrix(&fk, &ft).unwrap().0;
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += fk[[k, i]] * ft[[k, j]];
                }
                assert!((m[[i, j]] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn support_vector_cases() {
        let v = support_vector(&SupportMatrix(array![[0.0], [0.0]]));
        assert!((v.s[0] - 2f64.ln()).abs() < 1e-12);
        let v = support_vector(&SupportMatrix(array![[1000.0], [0.0]]));
        assert!((v.s[0] - 1000.0).abs() < 1e-9);
        assert_eq!(v.sigma[0], 1.0);
    }

    #[test]
    fn margin_cases() {
        assert_eq!(loss_margin(&sv(&[0.3, -1.0]), &sv(&[0.3, -1.0])), 0.0);
        let l = loss_margin(&sv(&[10.0, 10.0]), &sv(&[-10.0, -10.0]));
        assert!((l - (2.0 * sigmoid(-10.0) - 2.0 * sigmoid(10.0))).abs() < 1e-15);
        assert!((l + 1.999818).abs() < 1e-6);
    }

    #[test]
    fn word_loss_cases() {
        let m = SupportMatrix(array![[2.0], [0.0]]);
        assert_eq!(loss_word_consistent(&m, &[5, 6], &[7], WordLossAxis::Source), 0.0);
        assert_eq!(
            loss_word_consistent(&SupportMatrix(array![[3.7]]), &[5], &[5], WordLossAxis::Source),
            0.0
        );
        let l = loss_word_consistent(&m, &[5, 6], &[5], WordLossAxis::Source);
        let expected = -(2.0 - (2f64.exp() + 1.0).ln());
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn concentration_cases() {
        assert_eq!(
            loss_concentration(&SupportMatrix(Array2::zeros((2, 3))), ConcentrationForm::Raw),
            0.0
        );
        let m = SupportMatrix(array![[1.0, 2.0], [4.0, 1.0], [-1.0, 0.0]]);
        assert_eq!(loss_concentration(&m, ConcentrationForm::Raw), 5.0);
        let z = SupportMatrix(Array2::zeros((2, 3)));
        assert_eq!(loss_concentration(&z, ConcentrationForm::Sigmoid), 1.5);
        let want = sigmoid(4.0) + sigmoid(1.0);
        assert_eq!(loss_concentration(&m, ConcentrationForm::Sigmoid), want);
    }

    #[test]
    fn negative_sampling_excludes_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dist = UnigramDist::from_counts(vec![0.0, 3.0, 2.0]);
        assert!(matches!(
            sample_negative(&[1, 2], &dist, &mut rng),
            Err(Error::DegenerateDistribution)
        ));
        let dist = UnigramDist::from_counts(vec![1.0, 1.0]);
        let s = sample_negative(&[0, 0, 0], &dist, &mut rng).unwrap();
        assert_eq!(s, vec![1, 1, 1]);
    }

    #[test]
    fn unit_norm_columns_after_extraction() {
        let model = SeModel::new(10, 4, 8, 3);
        let f = model.extract_features(&[1, 7, 3], Side::Target).unwrap();
        assert_eq!(f.dim(), (4, 3));
        for col in f.columns() {
            let mean = col.sum() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(matches!(
            model.extract_features(&[10], Side::Source),
            Err(Error::OutOfVocab { id: 10, .. })
        ));
    }

    #[test]
    fn permuting_tokens_permutes_columns() {
        let model = SeModel::new(10, 4, 8, 3);
        let a = model.extract_features(&[1, 7, 3], Side::Source).unwrap();
        let b = model.extract_features(&[3, 1, 7], Side::Source).unwrap();
        assert_eq!(a.column(0), b.column(1));
        assert_eq!(a.column(1), b.column(2));
        assert_eq!(a.column(2), b.column(0));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let model = SeModel::new(9, 8, 12, 21);
        let src = [1, 5, 6, 4, 2, 5];
        let tgt = [5, 7, 2, 8, 6];
        let neg = [3, 3, 0, 1, 4];
        let base = SeConfig {
            dim: 8,
            hidden: 12,
            omega_w: 0.7,
            omega_c: 0.3,
            ..Default::default()
        };
        let mut configs = Vec::new();
        for word_axis in [WordLossAxis::Source, WordLossAxis::Target] {
            for concentration in [ConcentrationForm::Sigmoid, ConcentrationForm::Raw] {
                configs.push(SeConfig {
                    word_axis,
                    concentration,
                    ..base.clone()
                });
            }
        }
        for cfg in configs {
            let mut g = model.params.zeros_like();
            se_loss(&model, &src, &tgt, &neg, &cfg, Some((&mut g, 1.0))).unwrap();
            let f = |p: &ParamSet| {
                let m = SeModel {
                    params: p.clone(),
                    ..model.clone()
                };
                se_loss(&m, &src, &tgt, &neg, &cfg, None).unwrap().total
            };
            let err = grad_check(f, &model.params, &g, 1e-4);
            assert!(err < 1e-3, "{:?}: {err}", cfg.word_axis);
        }
    }

    #[test]
    fn each_term_gradient_matches_finite_differences() {
        let model = SeModel::new(12, 8, 10, 5);
        let (src, tgt, neg) = ([3, 9, 4, 11, 6, 7], [9, 2, 10, 6, 5], [8, 1, 1, 0, 3]);
        let cfg = SeConfig {
            dim: 8,
            hidden: 10,
            ..Default::default()
        };
        for term in [LossTerm::Margin, LossTerm::Word, LossTerm::Concentration] {
            let mut g = model.params.zeros_like();
            se_term_loss(&model, &src, &tgt, &neg, &cfg, term, Some((&mut g, 1.0))).unwrap();
            let f = |p: &ParamSet| {
                let m = SeModel {
                    params: p.clone(),
                    ..model.clone()
                };
                let l = se_term_loss(&m, &src, &tgt, &neg, &cfg, term, None).unwrap();
                match term {
                    LossTerm::Margin => l.margin,
                    LossTerm::Word => l.word,
                    _ => l.concentration,
                }
            };
            let err = grad_check(f, &model.params, &g, 1e-4);
            assert!(err < 1e-3, "{term:?}: {err}");
        }
    }

    fn straight_line_forward(p: &ParamSet, side: &str, token: usize) -> Vec<f64> {
        let v = |n: &str| p.get(&format!("{side}.{n}")).iter().copied().collect::<Vec<f64>>();
        let emb = p.mat(&format!("{side}.emb"));
        let d = emb.ncols();
        let x: Vec<f64> = (0..d).map(|k| emb[[token, k]]).collect();
        let nl = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / x.len() as f64;
            (0..x.len())
                .map(|k| g[k] * (x[k] - mean) / (var + 1e-5).sqrt() + b[k])
                .collect()
        };
        let a = nl(&x, &v("nl1.gamma"), &v("nl1.beta"));
        let w1 = p.mat(&format!("{side}.fw1.w"));
        let b1 = v("fw1.b");
        let h: Vec<f64> = (0..w1.ncols())
            .map(|o| (0..d).fold(b1[o], |acc, k| acc + a[k] * w1[[k, o]]).max(0.0))
            .collect();
        let w2 = p.mat(&format!("{side}.fw2.w"));
        let b2 = v("fw2.b");
        let y: Vec<f64> = (0..d)
            .map(|o| (0..h.len()).fold(b2[o], |acc, k| acc + h[k] * w2[[k, o]]))
            .collect();
        nl(&y, &vec![1.0; d], &vec![0.0; d])
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut model = SeModel::new(6, 4, 5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (_, a) in model.params.iter_mut() {
            a.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        }
        for (side, name) in [(Side::Source, "src"), (Side::Target, "tgt")] {
            let f = model.extract_features(&[3], side).unwrap();
            let want = straight_line_forward(&model.params, name, 3);
            for k in 0..4 {
                assert!((f[[k, 0]] - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn support_vector_matches_compensated_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-4.0..4.0));
        let v = support_vector(&SupportMatrix(m.clone()));
        for j in 0..3 {
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for i in 0..5 {
                let x = m[[i, j]].exp();
                let t = sum + x;
                comp += if sum.abs() >= x.abs() {
                    (sum - t) + x
                } else {
                    (x - t) + sum
                };
                sum = t;
            }
            assert!((v.s[j] - (sum + comp).ln()).abs() < 1e-13);
        }
    }

    #[test]
    fn negative_sampling_matches_renormalized_distribution() {
        let counts = vec![5.0, 1.0, 3.0, 0.0, 2.0, 4.0];
        let dist = UnigramDist::from_counts(counts.clone());
        let target = [0u32, 0, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut seen = vec![0usize; counts.len()];
        for _ in 0..n / target.len() + 1 {
            for t in sample_negative(&target, &dist, &mut rng).unwrap() {
                seen[t as usize] += 1;
            }
        }
        let total: usize = seen.iter().sum();
        assert_eq!(seen[0] + seen[4] + seen[3], 0);
        let allowed = [1usize, 2, 5];
        let mass: f64 = allowed.iter().map(|&i| counts[i]).sum();
        let chi2: f64 = allowed
            .iter()
            .map(|&i| {
                let e = total as f64 * counts[i] / mass;
                (seen[i] as f64 - e).powi(2) / e
            })
            .sum();
        // 2 degrees of freedom; 13.8 is the 0.999 quantile
        assert!(chi2 < 13.8, "chi2 = {chi2}");
    }

    #[test]
    fn zero_weights_reduce_to_margin_gradient() {
        let model = SeModel::new(9, 8, 12, 2);
        let cfg = SeConfig {
            omega_w: 0.0,
            omega_c: 0.0,
            ..Default::default()
        };
        let (src, tgt, neg) = ([1u32, 5, 6], [5u32, 7], [3u32, 4]);
        let mut g = model.params.zeros_like();
        let l = se_loss(&model, &src, &tgt, &neg, &cfg, Some((&mut g, 1.0))).unwrap();
        assert_eq!(l.total, l.margin);
        let f = |p: &ParamSet| {
            let m = SeModel {
                params: p.clone(),
                ..model.clone()
            };
            let pos = m.support(&src, &tgt).unwrap();
            let ng = m.support(&src, &neg).unwrap();
            loss_margin(&pos, &ng)
        };
        assert!(grad_check(f, &model.params, &g, 1e-4) < 1e-3);
    }

    #[test]
    fn single_step_matches_hand_trace() {
        let model = SeModel::new(9, 8, 12, 5);
        let src = [1u32, 5, 6, 4];
        let tgt = [5u32, 7, 2];
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 1,
            epochs: 1,
            seed: 17,
            ..Default::default()
        };
        let se = SeConfig::default();
        let dist = UnigramDist::from_counts(vec![1.0; 9]);
        let one = [SeExample { src: &src, tgt: &tgt }];
        let (trained, _) = train_se_with(&one, &dist, model.clone(), &cfg, &se).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "se-negatives"));
        let neg = sample_negative(&tgt, &dist, &mut rng).unwrap();
        let mut g = model.params.zeros_like();
        se_loss(&model, &src, &tgt, &neg, &se, Some((&mut g, 1.0))).unwrap();
        let norm = g.global_norm();
        let c = if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        for ((name, before), (_, grad)) in model.params.iter().zip(g.iter()) {
            let after = trained.params.get(name);
            for ((&b, &gr), &a) in before.iter().zip(grad.iter()).zip(after.iter()) {
                // first Adam step: m_hat = g, v_hat = g^2
                let gc = c * gr;
                let want = b - cfg.lr * gc / (gc.abs() + cfg.eps);
                assert!((a - want).abs() < 1e-12, "{name}: {a} vs {want}");
            }
        }
    }

    #[test]
    fn training_reduces_loss_deterministically() {
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..12)
            .map(|i| {
                let a = 5 + (i % 6) as u32;
                (vec![a, 4, a + 6], vec![a + 6, a, 17 + (i % 3) as u32])
            })
            .collect();
        let data: Vec<SeExample> = pairs.iter().map(|(s, t)| SeExample { src: s, tgt: t }).collect();
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 4,
            epochs: 15,
            seed: 3,
            ..Default::default()
        };
        let se = SeConfig {
            dim: 8,
            hidden: 16,
            ..Default::default()
        };
        let (a, log_a) = train_se(&data, SeModel::new(20, 8, 16, 1), &cfg, &se).unwrap();
        let (b, log_b) = train_se(&data, SeModel::new(20, 8, 16, 1), &cfg, &se).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert!(log_a.last().unwrap().loss < log_a[0].loss);
    }

    proptest::proptest! {
        #[test]
        fn support_bounds_and_source_permutation(
            vals in proptest::collection::vec(-20.0f64..20.0, 12),
            rot in 0usize..4,
        ) {
            let m = Array2::from_shape_vec((4, 3), vals).unwrap();
            let v = support_vector(&SupportMatrix(m.clone()));
            for (j, col) in m.columns().into_iter().enumerate() {
                let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                proptest::prop_assert!(v.s[j] >= mx);
                proptest::prop_assert!(v.s[j] <= mx + 4f64.ln() + 1e-12);
            }
            let perm = Array2::from_shape_fn((4, 3), |(i, j)| m[[(i + rot) % 4, j]]);
            let w = support_vector(&SupportMatrix(perm));
            for j in 0..3 {
                proptest::prop_assert!((v.s[j] - w.s[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn negatives_never_hit_target(target in proptest::collection::vec(0u32..8, 1..6), seed in 0u64..1000) {
            let dist = UnigramDist::from_counts((1..=10).map(f64::from).collect());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let neg = sample_negative(&target, &dist, &mut rng).unwrap();
            proptest::prop_assert_eq!(neg.len(), target.len());
            proptest::prop_assert!(neg.iter().all(|t| !target.contains(t)));
        }
    }
}
