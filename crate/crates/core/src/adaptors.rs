//! Ways of feeding target-token supportiveness into generator training.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptorChoice {
    /// Plain likelihood training.
    #[default]
    None,
    /// Drop target tokens at random according to their supportiveness.
    Hard,
    /// Weight each token's loss by its supportiveness.
    Soft,
    /// Weight each token's loss by the generator's own peak attention.
    Attention,
}

impl AdaptorChoice {
    pub fn needs_estimator(self) -> bool {
        matches!(self, AdaptorChoice::Hard | AdaptorChoice::Soft)
    }

    pub fn name(self) -> &'static str {
        match self {
            AdaptorChoice::None => "none",
            AdaptorChoice::Hard => "hard",
            AdaptorChoice::Soft => "soft",
            AdaptorChoice::Attention => "attention",
        }
    }
}

impl std::str::FromStr for AdaptorChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdaptorChoice::None),
            "hard" => Ok(AdaptorChoice::Hard),
            "soft" => Ok(AdaptorChoice::Soft),
            "attention" => Ok(AdaptorChoice::Attention),
            _ => Err(Error::InvalidConfig(format!("unknown adaptor `{s}`"))),
        }
    }
}

/// Keeps token `i` iff `r_i <= sigma[i]` for a fresh `r_i ~ U[0, 1]`.
pub fn hard_adapt<R: Rng>(target: &[u32], sigma: &[f64], rng: &mut R) -> Result<Vec<u32>> {
    if target.len() != sigma.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            actual: sigma.len(),
        });
    }
    Ok(target
        .iter()
        .zip(sigma)
        .filter(|&(_, &s)| rng.gen::<f64>() <= s)
        .map(|(&t, _)| t)
        .collect())
}

/// `sum_i nll[i] * sigma[i]`.
pub fn soft_adapt(nll: &[f64], sigma: &[f64]) -> Result<f64> {
    if nll.len() != sigma.len() {
        return Err(Error::LengthMismatch {
            expected: nll.len(),
            actual: sigma.len(),
        });
    }
    Ok(nll.iter().zip(sigma).map(|(l, s)| l * s).sum())
}

/// Per target position, the largest attention weight over heads and source positions.
/// Each head's matrix is `|T| x |K'|`.
pub fn attention_supportiveness(attention: &[Array2<f64>]) -> Vec<f64> {
    let Some(first) = attention.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0f64; first.nrows()];
    for head in attention {
        for (o, row) in out.iter_mut().zip(head.rows()) {
            *o = row.iter().fold(*o, |m, &v| m.max(v));
        }
    }
    out
}
