use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ParamSet;

/// Optimizer and loop settings shared by both trainable models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Set by the caller; not read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    /// Global-norm clipping threshold; must be positive.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    // Negated comparisons so that NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Mean training loss of one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: ParamSet,
    v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One Adam update with bias correction, after clipping `grads` to the
/// configured global norm. Increments the step counter.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::DimensionMismatch("gradients do not match parameters".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name.to_owned()));
    }
    let norm = grads.global_norm();
    let clip = if norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    let t = params.step() + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let iter = params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in iter {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            let g = g * clip;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        });
    }
    params.set_step(t);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Init, ParamSpec};

    fn scalar(v: f64) -> ParamSet {
        let mut p = init_params(&[ParamSpec::new("x", &[1], Init::Zeros)], 0);
        p.vector_mut("x")[0] = v;
        p
    }

    #[test]
    fn zero_gradient_only_advances_step() {
        let mut p = init_params(&[ParamSpec::new("w", &[2, 3], Init::ScaledUniform)], 4);
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(p.step(), 1);
        assert_eq!(p.get("w"), before.get("w"));
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = TrainConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Default::default()
        };
        let mut p = scalar(1.0);
        let g = scalar(0.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        // m = 0.05, v = 0.00025; m_hat = 0.5, v_hat = 0.25.
        let expected = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((p.vector("x")[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_clipped_to_global_norm() {
        let cfg = TrainConfig {
            lr: 0.1,
            clip_norm: 1.0,
            ..Default::default()
        };
        let (mut a, mut b) = (scalar(0.0), scalar(0.0));
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        // Second step differs once the first gradient was rescaled.
        for g in [10.0, 1.0] {
            adam_step(&mut a, &scalar(g), &mut sa, &cfg).unwrap();
        }
        for g in [1.0, 1.0] {
            adam_step(&mut b, &scalar(g), &mut sb, &cfg).unwrap();
        }
        assert!((a.vector("x")[0] - b.vector("x")[0]).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradient_and_zero_clip() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &scalar(f64::NAN), &mut st, &TrainConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteGradient(_))));
        let cfg = TrainConfig {
            clip_norm: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            adam_step(&mut p, &scalar(1.0), &mut st, &cfg),
            Err(Error::InvalidConfig(_))
        ));
        assert_eq!(p.step(), 0);
    }

    #[test]
    fn deterministic_given_inputs() {
        let p0 = init_params(&[ParamSpec::new("w", &[4, 4], Init::ScaledUniform)], 1);
        let g = init_params(&[ParamSpec::new("w", &[4, 4], Init::ScaledUniform)], 2);
        let run = || {
            let mut p = p0.clone();
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &g, &mut st, &TrainConfig::default()).unwrap();
            p
        };
        assert_eq!(run(), run());
    }
}
