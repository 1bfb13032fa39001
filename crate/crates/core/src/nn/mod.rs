//! Numerical substrate shared by the estimator and the generator: parameter
//! containers, initialization, Adam, finite-difference gradient checks,
//! checkpoints and the dense layers with their hand-written backward passes.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod optim;
mod params;

pub use checkpoint::Checkpoint;
pub use gradcheck::grad_check;
pub use optim::{adam_step, AdamState, EpochLoss, TrainConfig};
pub use params::{init_params, Init, ParamSet, ParamSpec};

/// `log(sum(exp(xs)))` with max-shift.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`, finite for every finite `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
