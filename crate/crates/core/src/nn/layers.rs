//! Row-major dense layers: each row of an input matrix is one sequence
//! position. Backward functions accumulate parameter gradients into a
//! [`ParamSet`] with the same layout and return the input gradient.

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::ParamSet;

/// Normalization constant inside the square root.
pub const NORM_EPS: f64 = 1e-5;

/// `x W + b` with `W` stored `in x out` under `{name}.w` and `b` under `{name}.b`.
pub fn linear(p: &ParamSet, name: &str, x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(&p.mat(&format!("{name}.w")));
    y += &p.vector(&format!("{name}.b"));
    y
}

pub fn linear_backward(p: &ParamSet, g: &mut ParamSet, name: &str, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let w = format!("{name}.w");
    let b = format!("{name}.b");
    g.mat_mut(&w).scaled_add(1.0, &x.t().dot(dy));
    g.vector_mut(&b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    dy.dot(&p.mat(&w).t())
}

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Per-row `(x - mean) / sqrt(var + eps)` (population variance).
pub fn normalize(x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *is = 1.0 / (var + NORM_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| (v - mean) * s);
    }
    (xhat.clone(), NormCache { xhat, inv_std })
}

/// Gradient of [`normalize`] given the upstream gradient of its output.
pub fn normalize_backward(cache: &NormCache, dy: &Array2<f64>) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = dy.clone();
    for ((mut row, xh), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|v, &xv| *v = is * (*v - mean_d - xv * mean_dx));
    }
    dx
}

/// Per-row `gamma * (x - mean) / sqrt(var + eps) + beta` (population variance).
pub fn norm(p: &ParamSet, name: &str, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let gamma = p.vector(&format!("{name}.gamma"));
    let beta = p.vector(&format!("{name}.beta"));
    let (xhat, cache) = normalize(x);
    let mut y = xhat * gamma;
    y += &beta;
    (y, cache)
}

pub fn norm_backward(p: &ParamSet, g: &mut ParamSet, name: &str, cache: &NormCache, dy: &Array2<f64>) -> Array2<f64> {
    let gname = format!("{name}.gamma");
    let gamma = p.vector(&gname);
    g.vector_mut(&gname)
        .scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
    g.vector_mut(&format!("{name}.beta"))
        .scaled_add(1.0, &dy.sum_axis(Axis(0)));
    normalize_backward(cache, &(dy * &gamma))
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &x| {
        if x <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[derive(Clone, Debug)]
pub struct AttnCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention weights, `queries x keys`.
    pub probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

/// Multi-head scaled dot-product attention with projections `{name}.q`,
/// `{name}.k`, `{name}.v`, `{name}.o`. With `causal`, query `i` sees keys `<= i`.
pub fn attention(
    p: &ParamSet,
    name: &str,
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    heads: usize,
    causal: bool,
) -> (Array2<f64>, AttnCache) {
    let q = linear(p, &format!("{name}.q"), xq);
    let k = linear(p, &format!("{name}.k"), xkv);
    let v = linear(p, &format!("{name}.v"), xkv);
    let d = q.ncols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx = Array2::zeros((xq.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc *= scale;
        if causal {
            for ((i, j), val) in sc.indexed_iter_mut() {
                if j > i {
                    *val = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows(&mut sc);
        ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    let out = linear(p, &format!("{name}.o"), &ctx);
    (
        out,
        AttnCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Returns gradients with respect to the query input and the key/value input.
pub fn attention_backward(
    p: &ParamSet,
    g: &mut ParamSet,
    name: &str,
    cache: &AttnCache,
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let heads = cache.probs.len();
    let dctx = linear_backward(p, g, &format!("{name}.o"), &cache.ctx, dout);
    let d = cache.q.ncols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dkm = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, pr) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dk..(h + 1) * dk];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&pr.t().dot(&dctx_h));
        let mut ds = &dp * pr;
        let row_dot = ds.sum_axis(Axis(1));
        for ((mut dsr, pr_row), rd) in ds.rows_mut().into_iter().zip(pr.rows()).zip(row_dot.iter()) {
            Zip::from(&mut dsr).and(&pr_row).for_each(|x, &pv| *x -= pv * rd);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dkm.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let dxq = linear_backward(p, g, &format!("{name}.q"), &cache.xq, &dq);
    let mut dxkv = linear_backward(p, g, &format!("{name}.k"), &cache.xkv, &dkm);
    dxkv += &linear_backward(p, g, &format!("{name}.v"), &cache.xkv, &dv);
    (dxq, dxkv)
}
