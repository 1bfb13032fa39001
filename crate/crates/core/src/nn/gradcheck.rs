use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamSet;

const MAX_COORDS: usize = 200;

/// Largest relative error `|a - f| / max(|a|, |f|, 1e-8)` between `analytic`
/// and central finite differences of `loss` with step `h`, over at most 200
/// coordinates (all of them when the set is small, otherwise a fixed sample).
pub fn grad_check<F>(mut loss: F, params: &ParamSet, analytic: &ParamSet, h: f64) -> f64
where
    F: FnMut(&ParamSet) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert!(
        params.same_layout(analytic),
        "analytic gradient layout differs from params"
    );
    let n = params.num_scalars();
    let coords: Vec<usize> = if n <= MAX_COORDS {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let mut c = rand::seq::index::sample(&mut rng, n, MAX_COORDS).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        let x = params.coord(i);
        probe.set_coord(i, x + h);
        let up = loss(&probe);
        probe.set_coord(i, x - h);
        let down = loss(&probe);
        probe.set_coord(i, x);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.coord(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}
