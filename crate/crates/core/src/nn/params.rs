use std::collections::HashMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How a parameter array starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))` for
    /// matrices and `sqrt(3 / n)` for vectors.
    ScaledUniform,
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Named real arrays with fixed shapes plus an optimizer step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            arrays: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    /// Adds an array. Panics on a duplicate name.
    pub fn insert(&mut self, name: &str, array: ArrayD<f64>) {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        self.index.insert(name.to_owned(), self.arrays.len());
        self.names.push(name.to_owned());
        self.arrays.push(array);
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn slot(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.arrays[self.slot(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = self.slot(name);
        &mut self.arrays[i]
    }

    pub fn mat(&self, name: &str) -> ArrayView2<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matrix parameter")
    }

    pub fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("vector parameter")
    }

    pub fn mat_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        self.get_mut(name)
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("matrix parameter")
    }

    pub fn vector_mut(&mut self, name: &str) -> ArrayViewMut1<'_, f64> {
        self.get_mut(name)
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("vector parameter")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Same names and shapes, all zeros, step 0.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, a) in self.iter() {
            out.insert(n, ArrayD::zeros(a.raw_dim()));
        }
        out
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Flat coordinate access across all arrays, in insertion order.
    pub fn coord(&self, mut i: usize) -> f64 {
        for a in &self.arrays {
            if i < a.len() {
                return a.as_slice_memory_order().expect("contiguous")[i];
            }
            i -= a.len();
        }
        panic!("coordinate out of range")
    }

    pub fn set_coord(&mut self, mut i: usize, v: f64) {
        for a in &mut self.arrays {
            if i < a.len() {
                a.as_slice_memory_order_mut().expect("contiguous")[i] = v;
                return;
            }
            i -= a.len();
        }
        panic!("coordinate out of range")
    }

    pub fn global_norm(&self) -> f64 {
        self.arrays
            .iter()
            .flat_map(|a| a.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// First array holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter()
            .find(|(_, a)| a.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    /// `self += scale * other`. Layouts must match.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.arrays {
            a.mapv_inplace(|x| x * s);
        }
    }

    pub fn fill_zero(&mut self) {
        for a in &mut self.arrays {
            a.fill(0.0);
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Creates every array in `spec` order from one seeded stream.
pub fn init_params(spec: &[ParamSpec], seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamSet::new();
    for p in spec {
        assert!(
            p.shape.iter().all(|&d| d > 0),
            "parameter `{}` has an empty dimension",
            p.name
        );
        let shape = IxDyn(&p.shape);
        let arr = match p.init {
            Init::Ones => ArrayD::ones(shape),
            Init::Zeros => ArrayD::zeros(shape),
            Init::Uniform(a) => ArrayD::from_shape_simple_fn(shape, || rng.gen_range(-a..=a)),
            Init::ScaledUniform => {
                let a = match p.shape.as_slice() {
                    [n] => (3.0 / *n as f64).sqrt(),
                    [fan_in, fan_out, ..] => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                    [] => 1.0,
                };
                ArrayD::from_shape_simple_fn(shape, || rng.gen_range(-a..=a))
            }
        };
        out.insert(&p.name, arr);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("w", &[3, 4], Init::ScaledUniform),
            ParamSpec::new("ln.gamma", &[4], Init::Ones),
            ParamSpec::new("ln.beta", &[4], Init::Zeros),
        ]
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(init_params(&spec(), 7), init_params(&spec(), 7));
        assert_ne!(init_params(&spec(), 7), init_params(&spec(), 8));
    }

    #[test]
    fn norm_layer_starts_at_identity() {
        let p = init_params(&spec(), 1);
        assert!(p.vector("ln.gamma").iter().all(|&g| g == 1.0));
        assert!(p.vector("ln.beta").iter().all(|&b| b == 0.0));
        let a = (6.0f64 / 7.0).sqrt();
        assert!(p.mat("w").iter().all(|x| x.abs() <= a));
    }

    #[test]
    fn empty_spec_gives_empty_set() {
        let p = init_params(&[], 3);
        assert!(p.is_empty());
        assert_eq!(p.num_scalars(), 0);
    }

    #[test]
    fn flat_coordinates_span_arrays() {
        let mut p = init_params(&spec(), 1);
        assert_eq!(p.num_scalars(), 20);
        p.set_coord(12, 5.0);
        assert_eq!(p.vector("ln.gamma")[0], 5.0);
        assert_eq!(p.coord(12), 5.0);
    }
}
