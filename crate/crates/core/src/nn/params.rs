use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Scalar;

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

/// Flat, ordered collection of named trainable tensors. Registration order is
/// the serialization order of checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(
            value.len(),
            shape.iter().product::<usize>(),
            "parameter {name}: value length does not match shape"
        );
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, shape, value });
        ParamId(self.params.len() - 1)
    }

    /// Xavier/Glorot-normal weights for a `[out, in, k, k]` convolution kernel.
    pub fn add_xavier_conv<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> ParamId {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let fan_out = (out_ch * kernel * kernel) as f64;
        let std = (2.0 / (fan_in + fan_out)).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = out_ch * in_ch * kernel * kernel;
        let value = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
        self.add(name, vec![out_ch, in_ch, kernel, kernel], value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::zero(); n])
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Gradient accumulator laid out parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    values: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads {
            values: store.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<T>> {
        self.values.iter()
    }

    pub fn zero(&mut self) {
        for v in &mut self.values {
            v.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|g| g.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_std_matches_glorot_formula() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let id = store.add_xavier_conv("w", 64, 64, 3, &mut rng);
        let v = store.value(id);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        let expect = 2.0 / (64.0 * 9.0 * 2.0);
        assert!((var / expect - 1.0).abs() < 0.05, "var {var} vs {expect}");
        assert!(mean.abs() < 0.01);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add_zeros("b", vec![2]);
        store.add_zeros("b", vec![2]);
    }
}
