//! Named parameter storage and initialisation.

use std::collections::HashSet;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "set_param",
                format!(
                    "{}: expected {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Bound<T> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Wraps every parameter as a constant, for inference.
    pub fn constants(&self) -> Bound<T> {
        Bound {
            vars: self.values.iter().cloned().map(Var::constant).collect(),
        }
    }
}

/// Parameters as graph values, addressed by [`ParamId`].
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T> Bound<T> {
    /// Wraps graph values listed in [`ParamId`] order.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

impl<T> Index<ParamId> for Bound<T> {
    type Output = Var<T>;

    fn index(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

/// Checks that `ids` lists every parameter of `store` exactly once.
pub fn check_unique(store_len: usize, ids: &[ParamId]) -> std::result::Result<(), String> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(*id) {
            return Err(format!("parameter {} referenced twice", id.0));
        }
    }
    if seen.len() != store_len {
        return Err(format!("{} of {store_len} parameters referenced", seen.len()));
    }
    Ok(())
}

/// Scoped parameter builder that draws initial values from one RNG stream.
pub struct Init<'a, R: Rng> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder whose names are prefixed by `scope.`.
    pub fn scope(&mut self, scope: &str) -> Init<'_, R> {
        let prefix = if self.prefix.is_empty() {
            scope.to_string()
        } else {
            format!("{}.{scope}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn add(&mut self, leaf: &str, value: Tensor<f32>) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, value)
    }

    /// Convolution kernel `[out, in/groups, k, k, k]` with He-normal fan-in
    /// scaling.
    pub fn conv_weight(&mut self, leaf: &str, shape: [usize; 5]) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3] * shape[4]).max(1);
        let t = Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), self.rng);
        self.add(leaf, t)
    }

    /// Transposed-convolution kernel `[in, out, 2, 2, 2]`; the fan-in of an
    /// output voxel is `in` (each output sees one tap per input channel).
    pub fn conv_transpose_weight(&mut self, leaf: &str, shape: [usize; 5]) -> ParamId {
        let fan_in = shape[0].max(1);
        let t = Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), self.rng);
        self.add(leaf, t)
    }

    /// Normal with std 0.02 truncated to two standard deviations.
    pub fn trunc_normal(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        const STD: f64 = 0.02;
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break (z * STD) as f32;
            }
        });
        self.add(leaf, t)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        self.add(leaf, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        self.add(leaf, Tensor::ones(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scoped_names_and_lookup() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let a = init.scope("enc0").scope("dacb1").zeros("bias", &[3]);
        let b = init.trunc_normal("pos", &[2, 2]);
        assert_eq!(store.name(a), "enc0.dacb1.bias");
        assert_eq!(store.find("pos"), Some(b));
        assert_eq!(store.numel(), 7);
        assert!(store.get(b).data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn uniqueness_scan() {
        let ids = [ParamId(0), ParamId(2), ParamId(1)];
        assert!(check_unique(3, &ids).is_ok());
        assert!(check_unique(3, &[ParamId(0), ParamId(0), ParamId(1)]).is_err());
        assert!(check_unique(4, &ids).is_err());
    }
}
