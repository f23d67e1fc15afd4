use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::NdValue;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]` with `bound = gain * sqrt(3 / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Uniform(f64),
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<NdValue>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let value = match init {
            Init::Zeros => NdValue::zeros(shape),
            Init::Const(c) => NdValue::full(shape, c),
            Init::FanIn { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                NdValue::from_fn(shape, |_| rng.random_range(-bound..=bound))
            }
            Init::Uniform(bound) => NdValue::from_fn(shape, |_| rng.random_range(-bound..=bound)),
        };
        self.insert(name, value)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdValue) -> ParamId {
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &NdValue {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdValue {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[NdValue] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [NdValue] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(NdValue::len).sum()
    }
}
