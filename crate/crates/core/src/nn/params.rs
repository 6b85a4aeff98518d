use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `N(0, 2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    /// Normal with standard deviation `std`, resampled outside `±2·std`.
    TruncatedNormal { std: f64 },
}

impl Init {
    fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingNormal { fan_in } => {
                let d = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("valid std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::TruncatedNormal { std } => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = d.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    /// Registers a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Registers a freshly initialised tensor. Values are drawn in 64-bit and
    /// rounded so that 32- and 64-bit stores built from one seed agree.
    pub fn init<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let n = shape.iter().product();
        let data = init.sample(n, rng).into_iter().map(|v| T::from_f64_lossy(v as f32 as f64)).collect();
        self.insert(name, Tensor::new(shape, data).expect("init shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect(), lookup: self.lookup.clone() }
    }

    /// Replaces every value from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load(&mut self, entries: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in entries {
            let Some(&i) = self.lookup.get(&name) else {
                return Err(Error::Format(format!("unexpected parameter {name}")));
            };
            if t.shape() != self.values[i].shape() {
                return Err(Error::Format(format!("parameter {name}: shape {:?}, expected {:?}", t.shape(), self.values[i].shape())));
            }
            self.values[i] = t;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing parameter {}", self.names[i])));
        }
        Ok(())
    }
}

/// Binds a parameter store to a tape for one forward pass.
///
/// Parameters become tape leaves on first use; with `trainable = false` they
/// enter as constants and receive no gradient.
pub struct Session<'t, T> {
    tape: &'t Tape<T>,
    params: &'t ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
    trainable: bool,
}

impl<'t, T: Real> Session<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &'t ParamStore<T>, trainable: bool) -> Self {
        Self { tape, params, vars: RefCell::new(vec![None; params.len()]), trainable }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn params(&self) -> &'t ParamStore<T> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.tape.leaf(self.params.get(id).clone(), self.trainable))
    }

    pub fn input(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    /// Gradients for every parameter, zero where the loss did not reach it.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        let vars = self.vars.borrow();
        self.params
            .ids()
            .map(|id| match vars[id.0] {
                Some(v) => grads.get_or_zero(v),
                None => Tensor::zeros(self.params.get(id).shape()),
            })
            .collect()
    }
}
