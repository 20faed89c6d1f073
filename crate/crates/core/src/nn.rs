//! Named parameter storage, initialisation and optimisers.

use crate::math;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{param_err, shape_err};
use crate::rng;
use crate::{Result, Tensor};

/// An ordered set of named parameter tensors.
///
/// Insertion order is preserved, so serialisation and optimiser state line
/// up deterministically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(param_err!("duplicate parameter {name}"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Checks that `name` exists with exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<()> {
        match self.get(name) {
            None => Err(param_err!("missing parameter {name}")),
            Some(t) if t.shape() != shape => Err(shape_err!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )),
            Some(_) => Ok(()),
        }
    }

    /// Rounds every value to the nearest `f32`, the precision of the
    /// checkpoint format, so in-memory and reloaded models agree exactly.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Copies all entries under `prefix` into a new store with the prefix stripped.
    pub fn with_prefix_stripped(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone()).expect("names unique");
            }
        }
        out
    }

    /// Appends all entries of `other`, each name prefixed.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            let mut full = prefix.to_string();
            full.push_str(name);
            self.insert(full, t.clone())?;
        }
        Ok(())
    }

    /// Registers every parameter on `tape` as a differentiable input.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.param(t)).collect();
        Bound { store: self, vars }
    }
}

/// The tape handles of a bound [`ParamStore`].
pub struct Bound<'s> {
    store: &'s ParamStore,
    vars: Vec<Var>,
}

impl<'s> Bound<'s> {
    /// Binds `vars` (one per parameter, in store order) to the names of `store`.
    pub(crate) fn from_vars(store: &'s ParamStore, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), store.len());
        Self { store, vars }
    }

    /// Handle of the named parameter. Panics if it does not exist; models
    /// validate their stores on construction.
    pub fn var(&self, name: &str) -> Var {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unbound parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter, in store order (zeros where the output
    /// does not depend on a parameter).
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&self.store.tensors)
            .map(|(&v, t)| grads.take_or_zeros(v, t))
            .collect()
    }
}

/// Normal initialisation with standard deviation `gain / sqrt(fan_in)`.
pub fn init_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain / math::sqrt(fan_in as f64);
    let n = shape.iter().product();
    let data = rng::normal_vec(rng, n).into_iter().map(|v| v * std).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Plain gradient descent without momentum.
    Sgd,
    Adam,
}

/// First-order optimiser over a whole [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.tensors.len(), "one gradient per parameter");
        if self.lr == 0.0 {
            // a null step must not even flip the sign of a negative zero
            return;
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in store.tensors.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
                    self.v = self.m.clone();
                }
                self.steps += 1;
                let bc1 = 1.0 - math::powi(self.beta1, self.steps);
                let bc2 = 1.0 - math::powi(self.beta2, self.steps);
                for ((p, g), (m, v)) in store
                    .tensors
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for (i, &gv) in g.data().iter().enumerate() {
                        md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gv;
                        vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gv * gv;
                        let mhat = md[i] / bc1;
                        let vhat = vd[i] / bc2;
                        pd[i] -= self.lr * mhat / (math::sqrt(vhat) + self.eps);
                    }
                }
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = math::sqrt(
        grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>(),
    );
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}


/// Loop hyperparameters shared by every trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling, if any.
    pub grad_clip: Option<f64>,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(param_err!("epochs and batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(param_err!("learning rate must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A failed training run. When the loss diverged, `last_finite` holds the
/// parameters from before the offending step.
#[derive(Debug, Clone)]
pub struct TrainError {
    pub error: crate::Error,
    pub last_finite: Option<ParamStore>,
}

impl TrainError {
    pub fn new(error: crate::Error, last_finite: Option<ParamStore>) -> Self {
        Self { error, last_finite }
    }

    pub fn diverged(step: usize, last_finite: ParamStore) -> Self {
        Self {
            error: crate::Error::Training {
                step,
                reason: "non-finite loss or parameters".to_string(),
            },
            last_finite: Some(last_finite),
        }
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        self.error.fmt(f)
    }
}

impl core::error::Error for TrainError {}

impl From<TrainError> for crate::Error {
    fn from(e: TrainError) -> Self {
        e.error
    }
}
