//! Named parameter storage, running statistics, and the per-forward session
//! that binds parameters onto a fresh graph.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::TensorError;
use crate::tensor::{Adam, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Uniform on `[-b, b]`.
    Uniform(f64),
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

/// Batch-norm running mean/variance for one normalization site.
#[derive(Clone, Debug)]
pub struct RunningStat<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    stats: Vec<RunningStat<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), stats: Vec::new() }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[RunningStat<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStat<T>] {
        &mut self.stats
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn stat(&self, id: StatId) -> &RunningStat<T> {
        &self.stats[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Flattened parameter values in store order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// One Adam update over every parameter; all must carry a gradient.
    /// Gradients are cleared afterwards.
    pub fn adam_step(&mut self, adam: &mut Adam<T>) -> Result<(), TensorError> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        adam.step(self.params.iter_mut().map(|p| {
            let g: &[T] = p.grad.as_deref().unwrap();
            (p.value.data_mut(), g)
        }))?;
        self.zero_grads();
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Same store in another precision (values rounded through f64).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: None })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStat {
                    name: s.name.clone(),
                    mean: s.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Registers parameters under a dotted name prefix with deterministic
/// initialization.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_, T> {
        let prefix = self.path(&name.to_string());
        ParamBuilder { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).unwrap();
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(self.rng);
                        if v.abs() <= 2.0 * std {
                            break T::of(v);
                        }
                    })
                    .collect()
            }
            Init::Uniform(b) => (0..n).map(|_| T::of(self.rng.random_range(-b..=b))).collect(),
        };
        let name = self.path(name);
        debug_assert!(self.store.find(&name).is_none(), "duplicate parameter {name}");
        self.store.params.push(Param { name, value: Tensor::new(shape, data).expect("parameter shape"), grad: None });
        ParamId(self.store.params.len() - 1)
    }

    pub fn running_stat(&mut self, name: &str, channels: usize) -> StatId {
        let name = self.path(name);
        self.store.stats.push(RunningStat { name, mean: vec![T::zero(); channels], var: vec![T::one(); channels] });
        StatId(self.store.stats.len() - 1)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.3;
pub const NORM_EPS: f64 = 1e-5;

/// Key for cached gather-index tables (im2col, window layouts, permutations).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum IndexKey {
    Permute(Vec<usize>, Vec<usize>),
    Im2Col2d { n: usize, h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize },
    Im2Col3d { n: usize, d: usize, h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize },
    Unpatch3d { n: usize, d: usize, h: usize, w: usize, c: usize },
    Custom(&'static str, Vec<usize>),
}

/// Gather-index tables shared between sessions over the same shapes.
#[derive(Clone, Default)]
pub struct IndexCache(Rc<RefCell<HashMap<IndexKey, Rc<[u32]>>>>);

impl IndexCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) struct StatUpdate<T> {
    id: StatId,
    mean: Vec<T>,
    var: Vec<T>,
    rows: usize,
}

/// One forward pass: a fresh graph plus lazily bound parameter leaves.
pub struct Session<'m, T> {
    pub g: Graph<T>,
    store: &'m ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    updates: Vec<StatUpdate<T>>,
    indices: IndexCache,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn new(store: &'m ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Self::with_cache(store, mode, track_grads, IndexCache::new())
    }

    pub fn with_cache(store: &'m ParamStore<T>, mode: Mode, track_grads: bool, indices: IndexCache) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: vec![None; store.params.len()],
            mode,
            track_grads,
            updates: Vec::new(),
            indices,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph leaf for a parameter (bound once per session).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.params[id.0].value.clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    pub fn index(&mut self, key: IndexKey, build: impl FnOnce() -> Vec<u32>) -> Rc<[u32]> {
        if let Some(v) = self.indices.0.borrow().get(&key) {
            return v.clone();
        }
        let v: Rc<[u32]> = build().into();
        self.indices.0.borrow_mut().insert(key, v.clone());
        v
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.g.shape(x).to_vec();
        let key = IndexKey::Permute(shape.clone(), perm.to_vec());
        let cached = self.indices.0.borrow().get(&key).cloned();
        let idx = match cached {
            Some(v) => v,
            None => {
                let v: Rc<[u32]> = crate::tensor::permute_index(&shape, perm)?.into();
                self.indices.0.borrow_mut().insert(key, v.clone());
                v
            }
        };
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.g.gather(x, idx, &out)
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stat: StatId) -> Result<Var, TensorError> {
        let (gv, bv) = (self.p(gamma), self.p(beta));
        let eps = T::of(NORM_EPS);
        match self.mode {
            Mode::Train => {
                let rows = {
                    let s = self.g.shape(x);
                    s[..s.len() - 1].iter().product()
                };
                let (y, mean, var) = self.g.batch_norm_train(x, gv, bv, eps)?;
                self.updates.push(StatUpdate { id: stat, mean, var, rows });
                Ok(y)
            }
            Mode::Eval => {
                let st = &self.store.stats[stat.0];
                self.g.batch_norm_eval(x, gv, bv, &st.mean, &st.var, eps)
            }
        }
    }

    /// Ends the forward pass, releasing the borrow of the store.
    pub fn into_tape(self) -> Tape<T> {
        Tape { g: self.g, bound: self.bound, updates: self.updates }
    }
}

/// A finished forward pass: graph, parameter bindings and pending batch-norm
/// statistics.
pub struct Tape<T> {
    pub g: Graph<T>,
    bound: Vec<Option<Var>>,
    updates: Vec<StatUpdate<T>>,
}

impl<T: Real> Tape<T> {
    /// Graph leaf bound to a parameter, if the forward pass used it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound.get(id.0).copied().flatten()
    }

    /// Backward from `loss`, accumulating gradients into the store. Returns
    /// the names of parameters that received no gradient (their gradient is
    /// set to zeros).
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Vec<String>, TensorError> {
        let mut grads = self.g.backward(loss)?;
        let mut disconnected = Vec::new();
        for (i, param) in store.params.iter_mut().enumerate() {
            let b = self.bound.get(i).copied().flatten();
            match b.and_then(|v| grads.take(v)) {
                Some(g) => match &mut param.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x),
                    None => param.grad = Some(g),
                },
                None => {
                    disconnected.push(param.name.clone());
                    if param.grad.is_none() {
                        param.grad = Some(vec![T::zero(); param.value.len()]);
                    }
                }
            }
        }
        Ok(disconnected)
    }

    /// Applies recorded batch statistics to the running estimates
    /// (momentum [`BN_MOMENTUM`], unbiased variance).
    pub fn commit_stats(&mut self, store: &mut ParamStore<T>) {
        let m = T::of(BN_MOMENTUM);
        for u in self.updates.drain(..) {
            let st = &mut store.stats[u.id.0];
            let unbias = if u.rows > 1 { T::of(u.rows as f64 / (u.rows as f64 - 1.0)) } else { T::one() };
            for j in 0..st.mean.len() {
                st.mean[j] = (T::one() - m) * st.mean[j] + m * u.mean[j];
                st.var[j] = (T::one() - m) * st.var[j] + m * u.var[j] * unbias;
            }
        }
    }
}

/// Deterministic generator for a named stream.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
