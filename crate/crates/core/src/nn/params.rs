use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormConfig, Gradients, Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(pub(crate) usize);

/// Registry of every trainable tensor and every batch-norm running state.
///
/// Names are unique; each tensor is registered exactly once.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<(String, Tensor<T>)>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    fn check_unique(&self, name: &str) {
        assert!(
            !self.params.iter().any(|(n, _)| n == name)
                && !self.stats.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        self.check_unique(&name);
        self.params.push((name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        let name = name.into();
        self.check_unique(&name);
        self.stats.push((name, RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn stats_ids(&self) -> impl Iterator<Item = StatsId> {
        (0..self.stats.len()).map(StatsId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.1.shape() != value.shape() {
            return Err(Error::shape("set parameter", slot.1.shape(), value.shape()));
        }
        slot.1 = value;
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0].1
    }

    pub fn stats_name(&self, id: StatsId) -> &str {
        &self.stats[id.0].0
    }

    pub fn set_stats(&mut self, id: StatsId, value: RunningStats<T>) -> Result<()> {
        let slot = &mut self.stats[id.0];
        if slot.1.channels() != value.channels() {
            return Err(Error::shape(
                "set running stats",
                &[slot.1.channels()],
                &[value.channels()],
            ));
        }
        slot.1 = value;
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same registry in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        RunningStats {
                            mean: s.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                            var: s.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Registers parameters under hierarchical names while a model is built.
pub struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    scope: Vec<String>,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.to_string());
        let r = f(self);
        self.scope.pop();
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut full = self.scope.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        full
    }

    pub fn constant(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full_name(name);
        self.store.add_param(full, value)
    }

    /// Uniform He-style initialization, bound `sqrt(6 / fan_in)`.
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        let t = Tensor::new(shape, data).expect("initializer shape is valid");
        self.constant(name, t)
    }

    pub fn stats(&mut self, name: &str, channels: usize) -> StatsId {
        let full = self.full_name(name);
        self.store.add_stats(full, channels)
    }
}

/// State of one forward evaluation: the tape, the parameters it reads, and
/// what it produced besides the output (batch-norm statistic updates and
/// block-application counters).
///
/// Parameters are only read; running-statistic updates are collected and
/// applied by the caller, so evaluation never mutates the model.
pub struct Forward<'a, T: Scalar> {
    pub graph: &'a Graph<T>,
    store: &'a ParamStore<T>,
    training: bool,
    differentiable: bool,
    vars: RefCell<Vec<Option<Var>>>,
    stat_updates: RefCell<Vec<(StatsId, RunningStats<T>)>>,
    counters: RefCell<BTreeMap<&'static str, usize>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// Training-mode evaluation whose parameters receive gradients.
    pub fn train(graph: &'a Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self::new(graph, store, true, true)
    }

    /// Evaluation-mode pass with frozen parameters.
    pub fn eval(graph: &'a Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self::new(graph, store, false, false)
    }

    pub fn new(
        graph: &'a Graph<T>,
        store: &'a ParamStore<T>,
        training: bool,
        differentiable: bool,
    ) -> Self {
        Self {
            graph,
            store,
            training,
            differentiable,
            vars: RefCell::new(vec![None; store.len()]),
            stat_updates: RefCell::new(Vec::new()),
            counters: RefCell::new(BTreeMap::new()),
        }
    }

    /// Evaluation whose parameters are the given tape variables, in
    /// registration order; used to differentiate with respect to weights
    /// supplied from outside.
    pub fn bound(
        graph: &'a Graph<T>,
        store: &'a ParamStore<T>,
        training: bool,
        vars: &[Var],
    ) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::invalid(format!(
                "{} variables bound to {} parameters",
                vars.len(),
                store.len()
            )));
        }
        for (i, &v) in vars.iter().enumerate() {
            let want = store.get(ParamId(i)).shape();
            if graph.shape(v) != want {
                return Err(Error::shape("bound parameter", &graph.shape(v), want));
            }
        }
        let f = Self::new(graph, store, training, true);
        *f.vars.borrow_mut() = vars.iter().copied().map(Some).collect();
        Ok(f)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape handle of a parameter; recorded on first use.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.differentiable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    pub(crate) fn batch_norm(
        &self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        stats: StatsId,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        let (out, updated) =
            self.graph
                .batch_norm(x, g, b, self.store.stats(stats), self.training, cfg)?;
        if let Some(updated) = updated {
            self.stat_updates.borrow_mut().push((stats, updated));
        }
        Ok(out)
    }

    pub fn count(&self, key: &'static str) {
        *self.counters.borrow_mut().entry(key).or_default() += 1;
    }

    pub fn counter(&self, key: &str) -> usize {
        self.counters.borrow().get(key).copied().unwrap_or(0)
    }

    pub fn counters(&self) -> BTreeMap<&'static str, usize> {
        self.counters.borrow().clone()
    }

    /// Gradient per parameter after `graph.backward`, for parameters that
    /// took part in the pass.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let g = grads.get((*v)?)?;
                Some((ParamId(i), g.clone()))
            })
            .collect()
    }

    pub fn take_stat_updates(&self) -> Vec<(StatsId, RunningStats<T>)> {
        std::mem::take(&mut *self.stat_updates.borrow_mut())
    }
}
