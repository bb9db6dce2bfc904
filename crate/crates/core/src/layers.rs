//! Parameter storage and the basic layers shared by every network part.
//!
//! Parameters live in a flat [`ParamStore`] keyed by dotted path names
//! (`backbone.stage1.block0.rfas.conv_3_1.weight`). Layers only hold
//! [`ParamId`]s, so a forward pass is a pure function of the store and the
//! input, and training swaps in new tensors after every optimizer step.

use std::cell::RefCell;
use std::collections::HashMap;

use rfw_tensor::init::{fan_in_uniform, seeded_rng, SeededRng};
use rfw_tensor::{ConvSpec, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    rng: SeededRng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            kinds: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            rng: seeded_rng(seed),
        }
    }

    /// Registers a tensor under a unique name.
    ///
    /// Duplicate names indicate a construction bug and panic.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.kinds.push(kind);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        &mut self.rng
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) {
        debug_assert_eq!(tensor.shape(), self.tensors[id.0].shape());
        self.tensors[id.0] = tensor;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Trainable)
            .collect()
    }

    /// Exact number of trainable scalar parameters.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids()
            .iter()
            .map(|&id| self.get(id).numel())
            .sum()
    }

    /// Replaces every trainable tensor with a fresh leaf that records gradients.
    pub fn attach_gradients(&mut self) {
        for id in self.trainable_ids() {
            let leaf = self.tensors[id.0].requires_grad_leaf();
            self.tensors[id.0] = leaf;
        }
    }

    /// Replaces every tensor with a constant copy (drops gradients).
    pub fn detach_all(&mut self) {
        for t in &mut self.tensors {
            *t = t.detach();
        }
    }

    /// Copy of the store with the given trainable tensors substituted, in
    /// [`ParamStore::trainable_ids`] order. Used for finite-difference checks.
    pub fn with_trainable(&self, ids: &[ParamId], tensors: &[Tensor]) -> ParamStore {
        let mut out = self.clone();
        for (&id, t) in ids.iter().zip(tensors) {
            out.tensors[id.0] = t.clone();
        }
        out
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(Tensor::detach))
            .collect()
    }

    /// Loads values by name; every stored parameter must be present with the
    /// same shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..self.tensors.len() {
            let name = &self.names[i];
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.detach();
        }
        Ok(())
    }
}

/// Running-statistic update recorded by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Per-pass context: the parameters and whether batch statistics are used.
pub struct Ctx<'a> {
    pub params: &'a ParamStore,
    pub train: bool,
    updates: RefCell<Vec<StatUpdate>>,
}

impl<'a> Ctx<'a> {
    pub fn eval(params: &'a ParamStore) -> Self {
        Ctx {
            params,
            train: false,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn train(params: &'a ParamStore) -> Self {
        Ctx {
            params,
            train: true,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, id: ParamId) -> &Tensor {
        self.params.get(id)
    }

    pub fn take_updates(&self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    /// Weights drawn uniformly in `±sqrt(1/fan_in)`; bias likewise.
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, bias: bool) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.fan_in();
        let w = fan_in_uniform(&spec.weight_shape(), fan_in, store.rng());
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable);
        let bias = bias.then(|| {
            let b = fan_in_uniform(&[spec.out_channels], fan_in, store.rng());
            store.add(format!("{name}.bias"), b, ParamKind::Trainable)
        });
        Ok(Conv { spec, weight, bias })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), &self.spec)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(
                format!("{name}.weight"),
                Tensor::ones(&[channels]),
                ParamKind::Trainable,
            ),
            beta: store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[channels]),
                ParamKind::Trainable,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                ParamKind::Buffer,
            ),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.train {
            let (y, stats) = x.batch_norm_train(gamma, beta, self.eps)?;
            ctx.updates.borrow_mut().push(StatUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                mean: stats.mean,
                var: stats.var,
                count: stats.count,
            });
            Ok(y)
        } else {
            Ok(x.batch_norm_eval(
                gamma,
                beta,
                ctx.p(self.running_mean).data(),
                ctx.p(self.running_var).data(),
                self.eps,
            )?)
        }
    }
}

/// Folds recorded batch statistics into the running buffers
/// (exponential average, unbiased variance).
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    let m = BatchNorm::MOMENTUM;
    for u in updates {
        let correction = if u.count > 1 {
            u.count as f64 / (u.count - 1) as f64
        } else {
            1.0
        };
        let blend = |old: &Tensor, new: &[f64], scale: f64| {
            let data = old
                .data()
                .iter()
                .zip(new)
                .map(|(&o, &n)| (1.0 - m) * o + m * n * scale)
                .collect();
            Tensor::from_vec(data, old.shape()).expect("same shape")
        };
        let mean = blend(store.get(u.mean_id), &u.mean, 1.0);
        let var = blend(store.get(u.var_id), &u.var, correction);
        store.set(u.mean_id, mean);
        store.set(u.var_id, var);
    }
}

/// Convolution without bias, batch norm, then SiLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnAct {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(ConvBnAct {
            conv: Conv::new(store, &format!("{name}.conv"), spec, false)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), spec.out_channels),
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        Ok(self.bn.forward(ctx, &self.conv.forward(ctx, x)?)?.silu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_counts_only_trainable_values() {
        let mut store = ParamStore::new(0);
        let conv = Conv::new(&mut store, "c", ConvSpec::new(3, 4, 3), true).unwrap();
        BatchNorm::new(&mut store, "bn", 4);
        assert_eq!(store.trainable_count(), 4 * 3 * 9 + 4 + 8);
        assert_eq!(store.len(), 6);
        assert_eq!(store.name(conv.weight), "c.weight");
        assert_eq!(
            store.id("bn.running_var").map(|id| store.kind(id)),
            Some(ParamKind::Buffer)
        );
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::new(0);
        store.add("a", Tensor::zeros(&[1]), ParamKind::Trainable);
        store.add("a", Tensor::zeros(&[1]), ParamKind::Trainable);
    }

    #[test]
    fn train_mode_records_and_applies_running_stats() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let x = Tensor::from_vec(vec![1.0, 3.0], &[1, 1, 1, 2]).unwrap();
        let updates = {
            let ctx = Ctx::train(&store);
            bn.forward(&ctx, &x).unwrap();
            ctx.take_updates()
        };
        apply_stat_updates(&mut store, &updates);
        assert!((store.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        // unbiased variance of [1, 3] is 2
        assert!((store.get(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn entries_round_trip_and_shape_mismatch_is_refused() {
        let mut a = ParamStore::new(1);
        Conv::new(&mut a, "c", ConvSpec::new(2, 2, 1), true).unwrap();
        let mut b = ParamStore::new(2);
        Conv::new(&mut b, "c", ConvSpec::new(2, 2, 1), true).unwrap();
        b.load_entries(&a.to_entries()).unwrap();
        for id in a.ids() {
            assert_eq!(a.get(id).data(), b.get(id).data());
        }
        let mut c = ParamStore::new(3);
        Conv::new(&mut c, "c", ConvSpec::new(2, 3, 1), true).unwrap();
        assert!(c.load_entries(&a.to_entries()).is_err());
    }
}
