//! Named parameter storage and the per-pass forward context.
//!
//! Networks hold [`ParamId`]s into a shared [`Params`] store. A forward pass
//! runs inside a [`Cx`], which binds parameters onto a fresh tape on first use
//! and collects buffer updates (power-iteration vectors, running statistics)
//! instead of mutating the store. The caller applies them afterwards, so a
//! forward pass is a pure function of the store.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidpred_tensor::{Gradients, Real, Tape, Tensor, Var};

use crate::error::{invalid, Result};
use crate::layers::orthogonal_init;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Generator,
    Discriminator,
    Embedder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// Convolution or linear weight; orthogonally initialized and penalized.
    Weight,
    Bias,
    /// Other trainable values (embeddings, normalization scales).
    Affine,
    /// Non-trainable state carried across steps.
    Buffer,
}

impl Kind {
    pub fn trainable(self) -> bool {
        self != Kind::Buffer
    }
}

#[derive(Clone, Debug)]
pub struct Entry<F: Real> {
    pub name: String,
    pub value: Tensor<F>,
    pub group: Group,
    pub kind: Kind,
}

#[derive(Clone, Debug, Default)]
pub struct Params<F: Real> {
    entries: Vec<Entry<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, group: Group, kind: Kind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value,
            group,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Entry<F> {
        &self.entries[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(invalid(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &Entry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Trainable parameters of `group`.
    pub fn trainable(&self, group: Group) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.group == group && e.kind.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    /// Parameters of `group` of the given kind.
    pub fn of_kind(&self, group: Group, kind: Kind) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.group == group && e.kind == kind)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn count(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group && e.kind.trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    group: e.group,
                    kind: e.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<F>)>) -> Result<()> {
        for (id, value) in updates {
            self.set(id, value)?;
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Init<'a, F: Real> {
    params: &'a mut Params<F>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: Group,
}

impl<'a, F: Real> Init<'a, F> {
    pub fn new(params: &'a mut Params<F>, rng: &'a mut ChaCha8Rng, prefix: &str, group: Group) -> Self {
        Init {
            params,
            rng,
            prefix: prefix.to_string(),
            group,
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, F> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            params: self.params,
            rng: self.rng,
            prefix,
            group: self.group,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    /// Orthogonally initialized weight.
    pub fn weight(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let value = orthogonal_init::<F, _>(shape, &mut *self.rng);
        self.params.add(self.name(leaf), value, self.group, Kind::Weight)
    }

    pub fn bias(&mut self, leaf: &str, len: usize) -> ParamId {
        self.params
            .add(self.name(leaf), Tensor::zeros(&[len]), self.group, Kind::Bias)
    }

    pub fn affine(&mut self, leaf: &str, value: Tensor<F>) -> ParamId {
        self.params.add(self.name(leaf), value, self.group, Kind::Affine)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor<F>) -> ParamId {
        self.params.add(self.name(leaf), value, self.group, Kind::Buffer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics; buffer updates are recorded.
    Train,
    /// Frozen statistics; no buffer updates.
    Eval,
}

/// Batch moments observed by one normalization layer in one pass, with the
/// buffers that receive them once standing statistics are finalized.
#[derive(Clone, Debug)]
pub struct BnRecord {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub ready_id: ParamId,
    /// Row-major `[groups, channels]`.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Forward context: one tape, one logical step.
pub struct Cx<'p, F: Real> {
    pub tape: Tape<F>,
    params: &'p Params<F>,
    bound: HashMap<ParamId, Var>,
    cache: HashMap<ParamId, Var>,
    mode: Mode,
    trainable: Option<Group>,
    updates: Vec<(ParamId, Tensor<F>)>,
    moments: Vec<BnRecord>,
    power_iters: Option<usize>,
    pins: Option<HashMap<ParamId, (Tensor<F>, Tensor<F>)>>,
    pin_log: HashMap<ParamId, (Tensor<F>, Tensor<F>)>,
}

impl<'p, F: Real> Cx<'p, F> {
    /// `trainable` selects the group whose parameters receive gradients;
    /// everything else is bound as a constant.
    pub fn new(params: &'p Params<F>, mode: Mode, trainable: Option<Group>) -> Self {
        Self::with_tape(params, mode, trainable, Tape::new())
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(params: &'p Params<F>, mode: Mode, trainable: Option<Group>, tape: Tape<F>) -> Self {
        Cx {
            tape,
            params,
            bound: HashMap::new(),
            cache: HashMap::new(),
            mode,
            trainable,
            updates: Vec::new(),
            moments: Vec::new(),
            power_iters: None,
            pins: None,
            pin_log: HashMap::new(),
        }
    }

    pub fn into_tape(self) -> Tape<F> {
        self.tape
    }

    /// Overrides the per-layer power-iteration count (verification runs use
    /// many steps so the spectral estimate is converged).
    pub fn set_power_iterations(&mut self, iters: Option<usize>) {
        self.power_iters = iters;
    }

    pub fn power_iterations(&self) -> Option<usize> {
        self.power_iters
    }

    /// Fixes the singular vectors `(u, v)` used for the listed weights, so the
    /// normalized weight is an exact function of the raw one. Used when
    /// comparing against finite differences.
    pub fn pin_spectral(&mut self, pins: HashMap<ParamId, (Tensor<F>, Tensor<F>)>) {
        self.pins = Some(pins);
    }

    pub(crate) fn spectral_pin(&self, id: ParamId) -> Option<&(Tensor<F>, Tensor<F>)> {
        self.pins.as_ref().and_then(|p| p.get(&id))
    }

    pub(crate) fn log_spectral(&mut self, id: ParamId, u: Tensor<F>, v: Tensor<F>) {
        self.pin_log.insert(id, (u, v));
    }

    /// Singular vectors computed during this pass, keyed by weight.
    pub fn take_spectral_log(&mut self) -> HashMap<ParamId, (Tensor<F>, Tensor<F>)> {
        std::mem::take(&mut self.pin_log)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p Params<F> {
        self.params
    }

    /// Tape variable for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let e = self.params.entry(id);
        let grad = e.kind.trainable() && Some(e.group) == self.trainable;
        let v = self.tape.leaf(e.value.clone(), grad);
        self.bound.insert(id, v);
        v
    }

    /// Substitutes a tape variable for a parameter (used by gradient checks).
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
        self.cache.remove(&id);
    }

    /// Raw stored value, bypassing the tape.
    pub fn stored(&self, id: ParamId) -> &'p Tensor<F> {
        self.params.get(id)
    }

    pub(crate) fn cached(&self, id: ParamId) -> Option<Var> {
        self.cache.get(&id).copied()
    }

    pub(crate) fn cache(&mut self, id: ParamId, v: Var) {
        self.cache.insert(id, v);
    }

    pub fn push_update(&mut self, id: ParamId, value: Tensor<F>) {
        if self.mode == Mode::Train {
            self.updates.push((id, value));
        }
    }

    pub(crate) fn record_moments(&mut self, r: BnRecord) {
        self.moments.push(r);
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor<F>)> {
        std::mem::take(&mut self.updates)
    }

    pub fn take_moments(&mut self) -> Vec<BnRecord> {
        std::mem::take(&mut self.moments)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.tape.value(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.tape.shape(v).to_vec()
    }

    /// Backpropagates `loss` and returns gradients of every bound trainable
    /// parameter. Parameters that did not influence the loss get zeros.
    pub fn gradients(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<F>)>> {
        let grads: Gradients<F> = self.tape.backward(loss)?;
        let mut out: Vec<(ParamId, Tensor<F>)> = self
            .bound
            .iter()
            .filter(|(_, &v)| self.tape.requires_grad(v))
            .map(|(&id, &v)| (id, grads.get_or_zeros(v, self.tape.shape(v))))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

/// SplitMix64 finalizer over a base seed and a path of stream tags.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    stream.iter().fold(mix(base), |acc, &s| mix(acc ^ mix(s)))
}
