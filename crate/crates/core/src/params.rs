//! Named parameter storage and its binding onto a [`Tape`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Array, Gradients, Tape, Var};

/// How a stored array participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Never updated (the pretrained or seeded encoder).
    Frozen,
    /// Running statistics, updated by forward passes in training mode.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array,
    pub kind: ParamKind,
}

/// Ordered map of named arrays. Names are dotted paths such as
/// `g.dec.up1.weight`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array, kind: ParamKind) {
        self.entries.insert(name.into(), Param { value, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Array {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Number of scalar weights of the given kind.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.entries.values().filter(|p| p.kind == kind).map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Binds every array onto `tape`. With `trainable = true`, trainable
    /// parameters become gradient-tracking leaves; everything else is a
    /// constant.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| {
                let v = if trainable && p.kind == ParamKind::Trainable {
                    tape.leaf(p.value.clone())
                } else {
                    Var::constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound {
            tape,
            vars,
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Overwrites buffers with values recorded during a training forward pass.
    pub fn apply_updates(&mut self, updates: Vec<(String, Array)>) {
        for (name, value) in updates {
            if let Some(p) = self.entries.get_mut(&name) {
                p.value = value;
            }
        }
    }

    /// Adds every entry of `other`, replacing same-named ones.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Parameters bound to a tape for one forward pass.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var>,
    updates: RefCell<Vec<(String, Array)>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Queues a new value for a buffer, applied by [`ParamStore::apply_updates`].
    pub fn record_update(&self, name: String, value: Array) {
        self.updates.borrow_mut().push((name, value));
    }

    pub fn take_updates(&self) -> Vec<(String, Array)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    /// Gradients of every tracked parameter, by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(name, v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(v.value().raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `N(0, 2/fan_in)`.
    KaimingNormal,
    /// `N(0, std²)`.
    Normal(f64),
    Zeros,
}

impl Init {
    pub fn sample(self, shape: (usize, usize, usize, usize), rng: &mut impl Rng) -> Array {
        let fan_in = shape.1 * shape.2 * shape.3;
        let std = match self {
            Init::KaimingNormal => (2.0 / fan_in as f64).sqrt(),
            Init::Normal(s) => s,
            Init::Zeros => return Array::zeros(shape),
        };
        let normal = Normal::new(0.0, std).expect("finite std");
        Array::from_shape_simple_fn(shape, || normal.sample(rng))
    }
}

/// Adds `{prefix}.weight` `(cout, cin, k, k)` and, when `bias` is given,
/// `{prefix}.bias` filled with that constant.
#[allow(clippy::too_many_arguments)]
pub fn add_conv(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    init: Init,
    bias: Option<f64>,
    kind: ParamKind,
) {
    store.insert(format!("{prefix}.weight"), init.sample((cout, cin, k, k), rng), kind);
    if let Some(b) = bias {
        store.insert(format!("{prefix}.bias"), Array::from_elem((1, cout, 1, 1), b), kind);
    }
}

/// Adds affine `gamma`/`beta`, plus running statistics when `running`.
pub fn add_norm(store: &mut ParamStore, prefix: &str, channels: usize, running: bool) {
    let shape = (1, channels, 1, 1);
    store.insert(format!("{prefix}.gamma"), Array::ones(shape), ParamKind::Trainable);
    store.insert(format!("{prefix}.beta"), Array::zeros(shape), ParamKind::Trainable);
    if running {
        store.insert(format!("{prefix}.running_mean"), Array::zeros(shape), ParamKind::Buffer);
        store.insert(format!("{prefix}.running_var"), Array::ones(shape), ParamKind::Buffer);
    }
}
