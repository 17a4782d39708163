//! Named parameter storage and its binding to a tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tape::{Grads, Tape, Var};
use crate::tensor::{numel, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    /// Normal with the given standard deviation, resampled outside ±2σ.
    TruncNormal {
        std: f32,
    },
    Uniform {
        bound: f32,
    },
}

impl Init {
    /// Uniform(±1/sqrt(fan_in)), the usual default for convolutions.
    pub fn fan_in_uniform(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f32).sqrt(),
        }
    }

    fn fill(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormal { std } => (0..n)
                .map(|_| loop {
                    let z: f32 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }
}

/// Receives parameter declarations while a model is being built.
///
/// Building against a [`ParamStore`] allocates and initializes; building
/// against a [`ParamCounter`] only tallies shapes.
pub trait ParamSink {
    fn declare(&mut self, name: String, shape: &[usize], init: Init, trainable: bool) -> ParamId;

    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.declare(name.to_string(), shape, init, true)
    }

    /// A non-trainable tensor (e.g. batch-norm running statistics).
    fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.declare(name.to_string(), shape, init, false)
    }
}

impl<S: ParamSink + ?Sized> ParamSink for &mut S {
    fn declare(&mut self, name: String, shape: &[usize], init: Init, trainable: bool) -> ParamId {
        (**self).declare(name, shape, init, trainable)
    }
}

/// Counts declared parameters without allocating them.
#[derive(Debug, Default, Clone)]
pub struct ParamCounter {
    pub trainable: usize,
    pub frozen: usize,
    declared: usize,
}

impl ParamSink for ParamCounter {
    fn declare(&mut self, _name: String, shape: &[usize], _init: Init, trainable: bool) -> ParamId {
        if trainable {
            self.trainable += numel(shape);
        } else {
            self.frozen += numel(shape);
        }
        self.declared += 1;
        ParamId(self.declared - 1)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    /// Empty store whose initializers draw from a generator seeded with `seed`.
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Mutable access; clones the tensor only if it is still shared.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replaces a parameter's value, which must keep its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) {
        let entry = &mut self.entries[id.0];
        assert_eq!(
            entry.value.shape(),
            value.shape(),
            "shape change for parameter {}",
            entry.name
        );
        entry.value = Arc::new(value);
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }
}

impl ParamSink for ParamStore {
    fn declare(&mut self, name: String, shape: &[usize], init: Init, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "parameter {name} declared twice");
        let data = init.fill(numel(shape), &mut self.rng);
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(Tensor::from_vec(shape.to_vec(), data)),
            trainable,
        });
        ParamId(id)
    }
}

/// A parameter store bound to a tape for one forward (and backward) pass.
///
/// With `grad` disabled every parameter is bound as a constant and nothing is
/// recorded.
pub struct Ctx<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    grad: bool,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore, grad: bool) -> Self {
        Self {
            tape,
            store,
            grad,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// The parameter as a variable; repeated calls share one leaf.
    pub fn p(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = &bound[id.0] {
            return v.clone();
        }
        let entry = &self.store.entries[id.0];
        let v = if self.grad && entry.trainable {
            self.tape.leaf(Arc::clone(&entry.value))
        } else {
            self.tape.constant_arc(Arc::clone(&entry.value))
        };
        bound[id.0] = Some(v.clone());
        v
    }

    /// Per-parameter gradients aligned with the store's entries.
    pub fn param_grads(&self, grads: &mut Grads) -> Vec<Option<Tensor>> {
        let bound = self.bound.borrow();
        bound.iter().map(|b| b.as_ref().and_then(|v| grads.take(v))).collect()
    }
}
