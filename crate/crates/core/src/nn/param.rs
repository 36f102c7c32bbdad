use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Real, Tensor, Var};

/// The four parameter regions of a dual-head network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Stem,
    HeadMain,
    HeadSecond,
    Merge,
}

impl Region {
    pub const ALL: [Region; 4] = [
        Region::Stem,
        Region::HeadMain,
        Region::HeadSecond,
        Region::Merge,
    ];
}

/// Trainable weights versus persistent non-trainable state (batch-norm
/// running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

/// A named tensor owned by a layer.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
    pub kind: ParamKind,
}

impl Param {
    pub fn weight(name: String, value: Tensor) -> Self {
        Param {
            name,
            value,
            frozen: false,
            kind: ParamKind::Weight,
        }
    }

    pub fn buffer(name: String, value: Tensor) -> Self {
        Param {
            name,
            value,
            frozen: false,
            kind: ParamKind::Buffer,
        }
    }
}

/// Parameter initializer.
///
/// `shape_only` produces zero tensors without touching the random stream,
/// which is enough for parameter census of very large architectures.
pub struct Init {
    rng: ChaCha8Rng,
    shape_only: bool,
}

impl Init {
    pub fn seeded(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            shape_only: false,
        }
    }

    pub fn shape_only() -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(0),
            shape_only: true,
        }
    }

    /// Kaiming fan-in normal: `N(0, 2 / fan_in)`.
    pub(crate) fn kaiming(&mut self, shape: &[usize]) -> Tensor {
        if self.shape_only {
            return Tensor::zeros(shape);
        }
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as Real
        })
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub(crate) fn uniform_fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        if self.shape_only {
            return Tensor::zeros(shape);
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as Real)
    }
}

/// Per-parameter gradients gathered from a backward pass, keyed by name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Running-statistic update produced by a batch-norm layer in train mode.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub(crate) layer: String,
    pub(crate) mean: Vec<Real>,
    pub(crate) var: Vec<Real>,
}

/// State threaded through one forward (and optionally backward) pass.
pub struct Pass<'a> {
    pub graph: Graph<'a>,
    train: bool,
    bind_params: bool,
    bound: Vec<(&'a str, Var)>,
    bn_updates: Vec<BnUpdate>,
    stem_calls: usize,
}

impl<'a> Pass<'a> {
    /// Train mode: trainable parameters receive gradients and unfrozen
    /// batch-norm layers use batch statistics.
    pub fn training() -> Self {
        Pass::with(true, true)
    }

    /// Evaluation mode: parameters are constants and batch norm uses its
    /// running statistics.
    pub fn inference() -> Self {
        Pass::with(false, false)
    }

    fn with(train: bool, bind_params: bool) -> Self {
        Pass {
            graph: Graph::new(),
            train,
            bind_params,
            bound: Vec::new(),
            bn_updates: Vec::new(),
            stem_calls: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Registers a parameter on the graph.
    pub fn param(&mut self, p: &'a Param) -> Var {
        if self.bind_params && !p.frozen && p.kind == ParamKind::Weight {
            // one leaf per parameter so repeated forwards accumulate gradient
            if let Some(&(_, v)) = self.bound.iter().find(|(n, _)| *n == p.name) {
                return v;
            }
            let v = self.graph.variable_ref(&p.value);
            self.bound.push((p.name.as_str(), v));
            v
        } else {
            self.graph.constant_ref(&p.value)
        }
    }

    pub fn input(&mut self, x: &Tensor) -> Var {
        self.graph.constant(x.clone())
    }

    /// Gradients of every bound parameter that was reached by backward.
    pub fn gradients(&mut self) -> Gradients {
        let mut out = Gradients::new();
        for &(name, v) in &self.bound {
            if let Some(g) = self.graph.take_grad(v) {
                out.insert(name.to_string(), g);
            }
        }
        out
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub(crate) fn count_stem_call(&mut self) {
        self.stem_calls += 1;
    }

    /// Number of times a network stem was evaluated on this pass.
    pub fn stem_calls(&self) -> usize {
        self.stem_calls
    }
}

/// Anything that maps an input batch to class scores on a [`Pass`].
pub trait Model: Sync {
    /// Raw (pre-softmax) class scores, `N x C`.
    fn logits<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> crate::Result<Var>;
}

/// Visitor over the parameters held by a layer.
pub trait Module {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));
}
