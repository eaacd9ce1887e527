use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub type ParamId = usize;

/// Role of a parameter; freeze policies are expressed over groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    LayerNorm,
    Adapter,
    Prompt,
    Head,
    MlmHead,
}

/// Initial value distribution of a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

/// Name, shape, role and initializer of a parameter, without its storage.
///
/// Model layouts are described as spec lists so that parameter accounting
/// for large configurations never has to allocate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], group: ParamGroup, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            group,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize(&self, rng: &mut impl Rng) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, 1.0),
            Init::Normal(std) => super::init::normal(&self.shape, std, rng),
            Init::Uniform(bound) => super::init::uniform(&self.shape, bound, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

impl Param {
    /// Weight decay applies to matrices only, never to biases or norms.
    pub fn decays(&self) -> bool {
        self.tensor.rank() >= 2 && self.group != ParamGroup::LayerNorm
    }

    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

/// Ordered, named collection of model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; new parameters start trainable.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param {
            name,
            group,
            tensor: tensor.with_requires_grad(true),
        });
        Ok(self.params.len() - 1)
    }

    pub fn add_spec(&mut self, spec: &ParamSpec, rng: &mut impl Rng) -> Result<ParamId> {
        self.add(spec.name.clone(), spec.materialize(rng), spec.group)
    }

    /// Looks up a parameter that must exist.
    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Sets trainability of every parameter from a predicate.
    pub fn set_trainable(&mut self, mut pred: impl FnMut(&Param) -> bool) {
        for p in &mut self.params {
            let t = pred(p);
            p.tensor.set_requires_grad(t);
        }
    }
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward/backward pass.
///
/// Parameters are recorded lazily the first time they are used; frozen
/// parameters enter the tape as constants, so no gradient work is spent on
/// them.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    dropout: RefCell<Option<(f64, ChaCha8Rng)>>,
}

impl<'t, 's> Ctx<'t, 's> {
    /// Inference context: dropout disabled.
    pub fn eval(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            dropout: RefCell::new(None),
        }
    }

    /// Training context with inverted dropout at `rate`, seeded from `rng`.
    pub fn train(tape: &'t Tape, store: &'s ParamStore, rate: f64, rng: &mut impl Rng) -> Self {
        let ctx = Self::eval(tape, store);
        if rate > 0.0 {
            *ctx.dropout.borrow_mut() = Some((rate, ChaCha8Rng::seed_from_u64(rng.gen())));
        }
        ctx
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.dropout.borrow().is_some()
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id].get_or_insert_with(|| self.tape.leaf(self.store.tensor(id)))
    }

    pub fn opt(&self, id: Option<ParamId>) -> Option<Var<'t>> {
        id.map(|i| self.p(i))
    }

    /// Inverted dropout; the identity outside training.
    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut guard = self.dropout.borrow_mut();
        let Some((rate, rng)) = guard.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let factors = (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        x.mul_const(factors)
    }

    /// Gradients of every trainable parameter used in this pass.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(pid, var)| {
                let var = (*var)?;
                grads.take_id(var.id()).map(|g| (pid, g))
            })
            .collect()
    }
}
