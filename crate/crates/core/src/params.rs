//! Named parameter/buffer storage and the per-forward [`Graph`] that binds
//! stored tensors onto a fresh tape.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Names of every trainable parameter and non-trainable buffer, in
/// registration order.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    pub params: Vec<String>,
    pub buffers: Vec<String>,
}

/// Tensor values for a [`Registry`]. Raw weights and EMA shadows are both
/// `ModelState`s over the same registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub params: Vec<Tensor<T>>,
    pub buffers: Vec<Tensor<T>>,
}

impl<T> Default for ModelState<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }
}

impl<T: Scalar> ModelState<T> {
    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            params: self.params.iter().map(Tensor::cast).collect(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
        }
    }

    /// Same number of tensors with identical shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        fn shapes<T: Scalar>(ts: &[Tensor<T>]) -> Vec<&[usize]> {
            ts.iter().map(Tensor::shape).collect()
        }
        shapes(&self.params) == shapes(&other.params) && shapes(&self.buffers) == shapes(&other.buffers)
    }
}

/// Collects parameters while a network is being constructed.
pub struct ParamBuilder<'r, T> {
    registry: &'r mut Registry,
    state: &'r mut ModelState<T>,
    prefix: Vec<String>,
    pub rng: &'r mut ChaCha8Rng,
}

impl<'r, T: Scalar> ParamBuilder<'r, T> {
    pub fn new(registry: &'r mut Registry, state: &'r mut ModelState<T>, rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            registry,
            state,
            prefix: Vec::new(),
            rng,
        }
    }

    /// Runs `f` with `name` appended to the naming scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn qualified(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.qualified(name);
        self.registry.params.push(full);
        self.state.params.push(value);
        ParamId(self.state.params.len() - 1)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> BufferId {
        let full = self.qualified(name);
        self.registry.buffers.push(full);
        self.state.buffers.push(value);
        BufferId(self.state.buffers.len() - 1)
    }
}

/// One forward pass: a tape, the stored tensors bound onto it, the mode, and
/// any buffer updates (batch-norm running statistics) produced along the way.
pub struct Graph<'s, T> {
    pub tape: Tape<T>,
    state: &'s ModelState<T>,
    params: Vec<Var>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
    updates: Vec<(BufferId, Tensor<T>)>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// Binds every parameter; they are trainable leaves iff `track_grads`.
    pub fn new(state: &'s ModelState<T>, mode: Mode, track_grads: bool) -> Self {
        let mut tape = Tape::new();
        let params = state
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), track_grads))
            .collect();
        Self {
            tape,
            state,
            params,
            mode,
            rng: None,
            updates: Vec::new(),
        }
    }

    /// Supplies the random stream used by stochastic layers (dropout).
    pub fn with_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Tape handles for all parameters, in registry order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        self.state.buffer(id)
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_mut()
    }

    pub fn queue_update(&mut self, id: BufferId, value: Tensor<T>) {
        self.updates.push((id, value));
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    /// Buffer updates queued during the forward pass.
    pub fn take_updates(&mut self) -> Vec<(BufferId, Tensor<T>)> {
        std::mem::take(&mut self.updates)
    }
}

/// Writes queued buffer updates into `state`.
pub fn apply_updates<T: Scalar>(state: &mut ModelState<T>, updates: Vec<(BufferId, Tensor<T>)>) -> Result<()> {
    for (id, value) in updates {
        let slot = &mut state.buffers[id.0];
        if slot.shape() != value.shape() {
            return Err(dim_err!(
                "buffer update shape {:?} vs {:?}",
                value.shape(),
                slot.shape()
            ));
        }
        *slot = value;
    }
    Ok(())
}
