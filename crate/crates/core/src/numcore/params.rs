use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{LinkError, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Weight matrices decay; norms, biases and slopes do not.
    pub decay: bool,
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor: tensor.with_grad(),
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    decay: e.decay,
                })
                .collect(),
        }
    }

    /// Add tape gradients of every bound parameter into its accumulator.
    pub fn absorb(&mut self, grads: &Gradients<T>, bound: &[Option<Var>]) -> Result<()> {
        for (entry, var) in self.entries.iter_mut().zip(bound) {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                entry.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Named random streams split off one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum RngStream {
    Init = 0,
    Dropout = 1,
    Shuffle = 2,
    Data = 3,
    Augment = 4,
}

/// ChaCha8 keyed by `seed`, positioned on `stream`. Streams never overlap,
/// so adding a consumer on one stream leaves the others unchanged.
pub fn rng_stream(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout configuration plus the random stream it draws masks from.
#[derive(Clone, Debug)]
pub struct DropoutSpec {
    pub ratio: f64,
    pub rng: ChaCha8Rng,
    pub training: bool,
}

impl DropoutSpec {
    pub fn new(ratio: f64, seed: u64, training: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(LinkError::Config(format!("dropout ratio {ratio} outside [0, 1)")));
        }
        Ok(Self {
            ratio,
            rng: rng_stream(seed, RngStream::Dropout),
            training,
        })
    }

    pub fn eval() -> Self {
        Self {
            ratio: 0.0,
            rng: rng_stream(0, RngStream::Dropout),
            training: false,
        }
    }
}

/// One forward pass: a tape, the parameters it reads, and the dropout state.
///
/// Each parameter is placed on the tape at most once, on first use, so
/// all of its uses share one leaf and one gradient.
pub struct Forward<'a, T: Scalar = f32> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    pub dropout: DropoutSpec,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, dropout: DropoutSpec) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            dropout,
        }
    }

    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::new(store, DropoutSpec::eval())
    }

    pub fn mode(&self) -> Mode {
        if self.dropout.training {
            Mode::Train
        } else {
            Mode::Eval
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.get(id))?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Run backward from `loss`; returns the gradients and the parameter
    /// bindings needed by [`ParamStore::absorb`].
    pub fn backward(self, loss: Var) -> Result<(Gradients<T>, Vec<Option<Var>>)> {
        let grads = self.tape.backward(loss)?;
        Ok((grads, self.bound))
    }
}
