//! Named parameter storage shared by the encoder and the scoring heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Initialization recipes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        let tensor = tensor.with_grad();
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn init<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init, decay: bool, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive standard deviation");
                (0..n).map(|_| T::lit(dist.sample(rng))).collect()
            }
        };
        self.add(name, Tensor::new(shape, data).expect("shape matches data"), decay)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Records every parameter on `tape`; the returned vector is indexed by [`ParamId`].
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Result<Vec<Var>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| tape.param(&e.tensor, i))
            .collect()
    }

    /// Overwrites the value of parameter `name`, keeping its shape.
    pub fn set(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let t = &mut self.entries[id.0].tensor;
        if t.shape() != shape || t.len() != data.len() {
            return Err(Error::shape("set_param", t.shape(), shape));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }
}
