use std::cell::RefCell;
use std::collections::HashMap;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    /// Frozen parameters never receive gradients.
    pub trainable: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Parameter<F> {
    /// Biases, norms and single embedding vectors are exempt from weight decay.
    pub fn decays(&self) -> bool {
        self.tensor.shape().len() >= 2
    }
}

/// Named parameters in registration order. Names are dotted paths such as
/// `student.encoder.block0.attn.wq`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<F>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (ParamId, &'a Parameter<F>)> + 'a {
        self.iter().filter(move |(_, p)| p.name.starts_with(prefix))
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[F], scale: F) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        let acc = p.grad.get_or_insert_with(|| vec![F::zero(); g.len()]);
        acc.iter_mut().zip(g).for_each(|(a, &x)| *a += x * scale);
    }

    /// Same names, shapes and values in the same order.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                    grad: None,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// A tape plus lazy bindings from parameters to leaf nodes.
pub struct Session<'s, F: Scalar> {
    tape: Tape<F>,
    store: &'s ParamStore<F>,
    bound: RefCell<Vec<Option<usize>>>,
}

impl<'s, F: Scalar> Session<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self::with_tape(store, Tape::new())
    }

    pub fn no_grad(store: &'s ParamStore<F>) -> Self {
        Self::with_tape(store, Tape::no_grad())
    }

    fn with_tape(store: &'s ParamStore<F>, tape: Tape<F>) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &Tape<F> {
        &self.tape
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'_, F> {
        if let Some(node) = self.bound.borrow()[id.0] {
            return self.tape.var(node);
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.tensor.clone(), p.trainable);
        self.bound.borrow_mut()[id.0] = Some(v.id());
        v
    }

    pub fn constant(&self, t: Tensor<F>) -> Var<'_, F> {
        self.tape.constant(t)
    }

    /// Gradients of every bound trainable parameter, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<F>)> {
        let bound = self.bound.borrow();
        bound
            .iter()
            .enumerate()
            .filter_map(|(i, node)| {
                let node = (*node)?;
                if !self.store.get(ParamId(i)).trainable {
                    return None;
                }
                let g = self.tape.grad(self.tape.var(node))?;
                Some((ParamId(i), g.into_data()))
            })
            .collect()
    }
}
