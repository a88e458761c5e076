use std::collections::HashMap;

use super::{GradError, Grads, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter arrays in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<(), GradError> {
        if super::tape::numel(shape) != data.len() {
            return Err(GradError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        if self.index.contains_key(name) {
            return Err(GradError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Keep only parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.insert(&p.name, &p.shape, p.data.clone()).expect("unique names");
        }
        out
    }

    /// Append every parameter of `other`; names must not collide.
    pub fn extend(&mut self, other: &ParamStore) -> Result<(), GradError> {
        for p in other.iter() {
            self.insert(&p.name, &p.shape, p.data.clone())?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|x| x.is_finite()))
    }

    /// Record every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams, GradError> {
        self.bind_with(tape, true)
    }

    /// Record every parameter as a constant (no gradient flows to it).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<BoundParams, GradError> {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams, GradError> {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.var(&p.shape, p.data.clone()) } else { tape.constant(&p.shape, p.data.clone()) })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundParams { vars, index: self.index.clone(), names: self.params.iter().map(|p| p.name.clone()).collect() })
    }
}

/// Tape handles for a [`ParamStore`], addressable by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
    names: Vec<String>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, GradError> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    /// Same names, every handle replaced by a detached copy.
    pub fn detached(&self, tape: &mut Tape) -> Result<BoundParams, GradError> {
        let vars = self.vars.iter().map(|&v| tape.detach(v)).collect::<Result<Vec<_>, _>>()?;
        Ok(BoundParams { vars, index: self.index.clone(), names: self.names.clone() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(String::as_str).zip(self.vars.iter().copied())
    }

    /// Per-parameter gradients in store order; unreachable parameters get zeros.
    pub fn collect_grads(&self, tape: &Tape, grads: &Grads) -> Vec<Vec<f64>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v, tape.value(v).len())).collect()
    }
}
