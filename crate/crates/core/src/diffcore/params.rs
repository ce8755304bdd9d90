use std::io::{Read, Write};

use super::{DiffError, Gradients, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors, kept in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Parameters placed on a tape for one pass.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Bindings over existing leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(v.clone(), requires_grad))
            .collect();
        BoundParams { vars }
    }

    /// Gradients for every parameter, in store order.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &Gradients) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect()
    }

    /// Writes `count (u32)` then, per parameter, `name_len (u32)`, UTF-8
    /// name and a tensor block.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(&self.values) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            value.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, DiffError> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let len = u32::from_le_bytes(b4) as usize;
            if len > 4096 {
                return Err(DiffError::Corrupt(format!("name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| DiffError::Corrupt("parameter name is not UTF-8".into()))?;
            let value = Tensor::read_from(r)?;
            store.add(name, value);
        }
        Ok(store)
    }

    /// Replaces values with those of `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), DiffError> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| DiffError::UnknownParam(name.clone()))?;
            let src = other.get(j);
            if src.shape() != self.values[i].shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "load parameter",
                    lhs: self.values[i].shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}
