use crate::array::Array;
use crate::checkpoint::{Checkpoint, CheckpointError};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable arrays, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name `{name}`");
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

    pub fn value(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::numel).sum()
    }

    /// Writes every parameter as `<prefix><name>`.
    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (name, value) in self.names.iter().zip(&self.values) {
            ckpt.insert_array(format!("{prefix}{name}"), value);
        }
    }

    /// Overwrites every parameter from `<prefix><name>` entries; shapes must match.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<(), CheckpointError> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let key = format!("{prefix}{name}");
            let loaded = ckpt.array(&key)?;
            if loaded.shape() != value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: key,
                    expected: value.shape().to_vec(),
                    found: loaded.shape().to_vec(),
                });
            }
            *value = loaded;
        }
        Ok(())
    }
}
