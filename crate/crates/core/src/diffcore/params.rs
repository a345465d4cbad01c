use indexmap::IndexMap;

use super::tensor::Tensor;
use super::DiffError;

/// Named map of parameter tensors with deterministic (insertion) iteration
/// order. Also used for the gradient maps returned by backward passes, which
/// carry exactly the same key set and per-key shapes.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        if self.entries.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Overwrite an existing entry; the replacement must keep the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        match self.entries.get_mut(name) {
            Some(t) if t.shape() == value.shape() => {
                *t = value;
                Ok(())
            }
            Some(t) => Err(DiffError::BadShape {
                context: format!("ParamSet::set({name})"),
                detail: format!("{:?} vs {:?}", t.shape(), value.shape()),
            }),
            None => Err(DiffError::MissingParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Merge another set under a dotted prefix.
    pub fn adopt(&mut self, prefix: &str, other: ParamSet) -> Result<(), DiffError> {
        for (name, value) in other.entries {
            self.insert(&format!("{prefix}.{name}"), value)?;
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = indexmap::map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}
