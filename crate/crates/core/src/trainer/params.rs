use crate::error::{Error, Result};

/// Index of a parameter in a [`ParamStore`].
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Frozen parameters keep their value through optimizer steps.
    pub frozen: bool,
}

/// Every learnable value of a model, in creation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Vec<f64>) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param { name: name.into(), value, grad, frozen: false });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.params[id].grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Overwrites a value by name, checking its length.
    pub fn assign(&mut self, name: &str, value: &[f64]) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Incompatible(format!("no parameter named `{name}`")))?;
        let p = &mut self.params[id];
        if p.value.len() != value.len() {
            return Err(Error::Incompatible(format!("parameter `{name}` has {} values, got {}", p.value.len(), value.len())));
        }
        p.value.copy_from_slice(value);
        Ok(())
    }
}
