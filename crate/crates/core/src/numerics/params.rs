use std::collections::HashMap;

use super::{NumericsError, Scalar, Tensor};

/// Named parameter tensors with one gradient slot per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor<F>>,
    grads: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<usize, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let id = self.values.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize, NumericsError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: usize) -> &Tensor<F> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.values[id]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>, NumericsError> {
        Ok(&self.values[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>, NumericsError> {
        let id = self.id(name)?;
        Ok(&mut self.values[id])
    }

    pub fn grad(&self, id: usize) -> &Tensor<F> {
        &self.grads[id]
    }

    /// Mutable access to a value and its gradient slot at the same time.
    pub fn value_and_grad_mut(&mut self, id: usize) -> (&mut Tensor<F>, &Tensor<F>) {
        (&mut self.values[id], &self.grads[id])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x = F::zero());
        }
    }

    /// Adds `scale · grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients<F>, scale: F) {
        for (slot, g) in self.grads.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                for (s, &v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *s = *s + scale * v;
                }
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            index: self.index.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradients produced by one backward pass, aligned with a [`ParamStore`].
/// Parameters the graph never touched (or that were frozen) have no slot.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub(crate) slots: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub(crate) fn empty(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor<F>> {
        self.slots.get(id).and_then(Option::as_ref)
    }

    /// Gradient for parameter `id`, zeros when the parameter received none.
    pub fn dense(&self, store: &ParamStore<F>, id: usize) -> Tensor<F> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    }

    pub(crate) fn add_into(&mut self, id: usize, shape: &[usize], g: &[F]) {
        let slot = self.slots[id].get_or_insert_with(|| Tensor::zeros(shape));
        for (s, &v) in slot.data_mut().iter_mut().zip(g) {
            *s = *s + v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut p = ParamStore::<f32>::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            p.insert("a", Tensor::zeros(&[3])),
            Err(NumericsError::DuplicateParam(_))
        ));
        assert_eq!(p.grad(0).shape(), &[2]);
        assert!(p.get("b").is_err());
    }

    #[test]
    fn accumulate_scales() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut g = Gradients::empty(1);
        g.add_into(0, &[2], &[1.0, 2.0]);
        p.accumulate(&g, 0.5);
        p.accumulate(&g, 0.5);
        assert_eq!(p.grad(0).data(), &[1.0, 2.0]);
        p.zero_grads();
        assert_eq!(p.grad(0).data(), &[0.0, 0.0]);
    }
}
