//! Per-task gradient sets keyed by parameter group name.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParameterGroup;
use crate::scalar::Scalar;

/// L2 norm of a flat gradient array.
pub fn l2_norm<F: Scalar>(xs: &[F]) -> F {
    xs.iter().map(|&x| x * x).sum::<F>().sqrt()
}

/// Cosine similarity of two flat arrays; zero-norm inputs yield 0.
pub fn cosine<F: Scalar>(a: &[F], b: &[F]) -> F {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == F::zero() || nb == F::zero() {
        return F::zero();
    }
    dot(a, b) / (na * nb)
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// One task's flat gradients for every parameter group, in group order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<F> {
    task: String,
    grads: IndexMap<String, Vec<F>>,
}

impl<F: Scalar> GradientSet<F> {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            grads: IndexMap::new(),
        }
    }

    /// All-zero gradients matching each group's tensor length.
    pub fn zeros_like(task: impl Into<String>, groups: &[ParameterGroup<F>]) -> Self {
        let mut set = Self::new(task);
        for g in groups {
            set.grads.insert(g.name().to_string(), vec![F::zero(); g.len()]);
        }
        set
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<F>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn set_task(&mut self, task: impl Into<String>) {
        self.task = task.into();
    }

    pub fn get(&self, name: &str) -> Option<&[F]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<F>> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[F])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<F>)> {
        self.grads.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn same_keys(&self, other: &Self) -> bool {
        self.grads.len() == other.grads.len()
            && self.grads.keys().all(|k| other.grads.contains_key(k))
    }

    pub fn norm_of(&self, name: &str) -> Option<F> {
        self.grads.get(name).map(|v| l2_norm(v))
    }

    /// Multiplies one group's gradient array by `w` in place.
    pub fn scale_group(&mut self, name: &str, w: F) -> Result<()> {
        let grad = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown gradient group `{name}`")))?;
        for v in grad.iter_mut() {
            *v = *v * w;
        }
        Ok(())
    }

    /// Elementwise `self += other`, requiring identical group keys.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_keys(other) {
            return Err(Error::Contract(format!(
                "gradient sets `{}` and `{}` have different group keys",
                self.task, other.task
            )));
        }
        for (name, grad) in self.grads.iter_mut() {
            let rhs = &other.grads[name];
            if rhs.len() != grad.len() {
                return Err(Error::Contract(format!(
                    "gradient length mismatch for group `{name}`"
                )));
            }
            for (a, &b) in grad.iter_mut().zip(rhs) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_assign_requires_matching_keys() {
        let mut a = GradientSet::<f64>::new("target");
        a.insert("w", vec![1.0, 1.0]);
        let mut b = GradientSet::<f64>::new("aux");
        b.insert("v", vec![2.0, -1.0]);
        assert!(a.add_assign(&b).is_err());
    }

    #[test]
    fn add_assign_sums_elementwise() {
        let mut a = GradientSet::<f64>::new("target");
        a.insert("w", vec![1.0, 1.0]);
        let mut b = GradientSet::<f64>::new("aux");
        b.insert("w", vec![2.0, -1.0]);
        a.add_assign(&b).unwrap();
        assert_eq!(a.get("w").unwrap(), &[3.0, 0.0]);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        assert_eq!(cosine::<f64>(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }
}
