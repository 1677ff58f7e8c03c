//! Named parameter groups: the granularity at which gradients are balanced.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ownership scope of a parameter group inside a multi-task network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    /// Updated by every task's gradient; subject to balancing.
    Shared,
    /// Owned by one task's tower; never rescaled by a magnitude balancer.
    TaskSpecific(usize),
}

impl Scope {
    pub fn is_shared(self) -> bool {
        matches!(self, Scope::Shared)
    }
}

/// One named tensor of the model (a weight matrix, a bias, or an embedding
/// table) together with its scope tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterGroup<F> {
    name: String,
    tensor: Tensor<F>,
    scope: Scope,
}

impl<F: Scalar> ParameterGroup<F> {
    pub fn new(name: impl Into<String>, tensor: Tensor<F>, scope: Scope) -> Self {
        Self {
            name: name.into(),
            tensor,
            scope,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<F> {
        &mut self.tensor
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }
}

/// Checks that group names are unique within a model.
pub fn check_unique_names<F: Scalar>(groups: &[ParameterGroup<F>]) -> Result<()> {
    let mut seen = HashSet::new();
    for g in groups {
        if !seen.insert(g.name()) {
            return Err(Error::Config(format!(
                "duplicate parameter group name `{}`",
                g.name()
            )));
        }
    }
    Ok(())
}
