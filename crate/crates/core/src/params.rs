//! Named parameter registry shared by layers, optimizer and checkpoints.

use std::ops::Index;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Role of a parameter tensor; decides weight decay membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Kernel,
    LMatrix,
    PhmBlock,
    SignMatrix,
    DenseWeight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamGroup {
    pub fn weight_decay(self) -> bool {
        !matches!(
            self,
            ParamGroup::LMatrix | ParamGroup::SignMatrix | ParamGroup::BnScale | ParamGroup::BnShift
        )
    }

    /// Kernel-like tensors counted for the weight-sharing ratio.
    pub fn is_conv_kernel(self) -> bool {
        matches!(self, ParamGroup::Kernel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub group: ParamGroup,
}

/// Insertion-ordered map from hierarchical names (`stage1.block0.conv2.x`)
/// to parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        let (idx, _) = self.params.insert_full(name, Param { value, group });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).expect("valid id").0
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        self.params.get_index(id.0).expect("valid id").1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        self.params.get_index_mut(id.0).expect("valid id").1
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.get(id).value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (n, p))| (ParamId(i), n.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.values().map(|p| g.variable(p.value.clone())).collect(),
        }
    }

    /// Gradient per parameter, zeros where none reached it.
    pub fn collect_grads(&self, grads: &Gradients<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.params
            .values()
            .zip(&bound.vars)
            .map(|(p, &v)| grads.get_or_zeros(v, p.value.shape()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: p.value.cast(),
                            group: p.group,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
