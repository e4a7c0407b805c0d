use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::RunningStats;
use crate::tensor::{Graph, Tensor, Var};

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Backbone,
    /// Gater feature extractor.
    Gater,
    /// Gater bottleneck head producing gate pre-activations.
    Head,
    /// Temporary classifier on gater features, used only to pre-train the
    /// gater.
    Aux,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Backbone, Component::Gater, Component::Head, Component::Aux];
}

/// Whether weight decay applies to a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub component: Component,
    pub kind: ParamKind,
}

/// Named trainable tensors plus batchnorm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<(String, Component, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: String, value: Tensor, component: Component, kind: ParamKind) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            component,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub(crate) fn add_stats(&mut self, name: String, component: Component, channels: usize) -> StatsId {
        self.stats.push((name, component, RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0].2
    }

    pub fn set_stats(&mut self, id: StatsId, stats: RunningStats) {
        self.stats[id.0].2 = stats;
    }

    pub fn stats_entries(&self) -> impl Iterator<Item = (&str, Component, &RunningStats)> {
        self.stats.iter().map(|(n, c, s)| (n.as_str(), *c, s))
    }

    pub(crate) fn stats_mut_by_name(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.stats.iter_mut().find(|(n, _, _)| n == name).map(|(_, _, s)| s)
    }

    /// Number of scalar parameters in `component`.
    pub fn count(&self, component: Component) -> usize {
        self.params
            .iter()
            .filter(|p| p.component == component)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies every parameter onto `g`. Parameters whose component passes
    /// `trainable` become gradient leaves; the rest become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(Component) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p.component) {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Overwrites a parameter by name, checking its shape.
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.vars.iter().position(|&x| x == v).map(ParamId)
    }

    /// Gradients after `g.backward(..)`.
    pub fn grads(&self, g: &Graph) -> Grads {
        Grads(self.vars.iter().map(|&v| g.grad(v).cloned()).collect())
    }
}

/// Per-parameter gradients; `None` where no gradient reached the parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub(crate) Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
