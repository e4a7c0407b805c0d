//! Loss assembly, optimizer, schedules and the three training phases.

mod checkpoint;
mod runner;
mod sgd;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use runner::{evaluate, run_phase, write_metrics_csv, EpochMetrics, EvalReport, EvalTarget, PhaseInputs, PhaseOutput};
pub use sgd::Sgd;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::softmax_cross_entropy;
use crate::model::{Component, ForwardOptions, GaterNet, Gating};
use crate::semhash::{Branch, GateDropoutSchedule};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Backbone alone with every gate forced on.
    PretrainBackbone,
    /// Gater feature extractor with a temporary linear classifier.
    PretrainGater,
    /// Everything together with the sparsity penalty.
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PretrainBackbone => "pretrain-backbone",
            Phase::PretrainGater => "pretrain-gater",
            Phase::Joint => "joint",
        }
    }

    fn index(self) -> u64 {
        match self {
            Phase::PretrainBackbone => 1,
            Phase::PretrainGater => 2,
            Phase::Joint => 3,
        }
    }

    /// Components updated in this phase.
    pub fn trainable(self) -> &'static [Component] {
        match self {
            Phase::PretrainBackbone => &[Component::Backbone],
            Phase::PretrainGater => &[Component::Gater, Component::Aux],
            Phase::Joint => &[Component::Backbone, Component::Gater, Component::Head],
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "pretrain-backbone" => Ok(Phase::PretrainBackbone),
            "pretrain-gater" => Ok(Phase::PretrainGater),
            "joint" => Ok(Phase::Joint),
            _ => Err(Error::invalid(format!("unknown phase {s}"))),
        }
    }
}

/// How the gate penalty combines samples of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchReduction {
    #[default]
    Mean,
    Sum,
}

fn default_lambda() -> f32 {
    0.1
}

fn default_momentum() -> f32 {
    0.9
}

fn default_weight_decay() -> f32 {
    5e-4
}

fn default_batch_size() -> usize {
    64
}

fn default_lr_schedule() -> Vec<(usize, f32)> {
    vec![(0, 0.05)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the gate sparsity penalty.
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    /// Joint-phase epochs.
    pub epochs: usize,
    /// Epochs of each pre-training phase; defaults to `epochs`.
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Piecewise-constant `(first epoch, lr)` breakpoints.
    #[serde(default = "default_lr_schedule")]
    pub lr_schedule: Vec<(usize, f32)>,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dropout_schedule: GateDropoutSchedule,
    #[serde(default)]
    pub regularizer: BatchReduction,
}

impl TrainConfig {
    /// Config with defaults for everything but the epoch count.
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            lambda: default_lambda(),
            epochs,
            pretrain_epochs: None,
            batch_size: default_batch_size(),
            lr_schedule: default_lr_schedule(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            seed: 0,
            dropout_schedule: GateDropoutSchedule::default(),
            regularizer: BatchReduction::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr_schedule.is_empty() {
            return Err(Error::Config("lr_schedule is empty".into()));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("lr_schedule epochs must be strictly ascending".into()));
        }
        if let Some((_, lr)) = self.lr_schedule.iter().find(|(_, lr)| !(*lr > 0.0)) {
            return Err(Error::Config(format!("learning rates must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        self.dropout_schedule.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn epochs_for(&self, phase: Phase) -> usize {
        match phase {
            Phase::Joint => self.epochs,
            _ => self.pretrain_epochs.unwrap_or(self.epochs),
        }
    }

    /// Hash of everything that changes the optimization path, excluding the
    /// epoch counts so that a run can be resumed with a longer budget.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.pretrain_epochs = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Learning rate of the last breakpoint at or before `epoch`.
pub fn lr_at(schedule: &[(usize, f32)], epoch: usize) -> Result<f32> {
    let first = schedule.first().ok_or_else(|| Error::Config("lr_schedule is empty".into()))?;
    if epoch < first.0 {
        return Err(Error::Config(format!("epoch {epoch} precedes the first lr breakpoint {}", first.0)));
    }
    Ok(schedule.iter().take_while(|(e, _)| *e <= epoch).last().expect("first applies").1)
}

/// The terms of the training loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cross_entropy: Var,
    /// `reduce_n(sum_j g_nj) / c`, unscaled by lambda; absent without gates.
    pub gate_penalty: Option<Var>,
}

/// Cross-entropy plus `lambda * reduce_n(||g_n||_1) / c`.
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    gates: Option<Var>,
    lambda: f32,
    reduction: BatchReduction,
) -> Result<LossTerms> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let ce = softmax_cross_entropy(g, logits, labels)?;
    let Some(gv) = gates else {
        return Ok(LossTerms {
            total: ce,
            cross_entropy: ce,
            gate_penalty: None,
        });
    };
    let &[n, c] = g.shape(gv) else {
        return Err(Error::invalid(format!("gates must be N x c, got {:?}", g.shape(gv))));
    };
    if c == 0 || n == 0 {
        return Err(Error::invalid("gate penalty needs c > 0 and a non-empty batch"));
    }
    let s = g.sum(gv);
    let div = match reduction {
        BatchReduction::Mean => (n * c) as f32,
        BatchReduction::Sum => c as f32,
    };
    let penalty = g.scale(s, 1.0 / div);
    let total = if lambda == 0.0 {
        ce
    } else {
        let weighted = g.scale(penalty, lambda);
        g.add(ce, weighted)?
    };
    Ok(LossTerms {
        total,
        cross_entropy: ce,
        gate_penalty: Some(penalty),
    })
}

/// Where gradients of the gate penalty go.
#[derive(Clone, Debug, Default)]
pub struct RoutingReport {
    /// Parameters structurally reachable from the penalty.
    pub reachable: Vec<String>,
    /// Backbone parameters reachable from the penalty (must be empty).
    pub symbolic_violations: Vec<String>,
    /// Backbone parameters with a nonzero penalty gradient (must be empty).
    pub numeric_violations: Vec<String>,
    /// Backbone parameters whose gradient differs between `lambda = 0` and
    /// `lambda = lambda_probe` with identical gates (must be empty).
    pub lambda_diff_violations: Vec<String>,
    /// L2 norm of the penalty gradient on the head's output weights.
    pub head_w2_grad_norm: f64,
}

impl RoutingReport {
    pub fn is_clean(&self) -> bool {
        self.symbolic_violations.is_empty() && self.numeric_violations.is_empty() && self.lambda_diff_violations.is_empty()
    }
}

/// Checks that the gate penalty sends no gradient into the backbone, both by
/// graph reachability and by differentiating the penalty alone. Also
/// compares backbone gradients of the full loss at `lambda = 0` and
/// `lambda_probe` under the same noise draw with the alpha route forced.
pub fn gradient_routing_check(net: &GaterNet, x: &Tensor, labels: &[usize], lambda_probe: f32, seed: u64) -> Result<RoutingReport> {
    use rand::SeedableRng;
    let mut report = RoutingReport::default();
    let opts = ForwardOptions::train().force_branch(Branch::Alpha);
    let store = net.store();

    // penalty alone
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let out = net.forward(&mut g, xv, &opts, &mut rng)?;
    let terms = total_loss(&mut g, out.logits, labels, out.gates.as_ref().map(|p| p.gates), 1.0, BatchReduction::Mean)?;
    if let Some(pen) = terms.gate_penalty {
        let leaves: BTreeSet<_> = g.reachable_leaves(pen).into_iter().filter_map(|v| out.bound.param_of(v)).collect();
        for id in leaves {
            let p = store.get(id);
            report.reachable.push(p.name.clone());
            if p.component == Component::Backbone {
                report.symbolic_violations.push(p.name.clone());
            }
        }
        g.backward(pen)?;
        let grads = out.bound.grads(&g);
        for id in store.ids() {
            let p = store.get(id);
            if p.component == Component::Backbone {
                if let Some(gr) = grads.get(id) {
                    if gr.data().iter().any(|&v| v != 0.0) {
                        report.numeric_violations.push(p.name.clone());
                    }
                }
            }
        }
        if let Some(head) = net.head_params() {
            let (_, _, w2, _) = head.linear_ids();
            report.head_w2_grad_norm = grads.get(w2).map_or(0.0, |t| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt());
        }
    }

    // full loss at two lambdas, same noise and routes
    let backbone_grads = |lambda: f32| -> Result<Vec<Option<Tensor>>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let out = net.forward(&mut g, xv, &opts, &mut rng)?;
        let terms = total_loss(&mut g, out.logits, labels, out.gates.as_ref().map(|p| p.gates), lambda, BatchReduction::Mean)?;
        g.backward(terms.total)?;
        let grads = out.bound.grads(&g);
        Ok(store
            .ids()
            .map(|id| (store.get(id).component == Component::Backbone).then(|| grads.get(id).cloned()).flatten())
            .collect())
    };
    let a = backbone_grads(0.0)?;
    let b = backbone_grads(lambda_probe)?;
    for (id, (ga, gb)) in store.ids().zip(a.iter().zip(&b)) {
        let same = match (ga, gb) {
            (Some(x), Some(y)) => x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()),
            (None, None) => true,
            _ => false,
        };
        if !same {
            report.lambda_diff_violations.push(store.get(id).name.clone());
        }
    }
    Ok(report)
}

/// Forward options for one training step of `phase`.
pub(crate) fn phase_forward_options(phase: Phase, dropout_rate: f32) -> ForwardOptions {
    let base = ForwardOptions::train().trainable(phase.trainable());
    match phase {
        Phase::PretrainBackbone => base.gating(Gating::AllOn),
        Phase::PretrainGater => base,
        Phase::Joint => base.dropout(dropout_rate),
    }
}

/// Stream id of the rng for one epoch of one phase.
pub(crate) fn epoch_stream(phase: Phase, epoch: usize) -> u64 {
    (phase.index() << 40) | epoch as u64
}
