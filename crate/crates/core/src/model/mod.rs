//! GaterNet: a backbone CNN whose filters are switched per input by gates
//! from a separate gater network.
//!
//! The gater runs a small CNN feature extractor ending in global average
//! pooling (`N x h` features), then a bottleneck head
//! `FC2(relu(bn(FC1(f))))` producing `N x c` gate pre-activations, which
//! [`crate::semhash`] discretizes. Backbone conv layers flagged `gated`
//! multiply their post-relu output channels by their slice of the gates.

mod gated;
mod params;
mod spec;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use gated::{gated_conv_forward, mask_channels, selective_conv_reference, BnArgs, BnEval};
pub use params::{Bound, Component, Grads, Param, ParamId, ParamKind, ParamStore, StatsId};
pub use spec::{GateSite, LayerSpec, ModelSpec};

use crate::error::{Error, Result};
use crate::layers::{
    avg_pool, batch_norm, fully_connected, global_avg_pool, BatchNormConfig, Conv2dConfig, Mode, RunningStats,
};
use crate::semhash::{gate_dropout_mask, semhash_gates, Branch, GateBundle};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    bias: Option<ParamId>,
    bn: Option<BnIds>,
    cfg: Conv2dConfig,
    gates: Option<Range<usize>>,
}

#[derive(Clone, Debug)]
enum Block {
    Conv(ConvBlock),
    AvgPool(usize),
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

/// Parameter handles of the gater bottleneck head.
#[derive(Clone, Debug)]
pub struct GaterHeadParams {
    fc1: Linear,
    bn: BnIds,
    fc2: Linear,
}

impl GaterHeadParams {
    /// `(W1, b1, W2, b2)`.
    pub fn linear_ids(&self) -> (ParamId, ParamId, ParamId, ParamId) {
        (self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)
    }
}

/// Where the backbone gates come from in one forward pass.
#[derive(Clone, Debug)]
pub enum Gating {
    /// Gates from the gater network through SemHash.
    Gater,
    /// Every gate is 1 (the backbone runs without masking).
    AllOn,
    /// Caller-supplied `N x c` gates.
    Fixed(Tensor),
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub gating: Gating,
    /// Pins the SemHash route of every training sample.
    pub force_branch: Option<Branch>,
    /// Gate dropout rate, training only.
    pub dropout_rate: f32,
    /// Components whose parameters become gradient leaves.
    pub trainable: Vec<Component>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            gating: Gating::Gater,
            force_branch: None,
            dropout_rate: 0.0,
            trainable: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            gating: Gating::Gater,
            force_branch: None,
            dropout_rate: 0.0,
            trainable: vec![Component::Backbone, Component::Gater, Component::Head],
        }
    }

    pub fn gating(mut self, gating: Gating) -> Self {
        self.gating = gating;
        self
    }

    pub fn force_branch(mut self, b: Branch) -> Self {
        self.force_branch = Some(b);
        self
    }

    pub fn dropout(mut self, rate: f32) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn trainable(mut self, components: &[Component]) -> Self {
        self.trainable = components.to_vec();
        self
    }
}

/// Gate values used by the backbone in one pass.
#[derive(Debug)]
pub struct GatePass {
    /// Gate pre-activations from the head (absent for fixed gates).
    pub g_pre: Option<Var>,
    /// Gates after selection and dropout, `N x c`.
    pub gates: Var,
    pub bundle: Option<GateBundle>,
    pub dropout_mask: Option<Tensor>,
}

/// Result of [`GaterNet::forward`].
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Absent when gating is `AllOn` or the model has no gated layers.
    pub gates: Option<GatePass>,
    pub bound: Bound,
    /// Running-statistic updates from training-mode batchnorm, applied by
    /// the caller.
    pub bn_updates: Vec<(StatsId, RunningStats)>,
}

/// Parameter tallies per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub backbone: usize,
    pub gater: usize,
    /// All head parameters, including biases and batchnorm.
    pub head: usize,
    /// Weight matrices of the head only: `(h + c) * b`.
    pub head_weights: usize,
    /// A single `h x c` projection, for comparison.
    pub single_layer_alternative: usize,
    /// Gater-pretraining classifier, not part of `total`.
    pub aux: usize,
    pub total: usize,
}

/// Backbone, gater and head with their parameters.
#[derive(Clone, Debug)]
pub struct GaterNet {
    spec: ModelSpec,
    store: ParamStore,
    backbone: Vec<Block>,
    classifier: Linear,
    gater: Vec<Block>,
    head: Option<GaterHeadParams>,
    aux: Option<Linear>,
    bn_cfg: BatchNormConfig,
}

fn conv_geometry(layer: &LayerSpec) -> Option<(usize, usize, Conv2dConfig)> {
    match *layer {
        LayerSpec::Conv {
            filters,
            kernel,
            stride,
            padding,
            ..
        } => Some((
            filters,
            kernel,
            Conv2dConfig {
                stride,
                padding: padding.unwrap_or(kernel / 2),
            },
        )),
        LayerSpec::AvgPool { .. } => None,
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn stack(&mut self, prefix: &str, component: Component, layers: &[LayerSpec], spec: &ModelSpec) -> (Vec<Block>, usize) {
        let mut channels = spec.input_channels;
        let mut blocks = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let Some((filters, kernel, cfg)) = conv_geometry(layer) else {
                if let LayerSpec::AvgPool { size } = layer {
                    blocks.push(Block::AvgPool(*size));
                }
                continue;
            };
            let batchnorm = matches!(layer, LayerSpec::Conv { batchnorm: true, .. });
            let fan_in = channels * kernel * kernel;
            let std = (2.0 / fan_in as f32).sqrt();
            let weight = self.store.add(
                format!("{prefix}.conv{i}.weight"),
                Tensor::randn(vec![filters, channels, kernel, kernel], std, &mut self.rng),
                component,
                ParamKind::Weight,
            );
            let (bias, bn) = if batchnorm {
                (None, Some(self.bn(&format!("{prefix}.bn{i}"), component, filters)))
            } else {
                let b = self.store.add(
                    format!("{prefix}.conv{i}.bias"),
                    Tensor::zeros(vec![filters]),
                    component,
                    ParamKind::Bias,
                );
                (Some(b), None)
            };
            let gates = if component == Component::Backbone { spec.gate_range(i) } else { None };
            blocks.push(Block::Conv(ConvBlock {
                weight,
                bias,
                bn,
                cfg,
                gates,
            }));
            channels = filters;
        }
        (blocks, channels)
    }

    fn bn(&mut self, prefix: &str, component: Component, ch: usize) -> BnIds {
        BnIds {
            gamma: self.store.add(format!("{prefix}.gamma"), Tensor::ones(vec![ch]), component, ParamKind::NormScale),
            beta: self.store.add(format!("{prefix}.beta"), Tensor::zeros(vec![ch]), component, ParamKind::NormShift),
            stats: self.store.add_stats(format!("{prefix}.running"), component, ch),
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in))` weights.
    fn linear(&mut self, prefix: &str, component: Component, fan_in: usize, fan_out: usize, bias: f32) -> Linear {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Linear {
            weight: self.store.add(
                format!("{prefix}.weight"),
                Tensor::uniform(vec![fan_in, fan_out], bound, &mut self.rng),
                component,
                ParamKind::Weight,
            ),
            bias: self.store.add(
                format!("{prefix}.bias"),
                Tensor::full(vec![fan_out], bias),
                component,
                ParamKind::Bias,
            ),
        }
    }
}

/// Initial value of every entry of the head's output bias, so fresh gates
/// start mostly on.
pub const HEAD_BIAS_INIT: f32 = 1.0;

impl GaterNet {
    /// Builds and randomly initializes every parameter from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (backbone, width) = b.stack("backbone", Component::Backbone, &spec.backbone, &spec);
        let classifier = b.linear("backbone.fc", Component::Backbone, width, spec.num_classes, 0.0);
        let (gater, h) = b.stack("gater", Component::Gater, &spec.gater, &spec);
        let c = spec.gated_filter_total();
        let head = (c > 0).then(|| GaterHeadParams {
            fc1: b.linear("head.fc1", Component::Head, h, spec.bottleneck, 0.0),
            bn: b.bn("head.bn", Component::Head, spec.bottleneck),
            fc2: b.linear("head.fc2", Component::Head, spec.bottleneck, c, HEAD_BIAS_INIT),
        });
        let aux = spec
            .has_gater()
            .then(|| b.linear("aux.fc", Component::Aux, h, spec.num_classes, 0.0));
        Ok(Self {
            spec,
            store,
            backbone,
            classifier,
            gater,
            head,
            aux,
            bn_cfg: BatchNormConfig::default(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn head_params(&self) -> Option<&GaterHeadParams> {
        self.head.as_ref()
    }

    pub fn num_gates(&self) -> usize {
        self.spec.gated_filter_total()
    }

    /// Re-draws the head parameters and resets its batchnorm, as at the
    /// start of joint training.
    pub fn reinit_head(&mut self, seed: u64) {
        let Some(head) = self.head.clone() else { return };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for lin in [&head.fc1, &head.fc2] {
            let w = self.store.value_mut(lin.weight);
            let bound = 1.0 / (w.shape()[0] as f32).sqrt();
            *w = Tensor::uniform(w.shape().to_vec(), bound, &mut rng);
        }
        let b1 = self.store.value_mut(head.fc1.bias);
        *b1 = Tensor::zeros(b1.shape().to_vec());
        let b2 = self.store.value_mut(head.fc2.bias);
        *b2 = Tensor::full(b2.shape().to_vec(), HEAD_BIAS_INIT);
        let g = self.store.value_mut(head.bn.gamma);
        *g = Tensor::ones(g.shape().to_vec());
        let bt = self.store.value_mut(head.bn.beta);
        *bt = Tensor::zeros(bt.shape().to_vec());
        let ch = self.spec.bottleneck;
        self.store.set_stats(head.bn.stats, RunningStats::new(ch));
    }

    /// Exact parameter tallies from the instantiated tensors.
    pub fn param_count(&self) -> ParamCount {
        let h = self.spec.feature_size();
        let c = self.spec.gated_filter_total();
        let head_weights = self
            .head
            .as_ref()
            .map(|hd| self.store.get(hd.fc1.weight).value.len() + self.store.get(hd.fc2.weight).value.len())
            .unwrap_or(0);
        let backbone = self.store.count(Component::Backbone);
        let gater = self.store.count(Component::Gater);
        let head = self.store.count(Component::Head);
        ParamCount {
            backbone,
            gater,
            head,
            head_weights,
            single_layer_alternative: if c > 0 { h * c } else { 0 },
            aux: self.store.count(Component::Aux),
            total: backbone + gater + head,
        }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<usize> {
        let s = &self.spec;
        match *g.shape(x) {
            [n, c, h, w] if c == s.input_channels && h == s.input_size && w == s.input_size => Ok(n),
            ref other => Err(Error::ShapeMismatch {
                op: "model input",
                lhs: vec![0, s.input_channels, s.input_size, s.input_size],
                rhs: other.to_vec(),
            }),
        }
    }

    fn bn_args<'a>(&'a self, bound: &Bound, ids: &BnIds) -> BnArgs<'a> {
        BnArgs {
            gamma: bound.var(ids.gamma),
            beta: bound.var(ids.beta),
            stats: self.store.stats(ids.stats),
            cfg: self.bn_cfg,
        }
    }

    fn run_stack(
        &self,
        g: &mut Graph,
        bound: &Bound,
        blocks: &[Block],
        mut x: Var,
        gates: Option<Var>,
        mode: Mode,
        updates: &mut Vec<(StatsId, RunningStats)>,
    ) -> Result<Var> {
        for block in blocks {
            x = match block {
                Block::AvgPool(size) => avg_pool(g, x, *size)?,
                Block::Conv(cb) => {
                    let slice = match (&cb.gates, gates) {
                        (Some(range), Some(all)) => Some(g.slice_columns(all, range.clone())?),
                        _ => None,
                    };
                    let bn = cb.bn.as_ref().map(|ids| self.bn_args(bound, ids));
                    let (y, stats) = gated_conv_forward(
                        g,
                        x,
                        bound.var(cb.weight),
                        cb.bias.map(|b| bound.var(b)),
                        cb.cfg,
                        bn,
                        slice,
                        mode,
                    )?;
                    if let (Some(s), Some(ids)) = (stats, &cb.bn) {
                        updates.push((ids.stats, s));
                    }
                    y
                }
            };
        }
        Ok(x)
    }

    /// Gater feature extractor: `N x h` pooled features.
    pub fn gater_features(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        mode: Mode,
        updates: &mut Vec<(StatsId, RunningStats)>,
    ) -> Result<Var> {
        self.check_input(g, x)?;
        if self.gater.is_empty() {
            return Err(Error::invalid("model has no gater"));
        }
        let y = self.run_stack(g, bound, &self.gater, x, None, mode, updates)?;
        global_avg_pool(g, y)
    }

    /// Bottleneck head: `FC2(relu(bn(FC1(f))))`, `N x h -> N x c`.
    pub fn gater_head(
        &self,
        g: &mut Graph,
        bound: &Bound,
        features: Var,
        mode: Mode,
        updates: &mut Vec<(StatsId, RunningStats)>,
    ) -> Result<Var> {
        let head = self.head.as_ref().ok_or_else(|| Error::invalid("model has no gated layers"))?;
        let h = self.spec.feature_size();
        match *g.shape(features) {
            [_, w] if w == h => {}
            ref s => {
                return Err(Error::ShapeMismatch {
                    op: "gater_head",
                    lhs: vec![0, h],
                    rhs: s.to_vec(),
                })
            }
        }
        let f1 = fully_connected(g, features, bound.var(head.fc1.weight), bound.var(head.fc1.bias))?;
        let bn = self.bn_args(bound, &head.bn);
        let (z, stats) = batch_norm(g, f1, bn.gamma, bn.beta, bn.stats, bn.cfg, mode)?;
        if let Some(s) = stats {
            updates.push((head.bn.stats, s));
        }
        let z = g.relu(z);
        fully_connected(g, z, bound.var(head.fc2.weight), bound.var(head.fc2.bias))
    }

    /// Backbone logits with optional `N x c` gates.
    pub fn backbone_logits(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        gates: Option<Var>,
        mode: Mode,
        updates: &mut Vec<(StatsId, RunningStats)>,
    ) -> Result<Var> {
        self.check_input(g, x)?;
        let y = self.run_stack(g, bound, &self.backbone, x, gates, mode, updates)?;
        let pooled = global_avg_pool(g, y)?;
        fully_connected(g, pooled, bound.var(self.classifier.weight), bound.var(self.classifier.bias))
    }

    /// Logits of the temporary classifier on gater features.
    pub fn aux_logits(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        mode: Mode,
        updates: &mut Vec<(StatsId, RunningStats)>,
    ) -> Result<Var> {
        let aux = self.aux.as_ref().ok_or_else(|| Error::invalid("model has no gater"))?;
        let f = self.gater_features(g, bound, x, mode, updates)?;
        fully_connected(g, f, bound.var(aux.weight), bound.var(aux.bias))
    }

    /// Full forward pass: gater, gate discretization, optional gate dropout,
    /// gated backbone.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let n = self.check_input(g, x)?;
        let bound = self.store.bind(g, |c| opts.trainable.contains(&c));
        let mut updates = Vec::new();
        let c = self.num_gates();

        let gates = match (&opts.gating, c) {
            (_, 0) | (Gating::AllOn, _) => None,
            (Gating::Fixed(t), _) => {
                if t.shape() != [n, c] {
                    return Err(Error::ShapeMismatch {
                        op: "fixed gates",
                        lhs: vec![n, c],
                        rhs: t.shape().to_vec(),
                    });
                }
                Some(GatePass {
                    g_pre: None,
                    gates: g.constant(t.clone()),
                    bundle: None,
                    dropout_mask: None,
                })
            }
            (Gating::Gater, _) => {
                let f = self.gater_features(g, &bound, x, opts.mode, &mut updates)?;
                let g_pre = self.gater_head(g, &bound, f, opts.mode, &mut updates)?;
                let (selected, bundle) = semhash_gates(g, g_pre, opts.mode, rng, opts.force_branch)?;
                let (gates, mask) = if opts.mode == Mode::Train && opts.dropout_rate > 0.0 {
                    let mask = gate_dropout_mask(&[n, c], opts.dropout_rate, rng)?;
                    let mv = g.constant(mask.clone());
                    (g.mul(selected, mv)?, Some(mask))
                } else {
                    (selected, None)
                };
                Some(GatePass {
                    g_pre: Some(g_pre),
                    gates,
                    bundle: Some(bundle),
                    dropout_mask: mask,
                })
            }
        };
        let logits = self.backbone_logits(g, &bound, x, gates.as_ref().map(|p| p.gates), opts.mode, &mut updates)?;
        Ok(ForwardOutput {
            logits,
            gates,
            bound,
            bn_updates: updates,
        })
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<(StatsId, RunningStats)>) {
        for (id, s) in updates {
            self.store.set_stats(id, s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_channels: 3,
            input_size: 8,
            num_classes: 4,
            backbone: vec![
                LayerSpec::gated_conv(4),
                LayerSpec::conv(6).with_stride(2),
                LayerSpec::gated_conv(5),
            ],
            gater: vec![LayerSpec::conv(3).with_stride(2), LayerSpec::conv(7)],
            bottleneck: 2,
        }
    }

    #[test]
    fn hand_tallied_param_count() {
        let net = GaterNet::new(tiny_spec(), 0).unwrap();
        let pc = net.param_count();
        // backbone: 3 convs (no bias, bn gamma+beta) + fc
        let backbone = (4 * 3 * 9 + 8) + (6 * 4 * 9 + 12) + (5 * 6 * 9 + 10) + (5 * 4 + 4);
        let gater = (3 * 3 * 9 + 6) + (7 * 3 * 9 + 14);
        let head = (7 * 2 + 2) + 4 + (2 * 9 + 9);
        assert_eq!(pc.backbone, backbone);
        assert_eq!(pc.gater, gater);
        assert_eq!(pc.head, head);
        assert_eq!(pc.head_weights, (7 + 9) * 2);
        assert_eq!(pc.single_layer_alternative, 7 * 9);
        assert_eq!(pc.aux, 7 * 4 + 4);
        assert_eq!(pc.total, backbone + gater + head);
    }

    #[test]
    fn empty_gater_counts_zero() {
        let net = GaterNet::new(tiny_spec().ungated(), 0).unwrap();
        let pc = net.param_count();
        assert_eq!((pc.gater, pc.head, pc.aux, pc.head_weights), (0, 0, 0, 0));
    }

    #[test]
    fn forward_shapes_and_eval_gates() {
        let net = GaterNet::new(tiny_spec(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![5, 3, 8, 8], 1.0, &mut rng);
        let run = |rng: &mut ChaCha8Rng| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = net.forward(&mut g, xv, &ForwardOptions::eval(), rng).unwrap();
            let gates = out.gates.unwrap();
            (g.value(out.logits).clone(), g.value(gates.gates).clone())
        };
        let (logits, gates) = run(&mut rng);
        assert_eq!(logits.shape(), &[5, 4]);
        assert_eq!(gates.shape(), &[5, 9]);
        assert!(gates.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(run(&mut ChaCha8Rng::seed_from_u64(99)), (logits, gates));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = GaterNet::new(tiny_spec(), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 3, 6, 6]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(net.forward(&mut g, x, &ForwardOptions::eval(), &mut rng).is_err());
    }
}
