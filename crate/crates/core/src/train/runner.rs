use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{epoch_stream, lr_at, phase_forward_options, total_loss, Checkpoint, CheckpointMeta, Phase, Sgd, TrainConfig};
use crate::analyze::GateLog;
use crate::data::{AugmentFlags, Dataset};
use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy, Mode};
use crate::model::{Component, ForwardOptions, GaterNet, Gating, ModelSpec};
use crate::semhash::dropout_rate_at;
use crate::tensor::Graph;
use crate::util::write_atomic;

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    /// Mean of `||g||_1 / c` over the eval set; absent without gates.
    pub mean_gate_activation: Option<f64>,
    pub lr: f32,
    pub dropout_rate: f32,
}

pub const METRICS_HEADER: &str = "epoch,phase,train_loss,eval_acc,mean_gate_activation,lr,dropout_rate,train_acc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            self.train_loss,
            self.eval_acc,
            self.mean_gate_activation.map(|v| v.to_string()).unwrap_or_default(),
            self.lr,
            self.dropout_rate,
            self.train_acc
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "{METRICS_HEADER}")?;
        for r in rows {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    })
}

/// Which classifier to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    /// Backbone with every gate on.
    Backbone,
    /// Gater features with the temporary classifier.
    Aux,
    /// Gater plus gated backbone.
    Full,
}

impl EvalTarget {
    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::PretrainBackbone => EvalTarget::Backbone,
            Phase::PretrainGater => EvalTarget::Aux,
            Phase::Joint => EvalTarget::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub mean_gate_activation: Option<f64>,
    pub gate_log: Option<GateLog>,
    /// Predicted class of every sample.
    pub predictions: Vec<usize>,
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Eval-mode pass over `data`. With `collect_gates`, also returns the
/// binary gate vector of every sample.
pub fn evaluate(net: &GaterNet, data: &Dataset, target: EvalTarget, batch_size: usize, collect_gates: bool) -> Result<EvalReport> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::invalid("evaluation needs a non-empty dataset and batch_size >= 1"));
    }
    let c = net.num_gates();
    let sites = net.spec().gate_map();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut gate_sum = 0.0f64;
    let mut has_gates = false;
    let mut log: Option<GateLog> = None;
    let mut predictions = Vec::with_capacity(data.len());
    // eval mode draws nothing from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = data.batch(chunk, None, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (logits, gates) = match target {
            EvalTarget::Aux => {
                let bound = net.store().bind(&mut g, |_| false);
                let mut updates = Vec::new();
                (net.aux_logits(&mut g, &bound, xv, Mode::Eval, &mut updates)?, None)
            }
            EvalTarget::Backbone | EvalTarget::Full => {
                let gating = if target == EvalTarget::Backbone { Gating::AllOn } else { Gating::Gater };
                let out = net.forward(&mut g, xv, &ForwardOptions::eval().gating(gating), &mut rng)?;
                (out.logits, out.gates.map(|p| p.gates))
            }
        };
        let ce = softmax_cross_entropy(&mut g, logits, &labels)?;
        loss_sum += g.value(ce).item()? as f64 * chunk.len() as f64;
        let k = net.spec().num_classes;
        for (row, &y) in g.value(logits).data().chunks(k).zip(&labels) {
            let p = argmax(row);
            correct += (p == y) as usize;
            predictions.push(p);
        }
        if let Some(gv) = gates {
            has_gates = true;
            let t = g.value(gv);
            gate_sum += t.sum() / c as f64;
            if collect_gates {
                let part = GateLog::from_f32_rows(t.data(), labels.iter().map(|&l| l as u32).collect(), &sites)?;
                match &mut log {
                    Some(l) => l.extend(&part)?,
                    None => log = Some(part),
                }
            }
        }
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        loss: loss_sum / n,
        mean_gate_activation: has_gates.then(|| gate_sum / n),
        gate_log: log,
        predictions,
    })
}

/// Checkpoints a phase starts from.
#[derive(Default)]
pub struct PhaseInputs<'a> {
    /// Continue an interrupted run of the same phase.
    pub resume: Option<&'a Checkpoint>,
    /// Pre-trained backbone, for the joint phase.
    pub backbone: Option<&'a Checkpoint>,
    /// Pre-trained gater, for the joint phase.
    pub gater: Option<&'a Checkpoint>,
    /// Allow the joint phase without pre-trained networks.
    pub from_scratch: bool,
    pub augment: AugmentFlags,
    /// Called after every epoch with that epoch's checkpoint.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics, &Checkpoint) -> Result<()>>,
}

pub struct PhaseOutput {
    pub net: GaterNet,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

fn check_source(ck: &Checkpoint, want: Phase, what: &str) -> Result<()> {
    if ck.meta.phase != want {
        return Err(Error::MissingPrerequisite(format!(
            "{what} checkpoint comes from phase {}, expected {want}",
            ck.meta.phase
        )));
    }
    Ok(())
}

/// Trains one phase and returns the model, its checkpoint and the per-epoch
/// metrics (including those of a resumed run).
pub fn run_phase(
    phase: Phase,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
    mut inputs: PhaseInputs<'_>,
) -> Result<PhaseOutput> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("training and evaluation sets must be non-empty"));
    }
    let mut net = GaterNet::new(spec.clone(), cfg.seed)?;
    if phase == Phase::PretrainGater && !spec.has_gater() {
        return Err(Error::invalid("pretrain-gater needs a model with a gater"));
    }
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let trainable = phase.trainable();
    let mut start_epoch = 0;
    let mut step = 0u64;
    let mut metrics = Vec::new();

    if let Some(ck) = inputs.resume {
        check_source(ck, phase, "resume")?;
        if ck.meta.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "training config hash mismatch on resume: checkpoint has {}, config has {}",
                ck.meta.config_hash,
                cfg.hash()
            )));
        }
        ck.restore(&mut net, Some(&mut sgd), trainable)?;
        start_epoch = ck.meta.epoch;
        step = ck.meta.step;
        metrics = ck.meta.metrics.clone();
        info!("resuming {phase} at epoch {start_epoch}");
    } else if phase == Phase::Joint && spec.is_gated() && !inputs.from_scratch {
        let (Some(bb), Some(gt)) = (inputs.backbone, inputs.gater) else {
            return Err(Error::MissingPrerequisite(
                "joint training needs pretrain-backbone and pretrain-gater checkpoints (or the from-scratch override)"
                    .into(),
            ));
        };
        check_source(bb, Phase::PretrainBackbone, "backbone")?;
        check_source(gt, Phase::PretrainGater, "gater")?;
        bb.restore(&mut net, None, &[Component::Backbone])?;
        gt.restore(&mut net, None, &[Component::Gater])?;
        net.reinit_head(cfg.seed ^ 0x4845_4144);
    }

    let epochs = cfg.epochs_for(phase);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let mut dropout = cfg.dropout_schedule;
    if dropout.total_steps == 0 {
        dropout.total_steps = (epochs as u64 * steps_per_epoch).max(1);
    }
    let skip: Vec<Component> = Component::ALL.into_iter().filter(|c| !trainable.contains(c)).collect();
    let meta_for = |epoch: usize, step: u64, metrics: &[EpochMetrics]| CheckpointMeta {
        phase,
        epoch,
        step,
        seed: cfg.seed,
        spec_hash: spec.hash(),
        config_hash: cfg.hash(),
        metrics: metrics.to_vec(),
    };

    for epoch in start_epoch..epochs {
        let lr = lr_at(&cfg.lr_schedule, epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch_stream(phase, epoch));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut rate = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            rate = if phase == Phase::Joint { dropout_rate_at(&dropout, step) } else { 0.0 };
            let (x, labels) = train.batch(chunk, Some(inputs.augment), &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let (loss, logits, bound, updates) = if phase == Phase::PretrainGater {
                let bound = net.store().bind(&mut g, |c| trainable.contains(&c));
                let mut updates = Vec::new();
                let logits = net.aux_logits(&mut g, &bound, xv, Mode::Train, &mut updates)?;
                (softmax_cross_entropy(&mut g, logits, &labels)?, logits, bound, updates)
            } else {
                let out = net.forward(&mut g, xv, &phase_forward_options(phase, rate), &mut rng)?;
                let gates = out.gates.as_ref().map(|p| p.gates);
                let terms = total_loss(&mut g, out.logits, &labels, gates, cfg.lambda, cfg.regularizer)?;
                (terms.total, out.logits, out.bound, out.bn_updates)
            };
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::invalid(format!("training loss became {lv} at epoch {epoch}")));
            }
            loss_sum += lv as f64 * chunk.len() as f64;
            let k = spec.num_classes;
            correct += g
                .value(logits)
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            g.backward(loss)?;
            sgd.step(net.store_mut(), &bound.grads(&g), lr)?;
            net.apply_bn_updates(updates);
            step += 1;
        }
        let report = evaluate(&net, eval, EvalTarget::for_phase(phase), cfg.batch_size.max(64), false)?;
        let row = EpochMetrics {
            epoch,
            phase,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            eval_acc: report.accuracy,
            mean_gate_activation: if phase == Phase::Joint { report.mean_gate_activation } else { None },
            lr,
            dropout_rate: rate,
        };
        info!("{}", row.csv_row());
        metrics.push(row);
        if let Some(cb) = inputs.on_epoch.as_mut() {
            let ck = Checkpoint::capture(&net, Some(&sgd), meta_for(epoch + 1, step, &metrics), &skip);
            cb(metrics.last().expect("pushed"), &ck)?;
        }
    }
    let checkpoint = Checkpoint::capture(&net, Some(&sgd), meta_for(epochs.max(start_epoch), step, &metrics), &skip);
    Ok(PhaseOutput {
        net,
        checkpoint,
        metrics,
    })
}
