//! Improved SemHash: binary gates from real-valued pre-activations.
//!
//! Training adds unit Gaussian noise to the pre-activations, computes a
//! relaxed gate through the saturating sigmoid and a hard gate by
//! thresholding at zero, then routes each sample through one of the two at
//! random. Both routes share the relaxed gate's derivative on the way back.
//! Evaluation is noise-free and always uses the hard gate.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{sigmoid, Graph, Tensor, Var};

/// `max(0, min(1, 1.2 sigmoid(x) - 0.1))`.
#[inline]
pub fn saturating_sigmoid_scalar(x: f32) -> f32 {
    (1.2 * sigmoid(x) - 0.1).clamp(0.0, 1.0)
}

/// Derivative of [`saturating_sigmoid_scalar`]: `1.2 s (1 - s)` inside the
/// unclipped region and zero where the output is clipped.
#[inline]
pub fn saturating_sigmoid_grad_scalar(x: f32) -> f32 {
    let s = sigmoid(x);
    let y = 1.2 * s - 0.1;
    if y > 0.0 && y < 1.0 {
        1.2 * s * (1.0 - s)
    } else {
        0.0
    }
}

pub fn saturating_sigmoid(g: &mut Graph, x: Var) -> Var {
    let out = g.value(x).map(saturating_sigmoid_scalar);
    g.record(
        "saturating_sigmoid",
        out,
        vec![x],
        Box::new(|grad, p, _| {
            let d = grad.zip_map(p[0], |gv, x| gv * saturating_sigmoid_grad_scalar(x));
            vec![Some(d.expect("same shape"))]
        }),
    )
}

/// Which relaxation a training sample was routed through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Real-valued saturating-sigmoid gates.
    Alpha,
    /// Binary thresholded gates.
    Beta,
}

/// Artifacts of one gate discretization pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GateBundle {
    pub g_pre: Tensor,
    pub g_noisy: Tensor,
    pub g_alpha: Tensor,
    pub g_beta: Tensor,
    pub selected: Tensor,
    /// Per-sample route; always `Beta` in evaluation.
    pub branches: Vec<Branch>,
    pub mode: Mode,
}

impl GateBundle {
    pub fn num_samples(&self) -> usize {
        self.branches.len()
    }

    pub fn num_gates(&self) -> usize {
        self.g_pre.shape().get(1).copied().unwrap_or(0)
    }
}

fn gate_matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, c] => Ok((n, c)),
        ref s => Err(Error::invalid(format!("gate pre-activations must be N x c, got {s:?}"))),
    }
}

/// Discretizes `g_pre` into gates.
///
/// `force_branch` pins every training sample to one route (used by gradient
/// tests); it is ignored in evaluation. The rng is consumed for noise
/// (row-major, one draw per entry) and then for one route flag per sample.
pub fn semhash_forward<R: Rng + ?Sized>(
    g_pre: &Tensor,
    mode: Mode,
    rng: &mut R,
    force_branch: Option<Branch>,
) -> Result<GateBundle> {
    let (n, c) = gate_matrix_dims(g_pre)?;
    let g_noisy = match mode {
        Mode::Eval => g_pre.clone(),
        Mode::Train => {
            let mut noisy = g_pre.clone();
            for v in noisy.data_mut() {
                let eps: f32 = StandardNormal.sample(rng);
                *v += eps;
            }
            noisy
        }
    };
    let g_alpha = g_noisy.map(saturating_sigmoid_scalar);
    let g_beta = g_noisy.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let branches: Vec<Branch> = match mode {
        Mode::Eval => vec![Branch::Beta; n],
        Mode::Train => (0..n)
            .map(|_| {
                let coin = rng.random_bool(0.5);
                force_branch.unwrap_or(if coin { Branch::Beta } else { Branch::Alpha })
            })
            .collect(),
    };
    let mut selected = g_beta.clone();
    for (s, b) in branches.iter().enumerate() {
        if *b == Branch::Alpha {
            selected.data_mut()[s * c..(s + 1) * c].copy_from_slice(&g_alpha.data()[s * c..(s + 1) * c]);
        }
    }
    Ok(GateBundle {
        g_pre: g_pre.clone(),
        g_noisy,
        g_alpha,
        g_beta,
        selected,
        branches,
        mode,
    })
}

/// Gradient with respect to `g_pre` given the gradient arriving at the
/// selected gates. Both routes use the saturating sigmoid's derivative at
/// the noisy pre-activation.
pub fn semhash_backward(upstream: &Tensor, bundle: &GateBundle) -> Result<Tensor> {
    if bundle.mode == Mode::Eval {
        return Err(Error::invalid("semhash backward needs a training-mode gate bundle"));
    }
    if upstream.shape() != bundle.g_noisy.shape() {
        return Err(Error::ShapeMismatch {
            op: "semhash_backward",
            lhs: upstream.shape().to_vec(),
            rhs: bundle.g_noisy.shape().to_vec(),
        });
    }
    upstream.zip_map(&bundle.g_noisy, |u, x| u * saturating_sigmoid_grad_scalar(x))
}

/// Records gate discretization of `g_pre` on the graph. Returns the selected
/// gates and the bundle. In evaluation the result is a constant.
pub fn semhash_gates<R: Rng + ?Sized>(
    g: &mut Graph,
    g_pre: Var,
    mode: Mode,
    rng: &mut R,
    force_branch: Option<Branch>,
) -> Result<(Var, GateBundle)> {
    let bundle = semhash_forward(g.value(g_pre), mode, rng, force_branch)?;
    let selected = bundle.selected.clone();
    let var = match mode {
        Mode::Eval => g.constant(selected),
        Mode::Train => {
            let for_grad = bundle.clone();
            g.record(
                "semhash",
                selected,
                vec![g_pre],
                Box::new(move |grad, _, _| {
                    vec![Some(semhash_backward(grad, &for_grad).expect("training bundle"))]
                }),
            )
        }
    };
    Ok((var, bundle))
}

/// Keep-mask for gate dropout: each entry is 0 with probability `rate`,
/// else 1. Surviving gates are not rescaled, so binary gates stay binary.
pub fn gate_dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f32, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("gate dropout rate must be in [0, 1), got {rate}")));
    }
    let numel: usize = shape.iter().product();
    let data = if rate == 0.0 {
        vec![1.0; numel]
    } else {
        (0..numel)
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { 1.0 })
            .collect()
    };
    Tensor::new(shape.to_vec(), data)
}

/// Zeroes each entry of `selected` independently with probability `rate`.
pub fn gate_dropout<R: Rng + ?Sized>(selected: &Tensor, rate: f32, rng: &mut R) -> Result<Tensor> {
    let mask = gate_dropout_mask(selected.shape(), rate, rng)?;
    selected.zip_map(&mask, |v, m| v * m)
}

/// Gate dropout rate rising linearly over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateDropoutSchedule {
    #[serde(default)]
    pub start_rate: f32,
    #[serde(default = "default_end_rate")]
    pub end_rate: f32,
    /// Filled in by the trainer from epochs x steps per epoch when zero.
    #[serde(default)]
    pub total_steps: u64,
}

fn default_end_rate() -> f32 {
    0.05
}

impl Default for GateDropoutSchedule {
    fn default() -> Self {
        Self {
            start_rate: 0.0,
            end_rate: default_end_rate(),
            total_steps: 0,
        }
    }
}

impl GateDropoutSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.start_rate && self.start_rate <= self.end_rate && self.end_rate < 1.0) {
            return Err(Error::invalid(format!(
                "dropout schedule needs 0 <= start <= end < 1, got {} -> {}",
                self.start_rate, self.end_rate
            )));
        }
        Ok(())
    }
}

/// Linear interpolation from `start_rate` at step 0 to `end_rate` at the
/// final step `total_steps - 1`; later steps stay at `end_rate`.
pub fn dropout_rate_at(schedule: &GateDropoutSchedule, step: u64) -> f32 {
    let last = schedule.total_steps.saturating_sub(1);
    if step >= last {
        return schedule.end_rate;
    }
    let frac = step as f64 / last as f64;
    (schedule.start_rate as f64 + (schedule.end_rate - schedule.start_rate) as f64 * frac) as f32
}
